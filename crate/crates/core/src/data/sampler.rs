use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One epoch of class-balanced batches over items with class ids
/// `classes[i]`. Every class contributes as many draws as the largest class:
/// each member once, then minority classes are topped up by sampling with
/// replacement. Class ids must be dense: every id below the largest one
/// needs at least one member. Returns indices into `classes`.
pub fn balanced_batches(classes: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n_classes = classes.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in classes.iter().enumerate() {
        members[c].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(empty));
    }
    if members.is_empty() {
        return Err(Error::InvalidArgument("no samples to batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut pool = Vec::with_capacity(per_class * n_classes);
    for group in &members {
        pool.extend_from_slice(group);
        for _ in group.len()..per_class {
            pool.push(group[rng.random_range(0..group.len())]);
        }
    }
    pool.shuffle(&mut rng);
    Ok(pool.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
