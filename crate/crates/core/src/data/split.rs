use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Disjoint train/validation/test subject lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .all(|id| seen.insert(id))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `n` items into bins proportional to `fractions` (largest remainder,
/// ties to the earlier bin). When there are at least as many items as
/// positive fractions, every positive-fraction bin receives at least one.
pub fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / total * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    let positive = fractions.iter().filter(|&&f| f > 0.0).count();
    if n >= positive {
        for i in 0..3 {
            if fractions[i] > 0.0 && counts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| (counts[j], usize::MAX - j)).unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Stratified per-subject split: each class is shuffled with `seed` and
/// divided by `fractions` (train, valid, test).
pub fn split_per_subject(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0) || fractions.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be non-negative with a positive sum, got {fractions:?}"
        )));
    }
    let bins = fractions.iter().filter(|&&f| f > 0.0).count();
    if dataset.len() < bins {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} subjects into {bins} partitions",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitSpec {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for class_id in 0..dataset.n_classes() {
        let mut ids: Vec<String> = dataset
            .samples
            .iter()
            .filter(|s| s.class_id == class_id)
            .map(|s| s.subject_id.clone())
            .collect();
        if ids.is_empty() {
            continue;
        }
        ids.sort();
        ids.shuffle(&mut rng);
        let [a, b, _] = allocate(ids.len(), fractions);
        let mut rest = ids.into_iter();
        split.train.extend(rest.by_ref().take(a));
        split.valid.extend(rest.by_ref().take(b));
        split.test.extend(rest);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_ambiguous_dataset, gen_multiorgan_dataset};

    const FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

    #[test]
    fn ten_subjects_split_six_two_two() {
        assert_eq!(allocate(10, FRACTIONS), [6, 2, 2]);
        let ds = gen_multiorgan_dataset(&[(0, 10)], (32, 32), 0).unwrap();
        let split = split_per_subject(&ds, FRACTIONS, 3).unwrap();
        assert_eq!((split.train.len(), split.valid.len(), split.test.len()), (6, 2, 2));
    }

    #[test]
    fn allocation_covers_every_bin() {
        assert_eq!(allocate(3, FRACTIONS), [1, 1, 1]);
        assert_eq!(allocate(2, [0.75, 0.25, 0.0]), [1, 1, 0]);
        for n in 3..60 {
            let c = allocate(n, FRACTIONS);
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(c.iter().all(|&k| k >= 1));
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = gen_ambiguous_dataset(4, (32, 32), 1).unwrap();
        let a = split_per_subject(&ds, FRACTIONS, 11).unwrap();
        let b = split_per_subject(&ds, FRACTIONS, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.is_disjoint());
        assert_eq!(a.len(), ds.len());
    }

    #[test]
    fn stratified_over_many_seeds() {
        let ds = gen_ambiguous_dataset(10, (32, 32), 2).unwrap();
        for seed in 0..50 {
            let split = split_per_subject(&ds, FRACTIONS, seed).unwrap();
            for part in [&split.train, &split.valid, &split.test] {
                let samples = ds.select(part).unwrap();
                for class in 0..3 {
                    assert!(samples.iter().any(|s| s.class_id == class));
                }
            }
        }
    }

    #[test]
    fn too_few_subjects_rejected() {
        let ds = gen_multiorgan_dataset(&[(0, 2)], (32, 32), 0).unwrap();
        assert!(split_per_subject(&ds, FRACTIONS, 0).is_err());
    }
}
