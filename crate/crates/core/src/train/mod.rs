//! Dice loss, Adam, cosine annealing, early stopping and the training loop.

mod optim;
mod schedule;

pub use optim::{Adam, AdamConfig};
pub use schedule::{cosine_lr, EarlyStopping, StopDecision};

use std::io::Write;

use crate::data::{balanced_batches, stack_batch, Dataset, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{one_hot_batch, FilmUNet, Modulation};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Length of the cosine arc and hard cap on epochs.
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum validation-loss decrease that counts as an improvement.
    pub epsilon: f64,
    pub adam: AdamConfig,
    pub dice_smooth: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            initial_lr: 0.001,
            max_epochs: 200,
            patience: 50,
            epsilon: 0.001,
            adam: AdamConfig::default(),
            dice_smooth: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.initial_lr.is_nan() || self.initial_lr <= 0.0 {
            return Err(Error::InvalidArgument("initial_lr must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be non-negative".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// What the FiLM generator is fed during training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetadataMode {
    /// The sample's own class, one-hot encoded.
    TrueClass,
    /// The same one-hot vector for every sample (uninformative control).
    Constant(usize),
}

impl MetadataMode {
    pub fn class_for(&self, sample: &Sample) -> usize {
        match self {
            MetadataMode::TrueClass => sample.class_id,
            MetadataMode::Constant(c) => *c,
        }
    }
}

/// Soft Dice loss on an existing graph node.
pub fn dice_loss_var(graph: &mut Graph, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    graph.dice_loss(pred, target, smooth)
}

/// `1 - (2 sum(p t) + s) / (sum p + sum t + s)` over the whole batch.
pub fn dice_loss(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let (inter, denom) = crate::tensor::dice_sums(pred.data(), target.data());
    Ok(1.0 - (2.0 * inter + smooth) / (denom + smooth))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation loss.
    pub model: FilmUNet,
    pub curves: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

/// Writes `epoch,train_loss,valid_loss,lr` rows.
pub fn write_curves<W: Write>(curves: &[EpochRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "valid_loss", "lr"])?;
    for r in curves {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.valid_loss.to_string(),
            r.lr.to_string(),
        ])?;
    }
    w.flush()
}

fn metadata_for(model: &FilmUNet, samples: &[&Sample], mode: MetadataMode) -> Result<Tensor> {
    let ids: Vec<usize> = samples.iter().map(|s| mode.class_for(s)).collect();
    one_hot_batch(&ids, model.config().n_metadata_classes)
}

/// Predicted probabilities `[n, 1, h, w]` for `samples`, conditioned on
/// `class_of(sample)`, evaluated in chunks of `chunk` samples.
pub fn predict<F>(model: &FilmUNet, samples: &[&Sample], chunk: usize, class_of: F) -> Result<Vec<Tensor>>
where
    F: Fn(&Sample) -> usize,
{
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let (images, _) = stack_batch(part)?;
        let ids: Vec<usize> = part.iter().map(|s| class_of(s)).collect();
        let meta = one_hot_batch(&ids, model.config().n_metadata_classes)?;
        let probs = model.forward_with(&images, &meta, Modulation::Generated)?;
        out.extend((0..part.len()).map(|i| probs.index_batch(i)));
    }
    Ok(out)
}

/// Dice loss over the full set, accumulated jointly across chunks.
pub fn evaluate_loss(
    model: &FilmUNet,
    samples: &[&Sample],
    mode: MetadataMode,
    config: &TrainConfig,
) -> Result<f64> {
    let preds = predict(model, samples, config.batch_size, |s| mode.class_for(s))?;
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        let (i, d) = crate::tensor::dice_sums(p.data(), s.mask.data());
        inter += i;
        denom += d;
    }
    Ok(1.0 - (2.0 * inter + config.dice_smooth) / (denom + config.dice_smooth))
}

/// One optimisation step on `batch`; returns the batch loss before the update.
pub fn train_step(
    model: &mut FilmUNet,
    optimizer: &mut Adam,
    batch: &[&Sample],
    mode: MetadataMode,
    lr: f64,
    smooth: f64,
) -> Result<f64> {
    let (images, masks) = stack_batch(batch)?;
    let meta = metadata_for(model, batch, mode)?;
    let mut graph = Graph::new();
    let vars = model.build(&mut graph, &images, &meta, Modulation::Generated, true)?;
    let loss = graph.dice_loss(vars.output, &masks, smooth)?;
    let value = graph.value(loss).data()[0];
    graph.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            graph
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();
    optimizer.step(model.params_mut(), &grads, lr)?;
    Ok(value)
}

/// Trains `model` on `split.train`, selecting the checkpoint with the best
/// validation loss on `split.valid`.
pub fn train(
    model: FilmUNet,
    dataset: &Dataset,
    split: &SplitSpec,
    config: &TrainConfig,
    mode: MetadataMode,
) -> Result<TrainOutcome> {
    let train_set = dataset.select(&split.train)?;
    let valid_set = dataset.select(&split.valid)?;
    train_on(model, &train_set, &valid_set, config, mode)
}

pub fn train_on(
    mut model: FilmUNet,
    train_set: &[&Sample],
    valid_set: &[&Sample],
    config: &TrainConfig,
    mode: MetadataMode,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    // dense class indices for the sampler, in order of first appearance by id
    let mut present: Vec<usize> = train_set.iter().map(|s| s.class_id).collect();
    present.sort_unstable();
    present.dedup();
    let dense: Vec<usize> = train_set
        .iter()
        .map(|s| present.binary_search(&s.class_id).expect("present"))
        .collect();

    let mut optimizer = Adam::new(config.adam, model.params());
    let mut stopper = EarlyStopping::new(config.patience, config.epsilon);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut curves = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(epoch, config.initial_lr, config.max_epochs);
        let epoch_seed = config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64);
        let batches = balanced_batches(&dense, config.batch_size, epoch_seed)?;
        let mut total = 0.0;
        for batch in &batches {
            let samples: Vec<&Sample> = batch.iter().map(|&i| train_set[i]).collect();
            total += train_step(&mut model, &mut optimizer, &samples, mode, lr, config.dice_smooth)
                .map_err(|e| match e {
                    Error::NonFiniteGradient(_) => Error::Diverged { epoch },
                    other => other,
                })?;
        }
        let train_loss = total / batches.len() as f64;
        let valid_loss = evaluate_loss(&model, valid_set, mode, config)?;
        if !train_loss.is_finite() || !valid_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        curves.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            lr,
        });
        let decision = stopper.observe(valid_loss);
        if stopper.improved_last() {
            best = model.clone();
            best_epoch = epoch;
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        curves,
        best_epoch,
        best_valid_loss: stopper.best(),
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn dice_loss_examples() {
        let ones = Tensor::ones(&[1, 1, 4, 4]);
        assert_eq!(dice_loss(&ones, &ones, 1.0).unwrap(), 0.0);
        let p = Tensor::ones(&[1, 1, 2, 2]);
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        assert!((dice_loss(&p, &t, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!(dice_loss(&p, &ones, 1.0).is_err());
    }

    #[test]
    fn dice_loss_gradient_matches_finite_differences() {
        let pred: Vec<f64> = (0..32).map(|i| 0.05 + 0.9 * ((i * 7) % 13) as f64 / 13.0).collect();
        let target = Tensor::new(
            vec![2, 1, 4, 4],
            (0..32).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect(),
        )
        .unwrap();
        let check = grad_check(
            |g, v| g.dice_loss(v[0], &target, 1.0),
            &[Tensor::new(vec![2, 1, 4, 4], pred).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error() < 1e-6, "{check:?}");
    }
}
