use std::f64::consts::PI;

/// Single cosine arc from `initial_lr` at epoch 0 down to 0 at `max_epochs`.
pub fn cosine_lr(epoch: usize, initial_lr: f64, max_epochs: usize) -> f64 {
    let t = epoch.min(max_epochs) as f64 / max_epochs.max(1) as f64;
    0.5 * initial_lr * (1.0 + (PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Validation-plateau detector. A loss counts as an improvement only when
/// it is strictly below `best - epsilon`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    epsilon: f64,
    best: f64,
    since_improve: usize,
    improved_last: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, epsilon: f64) -> Self {
        Self {
            patience,
            epsilon,
            best: f64::INFINITY,
            since_improve: 0,
            improved_last: false,
        }
    }

    pub fn observe(&mut self, valid_loss: f64) -> StopDecision {
        self.improved_last = valid_loss < self.best - self.epsilon;
        if self.improved_last {
            self.best = valid_loss;
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        if self.since_improve >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_since_improve(&self) -> usize {
        self.since_improve
    }

    pub fn improved_last(&self) -> bool {
        self.improved_last
    }
}
