use crate::error::{Error, Result};
use crate::model::Parameter;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Rejects non-finite
    /// gradients before touching any parameter.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.value.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.value.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(x: f64) -> Vec<Parameter> {
        vec![Parameter {
            name: "x".into(),
            value: Tensor::scalar(x),
            init_bound: None,
        }]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.5, 250.0, -7.0] {
            let mut p = scalar_param(1.0);
            let mut adam = Adam::new(AdamConfig::default(), &p);
            adam.step(&mut p, &[vec![g]], 0.01).unwrap();
            let moved = 1.0 - p[0].value.data()[0];
            assert!((moved.abs() - 0.01).abs() < 1e-6, "g={g} moved {moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(3.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        }
        assert_eq!(p[0].value.data()[0], 3.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let target = 2.5;
        let mut p = scalar_param(-1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3000 {
            let x = p[0].value.data()[0];
            adam.step(&mut p, &[vec![2.0 * (x - target)]], 0.01).unwrap();
        }
        assert!((p[0].value.data()[0] - target).abs() < 1e-3, "{}", p[0].value.data()[0]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[vec![f64::NAN]], 0.1).unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(p[0].value.data()[0], 0.0);
    }
}
