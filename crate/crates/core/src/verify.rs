//! Gradient-check suite: every differentiable operator on small random
//! inputs, then the whole FiLMed U-Net under the Dice loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{FilmUNet, ModelConfig, Modulation};
use crate::tensor::{grad_check, Graph, Tensor, Var};

/// Tolerance for single operators.
pub const OPERATOR_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// One line of the suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("positive dims")
}

/// Weighted sum against a fixed random tensor, so every output coordinate
/// gets its own upstream gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let weights = g.constant(random(&mut ChaCha8Rng::seed_from_u64(seed), &shape));
    let prod = g.mul(y, weights)?;
    Ok(g.sum(prod))
}

fn line<F>(name: &str, f: F, inputs: &[Tensor], tolerance: f64) -> Result<CheckLine>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let check = grad_check(f, inputs, STEP)?;
    Ok(CheckLine {
        name: name.to_string(),
        max_rel_error: check.max_rel_error(),
        tolerance,
        coordinates: check.coordinates,
    })
}

/// Runs every check; deterministic in `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = OPERATOR_TOLERANCE;
    let mut out = Vec::new();
    out.push(line(
        "conv2d",
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            probe(g, y, 1)
        },
        &[random(&mut rng, &[2, 2, 5, 5]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3])],
        tol,
    )?);
    out.push(line(
        "conv2d_stride2",
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 2)?;
            probe(g, y, 2)
        },
        &[random(&mut rng, &[1, 2, 6, 5]), random(&mut rng, &[2, 2, 3, 3]), random(&mut rng, &[2])],
        tol,
    )?);
    out.push(line(
        "conv_transpose2d",
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
            probe(g, y, 3)
        },
        &[random(&mut rng, &[2, 3, 3, 3]), random(&mut rng, &[3, 2, 2, 2]), random(&mut rng, &[2])],
        tol,
    )?);
    // distinct values keep the pooling argmax away from ties
    let pool_input = Tensor::new(
        vec![1, 2, 4, 4],
        (0..32).map(|i| ((i * 13) % 32) as f64 * 0.1).collect(),
    )?;
    out.push(line(
        "maxpool2d",
        |g, v| {
            let y = g.maxpool2d(v[0], 2)?;
            probe(g, y, 4)
        },
        &[pool_input],
        tol,
    )?);
    // away from the kink at 0
    let relu_input = Tensor::new(vec![6], vec![-0.9, -0.4, -0.1, 0.2, 0.5, 1.3])?;
    out.push(line(
        "relu",
        |g, v| {
            let y = g.relu(v[0]);
            probe(g, y, 5)
        },
        &[relu_input],
        tol,
    )?);
    out.push(line(
        "sigmoid",
        |g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y, 6)
        },
        &[random(&mut rng, &[2, 5])],
        tol,
    )?);
    out.push(line(
        "linear",
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            probe(g, y, 7)
        },
        &[random(&mut rng, &[3, 4]), random(&mut rng, &[2, 4]), random(&mut rng, &[2])],
        tol,
    )?);
    out.push(line(
        "film_affine",
        |g, v| {
            let y = g.per_channel_affine(v[0], v[1], v[2])?;
            probe(g, y, 8)
        },
        &[random(&mut rng, &[2, 3, 2, 2]), random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])],
        tol,
    )?);
    out.push(line(
        "concat_channels",
        |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            probe(g, y, 9)
        },
        &[random(&mut rng, &[2, 1, 2, 2]), random(&mut rng, &[2, 2, 2, 2])],
        tol,
    )?);
    out.push(line(
        "slice_columns",
        |g, v| {
            let y = g.slice_columns(v[0], 1, 2)?;
            probe(g, y, 10)
        },
        &[random(&mut rng, &[2, 4])],
        tol,
    )?);
    out.push(line(
        "add_mul_sum",
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let p = g.mul(s, v[0])?;
            Ok(g.sum(p))
        },
        &[random(&mut rng, &[3, 2]), random(&mut rng, &[3, 2])],
        tol,
    )?);
    let pred = Tensor::new(
        vec![2, 1, 4, 4],
        (0..32).map(|_| rng.random_range(0.05..0.95)).collect(),
    )?;
    let target = Tensor::new(
        vec![2, 1, 4, 4],
        (0..32).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect(),
    )?;
    out.push(line("dice_loss", |g, v| g.dice_loss(v[0], &target, 1.0), &[pred], tol)?);
    out.push(model_line(&mut rng, seed)?);
    Ok(out)
}

/// Depth-1 FiLMed U-Net with base 2 on 8x8 inputs; gradients of the Dice
/// loss with respect to every parameter.
fn model_line(rng: &mut ChaCha8Rng, seed: u64) -> Result<CheckLine> {
    let config = ModelConfig {
        depth: 1,
        base_filters: 2,
        n_metadata_classes: 3,
        film_enabled: true,
        ..ModelConfig::default()
    };
    let model = FilmUNet::init(config, seed)?;
    let image = Tensor::new(
        vec![2, 1, 8, 8],
        (0..128).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let metadata = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0])?;
    let target = Tensor::new(
        vec![2, 1, 8, 8],
        (0..128).map(|i| f64::from(u8::from((i % 8) >= 3 && (i / 8) % 8 >= 2))).collect(),
    )?;
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    line(
        "film_unet_depth1",
        |g, v| {
            let x = g.constant(image.clone());
            let m = g.constant(metadata.clone());
            let fwd = model.build_with_params(g, v, x, m, Modulation::Generated)?;
            g.dice_loss(fwd.output, &target, 1.0)
        },
        &inputs,
        MODEL_TOLERANCE,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let lines = gradcheck_suite(0).unwrap();
        assert!(lines.len() >= 13);
        for l in &lines {
            assert!(l.passed(), "{l:?}");
            assert!(l.coordinates > 0);
        }
        assert_eq!(lines.last().unwrap().name, "film_unet_depth1");
    }
}
