use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` per input.
    pub per_input: Vec<f64>,
    /// Number of coordinates compared.
    pub coordinates: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    let value = graph.value(out);
    if value.numel() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Checks the gradient of scalar `f` with respect to every coordinate of
/// every tensor in `inputs`, using central differences with step `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            graph
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(graph);

    let mut probe = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coordinates = 0;
    for (i, grads) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
            coordinates += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheck {
        per_input,
        coordinates,
    })
}
