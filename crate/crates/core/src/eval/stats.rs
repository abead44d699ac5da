//! Paired nonparametric testing and summary statistics.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which the null distribution is computed exactly.
pub const EXACT_LIMIT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PMethod {
    Exact,
    NormalApprox,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// One-sided p-value for the alternative `median(x - y) > 0`.
    pub p_value: f64,
    /// Sum of ranks of the negative differences.
    pub w_minus: f64,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Pairs left after dropping zero differences.
    pub n_used: usize,
    pub method: PMethod,
}

impl WilcoxonResult {
    /// Set when all differences were zero and `p_value` was defined as 1.
    pub fn degenerate(&self) -> bool {
        self.method == PMethod::Degenerate
    }
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Nonzero paired differences and their absolute-value ranks.
fn signed_ranks(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::Statistics(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Statistics("paired samples must be finite".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    Ok((diffs, ranks))
}

/// Number of sign assignments whose negative-rank sum is at most `w`, with
/// ranks doubled so tied (half-integer) ranks stay integral.
fn count_at_most(doubled_ranks: &[usize], w_doubled: usize) -> f64 {
    let total: usize = doubled_ranks.iter().sum();
    let mut ways = vec![0.0f64; total + 1];
    ways[0] = 1.0;
    let mut reach = 0;
    for &r in doubled_ranks {
        reach += r;
        for s in (r..=reach).rev() {
            ways[s] += ways[s - r];
        }
    }
    ways[..=w_doubled.min(total)].iter().sum()
}

/// One-sided Wilcoxon signed-rank test of `median(x - y) > 0`.
///
/// Zero differences are dropped and tied magnitudes get average ranks. With
/// at most [`EXACT_LIMIT`] remaining pairs the p-value is the exact share of
/// the `2^n` equally likely sign assignments with `W- <= observed`; above
/// that a normal approximation with tie and continuity corrections is used.
pub fn wilcoxon_one_sided(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let (diffs, ranks) = signed_ranks(x, y)?;
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            w_minus: 0.0,
            w_plus: 0.0,
            n_used: 0,
            method: PMethod::Degenerate,
        });
    }
    if n < 5 {
        return Err(Error::Statistics(format!(
            "signed-rank test needs at least 5 nonzero differences, got {n}"
        )));
    }
    let w_minus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_LIMIT {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let count = count_at_most(&doubled, (2.0 * w_minus).round() as usize);
        return Ok(WilcoxonResult {
            p_value: count / 2f64.powi(n as i32),
            w_minus,
            w_plus,
            n_used: n,
            method: PMethod::Exact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_minus - mean + 0.5) / var.sqrt();
    let p_value = Normal::standard().cdf(z).clamp(0.0, 1.0);
    Ok(WilcoxonResult {
        p_value,
        w_minus,
        w_plus,
        n_used: n,
        method: PMethod::NormalApprox,
    })
}

/// Mean and sample standard deviation (`n - 1` denominator).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// `None` when fewer than two values.
    pub std: Option<f64>,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            n,
            mean: f64::NAN,
            std: None,
        };
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    Aggregate {
        n,
        mean,
        std: (n >= 2).then(|| (m2 / (n - 1) as f64).sqrt()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_ten_pairs() {
        let x: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        let y = vec![0.0; 10];
        let r = wilcoxon_one_sided(&x, &y).unwrap();
        assert_eq!(r.method, PMethod::Exact);
        assert_eq!(r.p_value, 1.0 / 1024.0);
        assert_eq!(r.w_plus, 55.0);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let x = [0.3, 0.5, 0.9, 0.1, 0.7];
        let r = wilcoxon_one_sided(&x, &x).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.degenerate());
    }

    #[test]
    fn errors() {
        assert!(wilcoxon_one_sided(&[1.0, 2.0], &[0.0]).is_err());
        assert!(wilcoxon_one_sided(&[1.0, 2.0, 3.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[0.5, 0.5, 0.5]);
        assert_eq!((a.mean, a.std), (0.5, Some(0.0)));
        let b = aggregate(&[0.0, 1.0]);
        assert_eq!(b.mean, 0.5);
        assert!((b.std.unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(aggregate(&[0.4]).std, None);
    }

    #[test]
    fn normal_path_is_close_to_exact_at_boundary() {
        // n = 21 uses the approximation; compare to the exact DP directly
        let x: Vec<f64> = (0..21).map(|i| ((i * 37) % 23) as f64 / 23.0 - 0.35).collect();
        let y = vec![0.0; 21];
        let approx = wilcoxon_one_sided(&x, &y).unwrap();
        assert_eq!(approx.method, PMethod::NormalApprox);
        let (_, ranks) = signed_ranks(&x, &y).unwrap();
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let exact = count_at_most(&doubled, (2.0 * approx.w_minus).round() as usize) / 2f64.powi(21);
        assert!((approx.p_value - exact).abs() < 0.01, "{} vs {}", approx.p_value, exact);
    }
}
