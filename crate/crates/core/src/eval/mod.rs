//! Dice scoring, significance testing, label-swap analysis and reports.

mod report;
mod stats;
mod svg;

pub use report::{
    emit_report, read_results, read_summary, summarize, Comparison, CurveSeries, ExperimentReport,
    ScoreRow, SummaryRow, SwapRecord,
};
pub use stats::{aggregate, average_ranks, wilcoxon_one_sided, Aggregate, PMethod, WilcoxonResult, EXACT_LIMIT};
pub use svg::{bars_svg, curves_svg};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::FilmUNet;
use crate::tensor::Tensor;
use crate::train::predict;

/// Probability threshold separating foreground from background.
pub const THRESHOLD: f64 = 0.5;

/// Foreground where `p >= 0.5`.
pub fn binarize(probs: &Tensor) -> Tensor {
    let data = probs
        .data()
        .iter()
        .map(|&p| if p >= THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(probs.shape().to_vec(), data).expect("same shape")
}

/// `2|P ∩ G| / (|P| + |G|)` for binary masks; 1 when both are empty.
pub fn dice_score(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_score",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let binary = |v: &f64| *v == 0.0 || *v == 1.0;
    if !pred.data().iter().all(binary) || !truth.data().iter().all(binary) {
        return Err(Error::InvalidArgument(
            "dice_score expects binary masks (threshold predictions first)".into(),
        ));
    }
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(truth.data()) {
        inter += p * g;
        total += p + g;
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

/// Dice of each sample's thresholded prediction, conditioned on `class_of`.
pub fn sample_dice<F>(model: &FilmUNet, samples: &[&Sample], class_of: F) -> Result<Vec<f64>>
where
    F: Fn(&Sample) -> usize,
{
    let preds = predict(model, samples, 8, class_of)?;
    preds
        .iter()
        .zip(samples)
        .map(|(p, s)| dice_score(&binarize(p), &s.mask))
        .collect()
}

/// Rows: true class; columns: class fed to the generator. Entry `(t, c)` is
/// the mean Dice over true-class-`t` samples predicted with input label `c`.
/// Rows of classes absent from `samples` are `None`.
pub fn label_swap_matrix(
    model: &FilmUNet,
    samples: &[&Sample],
    n_classes: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    if n_classes > model.config().n_metadata_classes {
        return Err(Error::InvalidArgument(format!(
            "model conditions on {} classes, asked for {n_classes}",
            model.config().n_metadata_classes
        )));
    }
    let mut rows = Vec::with_capacity(n_classes);
    for truth in 0..n_classes {
        let members: Vec<&Sample> = samples.iter().copied().filter(|s| s.class_id == truth).collect();
        if members.is_empty() {
            rows.push(None);
            continue;
        }
        let mut row = Vec::with_capacity(n_classes);
        for input in 0..n_classes {
            let scores = sample_dice(model, &members, |_| input)?;
            row.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
        rows.push(Some(row));
    }
    Ok(rows)
}

/// True when every present row peaks strictly on its diagonal.
pub fn diagonal_dominant(matrix: &[Option<Vec<f64>>]) -> bool {
    matrix.iter().enumerate().all(|(t, row)| match row {
        None => true,
        Some(r) => r.iter().enumerate().all(|(c, &v)| c == t || r[t] > v),
    })
}
