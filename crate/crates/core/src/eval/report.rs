//! Experiment reports and their CSV/SVG files.
//!
//! * `results.csv`: `arm,class,repetition,dice`
//! * `summary.csv`: `arm,class,n,mean,std,compared_to,p_value`
//! * `swap_matrix.csv`: `repetition,true_label,input_label,dice`
//! * `curves.csv`: `arm,repetition,epoch,train_loss,valid_loss,lr`
//! * `bars.svg`, `curves.svg`

use std::fs;
use std::path::Path;

use super::stats::{aggregate, wilcoxon_one_sided};
use super::svg::{bars_svg, curves_svg};
use crate::error::{Error, Result};
use crate::train::EpochRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub arm: String,
    pub class: String,
    pub repetition: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub arm: String,
    pub class: String,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
    /// Arm tested against this one (alternative: that arm scores higher).
    pub compared_to: Option<String>,
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapRecord {
    pub repetition: usize,
    pub true_label: String,
    pub input_label: String,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSeries {
    pub arm: String,
    pub repetition: usize,
    pub records: Vec<EpochRecord>,
}

/// `treatment` is expected to beat `reference` on matching (class, repetition) pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Comparison {
    pub treatment: String,
    pub reference: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub scores: Vec<ScoreRow>,
    pub summary: Vec<SummaryRow>,
    pub swap: Vec<SwapRecord>,
    pub curves: Vec<CurveSeries>,
}

impl ExperimentReport {
    /// Dice per repetition for one (arm, class), ordered by repetition.
    pub fn scores_for(&self, arm: &str, class: &str) -> Vec<f64> {
        let mut rows: Vec<&ScoreRow> = self
            .scores
            .iter()
            .filter(|r| r.arm == arm && r.class == class)
            .collect();
        rows.sort_by_key(|r| r.repetition);
        rows.iter().map(|r| r.dice).collect()
    }

    pub fn summary_for(&self, arm: &str, class: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.arm == arm && r.class == class)
    }

    /// Per-repetition label-swap matrices (rows: true label, columns: input label).
    pub fn swap_matrices(&self, labels: &[String]) -> Vec<Vec<Vec<Option<f64>>>> {
        let reps = self.swap.iter().map(|r| r.repetition + 1).max().unwrap_or(0);
        let index = |l: &str| labels.iter().position(|x| x == l);
        let mut out = vec![vec![vec![None; labels.len()]; labels.len()]; reps];
        for r in &self.swap {
            if let (Some(t), Some(c)) = (index(&r.true_label), index(&r.input_label)) {
                out[r.repetition][t][c] = Some(r.dice);
            }
        }
        out
    }
}

/// One summary row per (arm, class) in order of first appearance. A row
/// whose arm is the `reference` of a comparison carries the one-sided
/// Wilcoxon p-value of `treatment > reference`, paired by repetition.
pub fn summarize(scores: &[ScoreRow], comparisons: &[Comparison]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in scores {
        let key = (r.arm.clone(), r.class.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let series = |arm: &str, class: &str| -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = scores
            .iter()
            .filter(|r| r.arm == arm && r.class == class)
            .map(|r| (r.repetition, r.dice))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    };
    keys.into_iter()
        .map(|(arm, class)| {
            let own = series(&arm, &class);
            let values: Vec<f64> = own.iter().map(|p| p.1).collect();
            let agg = aggregate(&values);
            let comparison = comparisons.iter().find(|c| c.reference == arm);
            let p_value = comparison.and_then(|c| {
                let other = series(&c.treatment, &class);
                let (mut t, mut r) = (Vec::new(), Vec::new());
                for (rep, v) in &own {
                    if let Some((_, tv)) = other.iter().find(|(orep, _)| orep == rep) {
                        t.push(*tv);
                        r.push(*v);
                    }
                }
                wilcoxon_one_sided(&t, &r).ok().map(|w| w.p_value)
            });
            SummaryRow {
                arm,
                class,
                n: agg.n,
                mean: agg.mean,
                std: agg.std,
                compared_to: comparison.map(|c| c.treatment.clone()),
                p_value,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: Vec<[String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(header).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(row).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every report file into `dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join("results.csv"),
        ["arm", "class", "repetition", "dice"],
        report
            .scores
            .iter()
            .map(|r| [r.arm.clone(), r.class.clone(), r.repetition.to_string(), r.dice.to_string()])
            .collect(),
    )?;
    write_csv(
        &dir.join("summary.csv"),
        ["arm", "class", "n", "mean", "std", "compared_to", "p_value"],
        report
            .summary
            .iter()
            .map(|r| {
                [
                    r.arm.clone(),
                    r.class.clone(),
                    r.n.to_string(),
                    r.mean.to_string(),
                    opt(r.std),
                    r.compared_to.clone().unwrap_or_default(),
                    opt(r.p_value),
                ]
            })
            .collect(),
    )?;
    if !report.swap.is_empty() {
        write_csv(
            &dir.join("swap_matrix.csv"),
            ["repetition", "true_label", "input_label", "dice"],
            report
                .swap
                .iter()
                .map(|r| {
                    [
                        r.repetition.to_string(),
                        r.true_label.clone(),
                        r.input_label.clone(),
                        r.dice.to_string(),
                    ]
                })
                .collect(),
        )?;
    }
    write_csv(
        &dir.join("curves.csv"),
        ["arm", "repetition", "epoch", "train_loss", "valid_loss", "lr"],
        report
            .curves
            .iter()
            .flat_map(|c| {
                c.records.iter().map(move |r| {
                    [
                        c.arm.clone(),
                        c.repetition.to_string(),
                        r.epoch.to_string(),
                        r.train_loss.to_string(),
                        r.valid_loss.to_string(),
                        r.lr.to_string(),
                    ]
                })
            })
            .collect(),
    )?;
    let bars = dir.join("bars.svg");
    fs::write(&bars, bars_svg(&report.experiment, &report.summary)).map_err(|e| Error::io(&bars, e))?;
    let curves = dir.join("curves.svg");
    fs::write(&curves, curves_svg(&report.experiment, &report.curves))
        .map_err(|e| Error::io(&curves, e))?;
    Ok(())
}

fn parse<T: std::str::FromStr>(path: &Path, row: usize, field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(path, format!("row {row}: bad `{field}` value `{value}`")))
}

fn parse_opt(path: &Path, row: usize, field: &str, value: &str) -> Result<Option<f64>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(path, row, field, value).map(Some)
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let row = i + 2;
        if rec.len() != 4 {
            return Err(Error::format(path, format!("row {row}: expected 4 fields")));
        }
        out.push(ScoreRow {
            arm: rec[0].to_string(),
            class: rec[1].to_string(),
            repetition: parse(path, row, "repetition", &rec[2])?,
            dice: parse(path, row, "dice", &rec[3])?,
        });
    }
    Ok(out)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let row = i + 2;
        if rec.len() != 7 {
            return Err(Error::format(path, format!("row {row}: expected 7 fields")));
        }
        out.push(SummaryRow {
            arm: rec[0].to_string(),
            class: rec[1].to_string(),
            n: parse(path, row, "n", &rec[2])?,
            mean: parse(path, row, "mean", &rec[3])?,
            std: parse_opt(path, row, "std", &rec[4])?,
            compared_to: (!rec[5].is_empty()).then(|| rec[5].to_string()),
            p_value: parse_opt(path, row, "p_value", &rec[6])?,
        });
    }
    Ok(out)
}
