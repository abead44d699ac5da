//! Repeated split/train/evaluate protocols.
//!
//! Every repetition derives its own seed from the base seed, so repetitions
//! are independent and may run on separate threads; results are gathered and
//! ordered by repetition before the report is assembled.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{allocate, split_per_subject, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{label_swap_matrix, sample_dice, summarize, Comparison, CurveSeries, ExperimentReport, ScoreRow, SwapRecord};
use crate::model::{FilmUNet, ModelConfig};
use crate::train::{train_on, MetadataMode, TrainConfig, TrainOutcome};

/// Train/valid/test fractions of every random split.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];
/// Label used for the row aggregating every test subject.
pub const ALL_CLASSES: &str = "all";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    /// Conditioned vs constant-vector control on the ambiguous corpus.
    Exp1,
    /// One label per subject: FiLMed multi-class, plain multi-class, single-class.
    Exp2Missing,
    /// Minority-class subset size sweep, FiLMed joint vs single-class.
    Exp2Sweep,
    /// Conditioned models probed with every input label.
    LabelSwap,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Exp1 => "exp1",
            ExperimentKind::Exp2Missing => "exp2-missing",
            ExperimentKind::Exp2Sweep => "exp2-sweep",
            ExperimentKind::LabelSwap => "label-swap",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(ExperimentKind::Exp1),
            "exp2-missing" => Ok(ExperimentKind::Exp2Missing),
            "exp2-sweep" => Ok(ExperimentKind::Exp2Sweep),
            "label-swap" => Ok(ExperimentKind::LabelSwap),
            other => Err(Error::InvalidArgument(format!(
                "unknown experiment '{other}' (expected exp1, exp2-missing, exp2-sweep or label-swap)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Minority-class training subset sizes (train + valid subjects).
    pub sizes: Vec<usize>,
    /// Majority-class subjects added to the FiLMed joint model.
    pub majority: usize,
    /// Held-out minority subjects used for testing.
    pub n_test: usize,
    /// `(minority, majority)` class pairs; one sweep per pair.
    pub directions: Vec<(usize, usize)>,
    /// Fraction of each training subset used for validation.
    pub valid_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![2, 4, 6, 8, 12],
            majority: 12,
            n_test: 10,
            directions: vec![(0, 1)],
            valid_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// `n_metadata_classes` and `film_enabled` are set per arm.
    pub model: ModelConfig,
    /// `seed` is replaced by the per-repetition seed.
    pub train: TrainConfig,
    pub repetitions: usize,
    pub seed: u64,
    /// Threads running repetitions concurrently; results do not depend on it.
    pub workers: usize,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            repetitions: 10,
            seed: 0,
            workers: 1,
            sweep: SweepConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        self.train.validate()?;
        if self.kind == ExperimentKind::Exp2Sweep {
            let s = &self.sweep;
            if s.sizes.is_empty() || s.sizes.contains(&0) {
                return Err(Error::InvalidArgument("sweep sizes must be positive".into()));
            }
            if s.directions.is_empty() {
                return Err(Error::InvalidArgument("sweep needs at least one direction".into()));
            }
            if s.majority < 2 || s.n_test == 0 {
                return Err(Error::InvalidArgument(
                    "sweep needs at least 2 majority and 1 test subject".into(),
                ));
            }
            if !(s.valid_fraction > 0.0 && s.valid_fraction < 1.0) {
                return Err(Error::InvalidArgument("valid_fraction must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Seed of repetition `rep` (also used for arm-independent model init).
pub fn repetition_seed(base: u64, rep: usize) -> u64 {
    let mut z = base ^ (rep as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything one repetition contributes to the report.
#[derive(Debug, Default)]
struct RepOutput {
    scores: Vec<ScoreRow>,
    swap: Vec<SwapRecord>,
    curves: Vec<CurveSeries>,
}

impl RepOutput {
    fn score(&mut self, arm: &str, class: &str, rep: usize, dice: f64) {
        self.scores.push(ScoreRow {
            arm: arm.to_string(),
            class: class.to_string(),
            repetition: rep,
            dice,
        });
    }

    fn curve(&mut self, arm: &str, rep: usize, outcome: &TrainOutcome) {
        self.curves.push(CurveSeries {
            arm: arm.to_string(),
            repetition: rep,
            records: outcome.curves.clone(),
        });
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs `config.repetitions` independent cycles on `dataset`.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let reps: Vec<usize> = (0..config.repetitions).collect();
    let run = |rep: usize| -> Result<RepOutput> {
        let seed = repetition_seed(config.seed, rep);
        match config.kind {
            ExperimentKind::Exp1 => exp1_rep(dataset, config, rep, seed, true),
            ExperimentKind::LabelSwap => exp1_rep(dataset, config, rep, seed, false),
            ExperimentKind::Exp2Missing => missing_rep(dataset, config, rep, seed),
            ExperimentKind::Exp2Sweep => sweep_rep(dataset, config, rep, seed),
        }
        .map_err(|e| Error::InvalidArgument(format!("repetition {rep} (seed {seed}) failed: {e}")))
    };
    let outputs: Vec<Result<RepOutput>> = if config.workers <= 1 {
        reps.iter().map(|&r| run(r)).collect()
    } else {
        let mut slots: Vec<Option<Result<RepOutput>>> = (0..reps.len()).map(|_| None).collect();
        let chunk = reps.len().div_ceil(config.workers);
        std::thread::scope(|scope| {
            for (part, slot) in reps.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                let run = &run;
                scope.spawn(move || {
                    for (&rep, out) in part.iter().zip(slot.iter_mut()) {
                        *out = Some(run(rep));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };

    let mut report = ExperimentReport {
        experiment: config.kind.name().to_string(),
        ..Default::default()
    };
    for out in outputs {
        let out = out?;
        report.scores.extend(out.scores);
        report.swap.extend(out.swap);
        report.curves.extend(out.curves);
    }
    report.summary = summarize(&report.scores, &comparisons(dataset, config));
    Ok(report)
}

fn comparisons(dataset: &Dataset, config: &ExperimentConfig) -> Vec<Comparison> {
    let cmp = |t: &str, r: &str| Comparison {
        treatment: t.to_string(),
        reference: r.to_string(),
    };
    match config.kind {
        ExperimentKind::Exp1 => vec![cmp("prior", "no_prior")],
        ExperimentKind::LabelSwap => Vec::new(),
        ExperimentKind::Exp2Missing => vec![
            cmp("film_multi", "plain_multi"),
            cmp("film_multi", "single_class"),
            cmp("single_class", "film_multi"),
        ],
        ExperimentKind::Exp2Sweep => {
            let _ = dataset;
            config
                .sweep
                .sizes
                .iter()
                .map(|s| cmp(&format!("film_joint_n{s}"), &format!("single_class_n{s}")))
                .collect()
        }
    }
}

fn arm_model(config: &ExperimentConfig, n_classes: usize, film: bool, seed: u64) -> Result<FilmUNet> {
    let mut mc = config.model.clone();
    mc.n_metadata_classes = n_classes;
    mc.film_enabled = film;
    FilmUNet::init(mc, seed)
}

fn train_config(config: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..config.train.clone()
    }
}

/// Scores `samples` per class plus the pooled row.
fn score_by_class(
    out: &mut RepOutput,
    dataset: &Dataset,
    arm: &str,
    rep: usize,
    samples: &[&Sample],
    dice: &[f64],
) {
    for (c, name) in dataset.class_names.iter().enumerate() {
        let vals: Vec<f64> = samples
            .iter()
            .zip(dice)
            .filter(|(s, _)| s.class_id == c)
            .map(|(_, d)| *d)
            .collect();
        if !vals.is_empty() {
            out.score(arm, name, rep, mean(&vals));
        }
    }
    out.score(arm, ALL_CLASSES, rep, mean(dice));
}

fn swap_records(out: &mut RepOutput, dataset: &Dataset, rep: usize, model: &FilmUNet, test: &[&Sample]) -> Result<()> {
    let matrix = label_swap_matrix(model, test, dataset.n_classes())?;
    for (t, row) in matrix.iter().enumerate() {
        if let Some(row) = row {
            for (c, &d) in row.iter().enumerate() {
                out.swap.push(SwapRecord {
                    repetition: rep,
                    true_label: dataset.class_names[t].clone(),
                    input_label: dataset.class_names[c].clone(),
                    dice: d,
                });
            }
        }
    }
    Ok(())
}

fn exp1_rep(dataset: &Dataset, config: &ExperimentConfig, rep: usize, seed: u64, with_control: bool) -> Result<RepOutput> {
    let split = split_per_subject(dataset, SPLIT_FRACTIONS, seed)?;
    let train = dataset.select(&split.train)?;
    let valid = dataset.select(&split.valid)?;
    let test = dataset.select(&split.test)?;
    let n = dataset.n_classes();
    let tc = train_config(config, seed);
    let mut out = RepOutput::default();

    let prior = train_on(arm_model(config, n, true, seed)?, &train, &valid, &tc, MetadataMode::TrueClass)?;
    let dice = sample_dice(&prior.model, &test, |s| s.class_id)?;
    score_by_class(&mut out, dataset, "prior", rep, &test, &dice);
    out.curve("prior", rep, &prior);
    swap_records(&mut out, dataset, rep, &prior.model, &test)?;

    if with_control {
        let mode = MetadataMode::Constant(0);
        let control = train_on(arm_model(config, n, true, seed)?, &train, &valid, &tc, mode)?;
        let dice = sample_dice(&control.model, &test, |s| mode.class_for(s))?;
        score_by_class(&mut out, dataset, "no_prior", rep, &test, &dice);
        out.curve("no_prior", rep, &control);
    }
    Ok(out)
}

fn missing_rep(dataset: &Dataset, config: &ExperimentConfig, rep: usize, seed: u64) -> Result<RepOutput> {
    let split = split_per_subject(dataset, SPLIT_FRACTIONS, seed)?;
    let train = dataset.select(&split.train)?;
    let valid = dataset.select(&split.valid)?;
    let test = dataset.select(&split.test)?;
    let n = dataset.n_classes();
    let tc = train_config(config, seed);
    let mut out = RepOutput::default();

    let film = train_on(arm_model(config, n, true, seed)?, &train, &valid, &tc, MetadataMode::TrueClass)?;
    let dice = sample_dice(&film.model, &test, |s| s.class_id)?;
    score_by_class(&mut out, dataset, "film_multi", rep, &test, &dice);
    out.curve("film_multi", rep, &film);

    let plain = train_on(arm_model(config, n, false, seed)?, &train, &valid, &tc, MetadataMode::TrueClass)?;
    let dice = sample_dice(&plain.model, &test, |s| s.class_id)?;
    score_by_class(&mut out, dataset, "plain_multi", rep, &test, &dice);
    out.curve("plain_multi", rep, &plain);

    // one plain network per class, each seeing only its own subjects
    let mut single = vec![0.0; test.len()];
    for c in 0..n {
        fn pick<'a>(set: &[&'a Sample], c: usize) -> Vec<&'a Sample> {
            set.iter().copied().filter(|s| s.class_id == c).collect()
        }
        let (tr, va, te) = (pick(&train, c), pick(&valid, c), pick(&test, c));
        if tr.is_empty() || va.is_empty() || te.is_empty() {
            continue;
        }
        let outcome = train_on(arm_model(config, n, false, seed)?, &tr, &va, &tc, MetadataMode::TrueClass)?;
        let d = sample_dice(&outcome.model, &te, |s| s.class_id)?;
        let mut it = d.into_iter();
        for (slot, s) in single.iter_mut().zip(&test) {
            if s.class_id == c {
                *slot = it.next().expect("one score per member");
            }
        }
        out.curve(&format!("single_class_{}", dataset.class_names[c]), rep, &outcome);
    }
    score_by_class(&mut out, dataset, "single_class", rep, &test, &single);
    Ok(out)
}

fn class_ids(dataset: &Dataset, class_id: usize) -> Result<Vec<String>> {
    let mut ids: Vec<String> = dataset
        .samples
        .iter()
        .filter(|s| s.class_id == class_id)
        .map(|s| s.subject_id.clone())
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyClass(class_id));
    }
    ids.sort();
    Ok(ids)
}

/// First `size` ids of `pool` divided into (train, valid).
fn subset_split(pool: &[String], size: usize, valid_fraction: f64) -> (Vec<String>, Vec<String>) {
    let [t, v, _] = allocate(size, [1.0 - valid_fraction, valid_fraction, 0.0]);
    (pool[..t].to_vec(), pool[t..t + v].to_vec())
}

fn sweep_rep(dataset: &Dataset, config: &ExperimentConfig, rep: usize, seed: u64) -> Result<RepOutput> {
    let sw = &config.sweep;
    let n = dataset.n_classes();
    let max_size = *sw.sizes.iter().max().expect("validated");
    let tc = train_config(config, seed);
    let mut out = RepOutput::default();
    for &(minority, majority) in &sw.directions {
        if minority >= n || majority >= n || minority == majority {
            return Err(Error::InvalidArgument(format!(
                "invalid sweep direction ({minority}, {majority}) for {n} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((minority as u64) << 8 | majority as u64));
        let mut minor = class_ids(dataset, minority)?;
        let mut major = class_ids(dataset, majority)?;
        if minor.len() < max_size + sw.n_test || major.len() < sw.majority {
            return Err(Error::InvalidArgument(format!(
                "sweep needs {} '{}' and {} '{}' subjects, found {} and {}",
                max_size + sw.n_test,
                dataset.class_names[minority],
                sw.majority,
                dataset.class_names[majority],
                minor.len(),
                major.len()
            )));
        }
        minor.shuffle(&mut rng);
        major.shuffle(&mut rng);
        // held-out test subjects come first; training subsets are nested prefixes of the rest
        let test = dataset.select(&minor[..sw.n_test])?;
        let pool = &minor[sw.n_test..];
        let (major_train, major_valid) = subset_split(&major, sw.majority, sw.valid_fraction);
        let minority_name = &dataset.class_names[minority];
        for &size in &sw.sizes {
            let (tr_ids, va_ids) = subset_split(pool, size, sw.valid_fraction);
            let tr = dataset.select(&tr_ids)?;
            let va = dataset.select(&va_ids)?;

            let mut joint_tr = tr.clone();
            joint_tr.extend(dataset.select(&major_train)?);
            let mut joint_va = va.clone();
            joint_va.extend(dataset.select(&major_valid)?);
            let arm = format!("film_joint_n{size}");
            let joint = train_on(
                arm_model(config, n, true, seed)?,
                &joint_tr,
                &joint_va,
                &tc,
                MetadataMode::TrueClass,
            )?;
            let dice = sample_dice(&joint.model, &test, |s| s.class_id)?;
            out.score(&arm, minority_name, rep, mean(&dice));
            out.curve(&format!("{arm}_{minority_name}"), rep, &joint);

            let arm = format!("single_class_n{size}");
            let single = train_on(arm_model(config, n, false, seed)?, &tr, &va, &tc, MetadataMode::TrueClass)?;
            let dice = sample_dice(&single.model, &test, |s| s.class_id)?;
            out.score(&arm, minority_name, rep, mean(&dice));
            out.curve(&format!("{arm}_{minority_name}"), rep, &single);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_ambiguous_dataset, gen_multiorgan_dataset};

    fn quick(kind: ExperimentKind, reps: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind);
        c.model.depth = 1;
        c.model.base_filters = 2;
        c.model.generator_hidden = (8, 4);
        c.train.max_epochs = 2;
        c.repetitions = reps;
        c
    }

    #[test]
    fn exp1_rows_per_arm_and_class() {
        let ds = gen_ambiguous_dataset(5, (16, 16), 1).unwrap();
        let report = run_experiment(&ds, &quick(ExperimentKind::Exp1, 2)).unwrap();
        for arm in ["prior", "no_prior"] {
            for class in ["large", "union", "small", ALL_CLASSES] {
                assert_eq!(report.scores_for(arm, class).len(), 2, "{arm}/{class}");
            }
        }
        let no_prior = report.summary_for("no_prior", ALL_CLASSES).unwrap();
        assert_eq!(no_prior.compared_to.as_deref(), Some("prior"));
        assert_eq!(report.swap.len(), 2 * 9);
    }

    #[test]
    fn sweep_run_count() {
        let ds = gen_multiorgan_dataset(&[(0, 14), (1, 12)], (16, 16), 2).unwrap();
        let mut c = quick(ExperimentKind::Exp2Sweep, 2);
        c.sweep.sizes = vec![2, 12];
        c.sweep.n_test = 2;
        let report = run_experiment(&ds, &c).unwrap();
        // 2 sizes x 2 arms x 2 repetitions
        assert_eq!(report.curves.len(), 8);
        assert_eq!(report.scores.len(), 8);
    }

    #[test]
    fn workers_do_not_change_results() {
        let ds = gen_multiorgan_dataset(&[(0, 5), (1, 5), (2, 5)], (16, 16), 3).unwrap();
        let mut c = quick(ExperimentKind::Exp2Missing, 3);
        let a = run_experiment(&ds, &c).unwrap();
        c.workers = 2;
        let b = run_experiment(&ds, &c).unwrap();
        assert_eq!(a, b);
        assert!(a.summary_for("single_class", ALL_CLASSES).is_some());
    }

    #[test]
    fn undersized_sweep_is_rejected() {
        let ds = gen_multiorgan_dataset(&[(0, 4), (1, 12)], (16, 16), 2).unwrap();
        let c = quick(ExperimentKind::Exp2Sweep, 1);
        assert!(run_experiment(&ds, &c).is_err());
    }

    #[test]
    fn kind_round_trip() {
        for k in [
            ExperimentKind::Exp1,
            ExperimentKind::Exp2Missing,
            ExperimentKind::Exp2Sweep,
            ExperimentKind::LabelSwap,
        ] {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("exp3".parse::<ExperimentKind>().is_err());
    }
}
