//! `filmseg` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use filmseg::data::{
    gen_ambiguous_dataset, gen_multiorgan_dataset, read_dataset, split_per_subject, write_dataset,
    Dataset, Sample, SplitSpec, AMBIGUOUS_CLASSES, ORGAN_CLASSES,
};
use filmseg::eval::{bars_svg, diagonal_dominant, emit_report, label_swap_matrix, read_results, read_summary, sample_dice};
use filmseg::experiment::{run_experiment, ExperimentConfig, ExperimentKind, SPLIT_FRACTIONS};
use filmseg::model::{load_checkpoint, save_checkpoint, FilmUNet, ModelConfig};
use filmseg::train::{train, write_curves, MetadataMode, TrainConfig};
use filmseg::verify::gradcheck_suite;

const SEED_ENV: &str = "FILMSEG_SEED";
const FAULT_ENV: &str = "FILMSEG_FAULT";

#[derive(Parser, Debug)]
#[command(name = "filmseg", version, about = "FiLM-conditioned U-Net segmentation on synthetic data")]
#[command(args_override_self = true)]
struct Cli {
    /// key=value file; keys are long flag names, command-line flags win
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Train one model on a random split
    Train(TrainArgs),
    /// Score a checkpoint on a dataset
    Eval(EvalArgs),
    /// Run a repeated experiment and write its report
    Experiment(ExperimentArgs),
    /// Label-swap matrix of a checkpoint, or the full label-swap experiment
    LabelSwap(LabelSwapArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Rebuild the bar chart and print the summary of a report directory
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Ambiguous,
    Multiorgan,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "ambiguous")]
    kind: Kind,
    /// Subjects per class as name=count pairs, e.g. disk=12,square=2
    #[arg(long, default_value = "")]
    counts: String,
    /// Subjects per class when --counts is empty
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    /// Image size HxW
    #[arg(long, default_value = "32x32")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base_filters: usize,
    /// Disable FiLM (plain U-Net)
    #[arg(long)]
    no_film: bool,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 50)]
    patience: usize,
    #[arg(long, default_value_t = 0.001)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Base seed (overridden by FILMSEG_SEED)
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Feed the constant one-hot vector of class 0 instead of the true class
    #[arg(long)]
    no_prior: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// split.csv from `train`; only its test subjects are scored
    #[arg(long)]
    split: Option<PathBuf>,
    /// Per-subject CSV output (stdout summary only when absent)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_prior: bool,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long, default_value = "exp1")]
    kind: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    /// Repetitions trained concurrently
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Minority subset sizes of the sweep
    #[arg(long, default_value = "2,4,6,8,12")]
    sweep_sizes: String,
    /// Majority subjects in every sweep run
    #[arg(long, default_value_t = 12)]
    sweep_majority: usize,
    /// Held-out minority test subjects per sweep repetition
    #[arg(long, default_value_t = 10)]
    sweep_test: usize,
    /// Sweep directions as minority:majority class ids
    #[arg(long, default_value = "0:1")]
    sweep_directions: String,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct LabelSwapArgs {
    #[arg(long)]
    data: PathBuf,
    /// Probe this checkpoint instead of training
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// split.csv restricting the probe to test subjects
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding results.csv and summary.csv
    #[arg(long)]
    dir: PathBuf,
}

/// Failure with its exit code: 1 for run or verification failures, 2 for usage.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

impl From<filmseg::Error> for Failure {
    fn from(e: filmseg::Error) -> Self {
        let code = match e {
            filmseg::Error::InvalidArgument(_) | filmseg::Error::Format { .. } => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match with_config_file(argv) {
        Ok(a) => a,
        Err(f) => return report_failure(f),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if std::env::var(FAULT_ENV).as_deref() == Ok("conv2d_backward") {
        filmseg::tensor::kernels::set_conv_backward_fault(true);
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::LabelSwap(a) => label_swap_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_failure(f),
    }
}

fn report_failure(f: Failure) -> ExitCode {
    eprintln!("error: {}", f.message);
    ExitCode::from(f.code)
}

/// Splices `--key value` pairs from the `--config` file in front of the
/// subcommand's own arguments, so later command-line flags override them.
fn with_config_file(argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let (path, value_at) = match argv[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), None),
        None => (
            argv.get(pos + 1).cloned().ok_or_else(|| usage("--config needs a file"))?,
            Some(pos + 1),
        ),
    };
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{path}: {e}")))?;
    let mut injected = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{path}:{}: expected key=value", n + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        match value {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            _ => {
                injected.push(format!("--{key}"));
                injected.push(value.to_string());
            }
        }
    }
    // the subcommand is the first non-flag argument that is not the config path
    let mut rest: Vec<String> = Vec::with_capacity(argv.len() + injected.len());
    let mut inserted = false;
    for (i, a) in argv.into_iter().enumerate() {
        let is_subcommand = i > 0 && !inserted && !a.starts_with('-') && Some(i) != value_at;
        rest.push(a);
        if is_subcommand {
            rest.extend(injected.iter().cloned());
            inserted = true;
        }
    }
    Ok(rest)
}

fn effective_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Outcome {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Failure { code: 1, message: format!("{}: {e}", dir.display()) })
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: 1, message: format!("{}: {e}", path.display()) }
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("size must look like 32x32, got `{s}`"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn parse_counts(s: &str, names: &[&str]) -> Result<Vec<(usize, usize)>, Failure> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, count) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("counts entry `{part}` is not name=count")))?;
        let class = names
            .iter()
            .position(|n| *n == name.trim())
            .ok_or_else(|| usage(format!("unknown class `{name}`; expected one of {names:?}")))?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad count in `{part}`")))?;
        out.push((class, count));
    }
    Ok(out)
}

fn synth(a: SynthArgs) -> Outcome {
    let size = parse_size(&a.size)?;
    let seed = effective_seed(a.seed)?;
    let names: &[&str] = match a.kind {
        Kind::Ambiguous => &AMBIGUOUS_CLASSES,
        Kind::Multiorgan => &ORGAN_CLASSES,
    };
    let mut counts = parse_counts(&a.counts, names)?;
    if counts.is_empty() {
        counts = (0..names.len()).map(|c| (c, a.per_class)).collect();
    }
    let dataset = match a.kind {
        Kind::Multiorgan => gen_multiorgan_dataset(&counts, size, seed)?,
        Kind::Ambiguous => {
            let per: Vec<usize> = counts.iter().map(|c| c.1).collect();
            if per.len() != names.len() || per.iter().any(|&n| n != per[0]) {
                return Err(usage("the ambiguous corpus takes the same count for every class"));
            }
            gen_ambiguous_dataset(per[0], size, seed)?
        }
    };
    prepare_out_dir(&a.out, a.force)?;
    write_dataset(&dataset, &a.out)?;
    println!("{}", dataset.summary());
    Ok(())
}

fn model_config(m: &ModelArgs, dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        depth: m.depth,
        base_filters: m.base_filters,
        film_enabled: !m.no_film,
        n_metadata_classes: dataset.n_classes(),
        in_channels: dataset.samples.first().map_or(1, Sample::channels),
        ..ModelConfig::default()
    }
}

fn train_config(t: &TrainFlags) -> Result<TrainConfig, Failure> {
    Ok(TrainConfig {
        max_epochs: t.max_epochs,
        patience: t.patience,
        epsilon: t.epsilon,
        initial_lr: t.lr,
        batch_size: t.batch_size,
        seed: effective_seed(t.seed)?,
        ..TrainConfig::default()
    })
}

fn write_split(split: &SplitSpec, path: &Path) -> Outcome {
    let mut text = String::from("subject_id,part\n");
    for (part, ids) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        for id in ids {
            text.push_str(&format!("{id},{part}\n"));
        }
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn read_test_ids(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let (id, part) = line
            .split_once(',')
            .ok_or_else(|| usage(format!("{}:{}: expected subject_id,part", path.display(), n + 1)))?;
        if part.trim() == "test" {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

fn metadata_mode(no_prior: bool) -> MetadataMode {
    if no_prior {
        MetadataMode::Constant(0)
    } else {
        MetadataMode::TrueClass
    }
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let dataset = read_dataset(&a.data)?;
    let tc = train_config(&a.train)?;
    let split = split_per_subject(&dataset, SPLIT_FRACTIONS, tc.seed)?;
    let model = FilmUNet::init(model_config(&a.model, &dataset), tc.seed)?;
    prepare_out_dir(&a.out, a.force)?;
    let outcome = train(model, &dataset, &split, &tc, metadata_mode(a.no_prior))?;
    save_checkpoint(&outcome.model, &a.out.join("model.ckpt"))?;
    write_split(&split, &a.out.join("split.csv"))?;
    let curves = a.out.join("curves.csv");
    let file = fs::File::create(&curves).map_err(|e| io_failure(&curves, e))?;
    write_curves(&outcome.curves, file).map_err(|e| io_failure(&curves, e))?;
    println!(
        "epochs {} best epoch {} best valid loss {:.4}{}",
        outcome.curves.len(),
        outcome.best_epoch,
        outcome.best_valid_loss,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn selected<'a>(dataset: &'a Dataset, split: &Option<PathBuf>) -> Result<Vec<&'a Sample>, Failure> {
    Ok(match split {
        Some(path) => dataset.select(&read_test_ids(path)?)?,
        None => dataset.samples.iter().collect(),
    })
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let dataset = read_dataset(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let samples = selected(&dataset, &a.split)?;
    let mode = metadata_mode(a.no_prior);
    let dice = sample_dice(&model, &samples, |s| mode.class_for(s))?;
    if let Some(out) = &a.out {
        let mut text = String::from("subject_id,class,dice\n");
        for (s, d) in samples.iter().zip(&dice) {
            text.push_str(&format!("{},{},{d}\n", s.subject_id, dataset.class_names[s.class_id]));
        }
        fs::write(out, text).map_err(|e| io_failure(out, e))?;
    }
    for (c, name) in dataset.class_names.iter().enumerate() {
        let v: Vec<f64> = samples.iter().zip(&dice).filter(|(s, _)| s.class_id == c).map(|(_, d)| *d).collect();
        if !v.is_empty() {
            println!("{name:>12} n={:<3} mean dice {:.4}", v.len(), v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    println!("{:>12} n={:<3} mean dice {:.4}", "all", dice.len(), dice.iter().sum::<f64>() / dice.len().max(1) as f64);
    Ok(())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| usage(format!("bad {what} entry `{p}`"))))
        .collect()
}

fn parse_directions(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let bad = || usage(format!("sweep direction `{p}` is not minority:majority"));
            let (a, b) = p.split_once(':').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn run_and_emit(dataset: &Dataset, config: &ExperimentConfig, out: &Path, force: bool) -> Outcome {
    config.validate()?;
    prepare_out_dir(out, force)?;
    let report = run_experiment(dataset, config)?;
    emit_report(&report, out)?;
    print_summary(&report.summary);
    Ok(())
}

fn print_summary(rows: &[filmseg::eval::SummaryRow]) {
    println!("{:<22} {:<10} {:>3} {:>8} {:>8} {:>22} {:>10}", "arm", "class", "n", "mean", "std", "vs", "p");
    for r in rows {
        println!(
            "{:<22} {:<10} {:>3} {:>8.4} {:>8} {:>22} {:>10}",
            r.arm,
            r.class,
            r.n,
            r.mean,
            r.std.map_or(String::new(), |s| format!("{s:.4}")),
            r.compared_to.as_deref().unwrap_or(""),
            r.p_value.map_or(String::new(), |p| format!("{p:.4}")),
        );
    }
}

fn experiment_cmd(a: ExperimentArgs) -> Outcome {
    let kind: ExperimentKind = a.kind.parse().map_err(|e: filmseg::Error| usage(e.to_string()))?;
    let dataset = read_dataset(&a.data)?;
    let mut config = ExperimentConfig::new(kind);
    config.model = model_config(&a.model, &dataset);
    config.train = train_config(&a.train)?;
    config.seed = config.train.seed;
    config.repetitions = a.repetitions;
    config.workers = a.workers;
    config.sweep.sizes = parse_list(&a.sweep_sizes, "sweep size")?;
    config.sweep.majority = a.sweep_majority;
    config.sweep.n_test = a.sweep_test;
    config.sweep.directions = parse_directions(&a.sweep_directions)?;
    run_and_emit(&dataset, &config, &a.out, a.force)
}

fn label_swap_cmd(a: LabelSwapArgs) -> Outcome {
    let dataset = read_dataset(&a.data)?;
    let Some(ckpt) = &a.checkpoint else {
        let mut config = ExperimentConfig::new(ExperimentKind::LabelSwap);
        config.model = model_config(&a.model, &dataset);
        config.train = train_config(&a.train)?;
        config.seed = config.train.seed;
        config.repetitions = a.repetitions;
        config.workers = a.workers;
        return run_and_emit(&dataset, &config, &a.out, a.force);
    };
    let model = load_checkpoint(ckpt)?;
    let samples = selected(&dataset, &a.split)?;
    let matrix = label_swap_matrix(&model, &samples, dataset.n_classes())?;
    prepare_out_dir(&a.out, a.force)?;
    let mut text = String::from("repetition,true_label,input_label,dice\n");
    for (t, row) in matrix.iter().enumerate() {
        let Some(row) = row else { continue };
        print!("{:>12}", dataset.class_names[t]);
        for (c, d) in row.iter().enumerate() {
            text.push_str(&format!("0,{},{},{d}\n", dataset.class_names[t], dataset.class_names[c]));
            print!(" {d:>8.4}");
        }
        println!();
    }
    let path = a.out.join("swap_matrix.csv");
    fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    println!("diagonal dominant: {}", diagonal_dominant(&matrix));
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let lines = gradcheck_suite(a.seed)?;
    let mut failed = Vec::new();
    for l in &lines {
        let status = if l.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<20} max rel error {:.3e} (tol {:.0e}, {} coords)",
            l.name, l.max_rel_error, l.tolerance, l.coordinates
        );
        if !l.passed() {
            failed.push(l.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("gradient check failed: {}", failed.join(", ")) })
    }
}

fn report_cmd(a: ReportArgs) -> Outcome {
    let scores = read_results(&a.dir.join("results.csv"))?;
    let summary = read_summary(&a.dir.join("summary.csv"))?;
    let title = a.dir.file_name().map_or(String::from("report"), |n| n.to_string_lossy().into_owned());
    let bars = a.dir.join("bars.svg");
    fs::write(&bars, bars_svg(&title, &summary)).map_err(|e| io_failure(&bars, e))?;
    println!("{} scores", scores.len());
    print_summary(&summary);
    Ok(())
}
