//! Command-line front end. Exit codes: 0 success, 1 failed check or
//! numeric abort, 2 usage, 3 config/data, 4 corrupt container.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::container::{model_container, model_from_container, Container, TeacherLogits};
use crate::error::Error;
use crate::frontend::wav::read_wav;
use crate::frontend::{MelExtractor, SAMPLE_RATE};
use crate::inspection::{capture_dyrelu_mappings, inspect, InspectionConfig, Method, Metric, Target};
use crate::metrics::{accuracy, mean_average_precision};
use crate::network::{Model, ModelConfig, Placement};
use crate::profiler::mac_report;
use crate::tensor::gradcheck::{finite_diff_gradcheck, CheckOutcome};
use crate::training::toy::{toy_dataset, toy_run_config, TOY_SECONDS};
use crate::training::trainer::{dataset_mels, mel_config_for, predict_logits};
use crate::training::{train_loop, Dataset, RunConfig, UniformSampler};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "DYMN_THREADS";
/// Data seed of the synthetic training split.
pub const SYNTHETIC_TRAIN_SEED: u64 = 7;
/// Data seed of the synthetic held-out split.
pub const SYNTHETIC_HELDOUT_SEED: u64 = 8;
/// Epochs of a synthetic run without a config file.
pub const SYNTHETIC_EPOCHS: usize = 50;
const CLIP_SECONDS_KEY: &str = "clip_seconds";

/// Writes to stdout; a closed pipe ends the process with success.
fn emit(args: fmt::Arguments) {
    if let Err(e) = io::stdout().lock().write_fmt(args) {
        if e.kind() == io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

macro_rules! out {
    ($($t:tt)*) => { emit(format_args!("{}\n", format_args!($($t)*))) };
}

#[derive(Parser, Debug)]
#[command(name = "dymn", version, about = "Dynamic MobileNet audio tagger: profile, train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// MAC and parameter report for a model configuration.
    Profile(ProfileArgs),
    /// Train from a labelled directory or the synthetic task.
    Train(TrainArgs),
    /// Accuracy and mAP of a checkpoint.
    Eval(EvalArgs),
    /// Top-k class probabilities for a WAV file or a directory.
    Infer(InferArgs),
    /// Write a checkpoint's logits as a teacher-logits container.
    Logits(LogitsArgs),
    /// Perturb dynamic components or capture Dy-ReLU mappings.
    Inspect(InspectArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// dymn-s, dymn-m, dymn-l or mn.
    #[arg(long, default_value = "dymn-m")]
    model: String,
    /// Width multiplier overriding the preset.
    #[arg(long)]
    alpha: Option<f64>,
    /// Placement of dynamic blocks overriding the preset.
    #[arg(long)]
    placement: Option<String>,
    #[arg(long, default_value_t = 1000)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    n_mels: usize,
    /// Directory receiving profile.txt and profile.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Heldout,
}

/// Where clips come from: a directory or the synthetic task.
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Directory with labels.csv and {id}.wav files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic two-class tone task (split: train or heldout).
    #[arg(long, num_args = 0..=1, default_missing_value = "train", value_enum)]
    synthetic: Option<Split>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat TOML file; absent keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: Source,
    /// Teacher-logits container directory.
    #[arg(long)]
    teacher_logits: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and traces.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).args(["wav", "data"])))]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args, Debug)]
struct LogitsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Accuracy,
    Map,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    /// ca, dyconv or dyrelu.
    #[arg(long)]
    target: String,
    /// A perturbation method, or `mapping` (dyrelu only).
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated 1-based blocks; default every block holding the target.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    /// Perturbed evaluations with seeds seed, seed+1, …
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Debug: every permutation is the identity.
    #[arg(long)]
    identity_permutation: bool,
    #[arg(long, value_enum, default_value_t = MetricArg::Map)]
    metric: MetricArg,
    /// Pairs per block for mapping capture.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Output directory (required for mapping capture).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scope {
    Ops,
    Blocks,
    Loss,
    All,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::All)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adds a case with a deliberately wrong analytic gradient.
    #[arg(long, hide = true)]
    corrupt: bool,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 1,
            Failure::Lib(Error::Corrupt(_)) => 4,
            Failure::Lib(Error::Numeric(_) | Error::State(_)) => 1,
            Failure::Lib(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = configure_threads().and_then(|_| match cli.command {
        Command::Profile(a) => profile(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Logits(a) => logits(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    });
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}\n\nFor more information, try '--help'."),
                Failure::Check(m) => eprintln!("error: {m}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            f.code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a non-negative integer, got '{v}'")))?;
    // 0 keeps rayon's default; a pool that already exists is left alone
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn profile(a: ProfileArgs) -> CliResult<()> {
    let mut cfg = ModelConfig::preset(&a.model).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(alpha) = a.alpha {
        cfg.width_mult = alpha;
    }
    if let Some(p) = &a.placement {
        cfg.placement = p.parse::<Placement>().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.n_mels = a.n_mels;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.frames == 0 {
        return Err(Failure::Usage("--frames must be positive".into()));
    }
    let report = mac_report(&cfg, a.frames)?;
    let text = report.to_text();
    emit(format_args!("{text}"));
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("profile.txt"), &text)?;
        fs::write(dir.join("profile.csv"), report.to_csv())?;
    }
    Ok(())
}

fn synthetic(split: Split) -> crate::Result<Dataset> {
    match split {
        Split::Train => toy_dataset(32, TOY_SECONDS, SYNTHETIC_TRAIN_SEED),
        Split::Heldout => toy_dataset(128, TOY_SECONDS, SYNTHETIC_HELDOUT_SEED),
    }
}

fn load_source(s: &Source, n_classes: usize, clip_seconds: f64) -> CliResult<Dataset> {
    match (&s.data, s.synthetic) {
        (_, Some(split)) => Ok(synthetic(split)?),
        (Some(dir), None) => Ok(Dataset::load_dir(dir, n_classes, clip_samples(clip_seconds))?),
        (None, None) => Err(Failure::Usage("one of --data or --synthetic is required".into())),
    }
}

fn clip_samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}

fn save_checkpoint(model: &Model<f32>, clip_seconds: f64, dir: &Path) -> crate::Result<()> {
    let mut c = model_container(model)?;
    c.metadata.insert(CLIP_SECONDS_KEY.into(), serde_json::json!(clip_seconds));
    c.save(dir)
}

/// Model and training clip length (10 s when unrecorded).
fn load_checkpoint(dir: &Path) -> crate::Result<(Model<f32>, f64)> {
    let c = Container::load(dir)?;
    let secs = c.metadata.get(CLIP_SECONDS_KEY).and_then(|v| v.as_f64()).unwrap_or(10.0);
    Ok((model_from_container(&c)?, secs))
}

fn train(a: TrainArgs) -> CliResult<()> {
    let base = match a.source.synthetic {
        Some(_) => toy_run_config(SYNTHETIC_EPOCHS),
        None => RunConfig::default(),
    };
    let mut run = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml_str_over(&text, &base)?
        }
        None => base,
    };
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    run.validate()?;
    let data = load_source(&a.source, run.model.n_classes, run.train.clip_seconds)?;
    let teacher = a.teacher_logits.as_deref().map(TeacherLogits::load).transpose()?;
    out!(
        "run: clips={} classes={} epochs={} batch_size={} peak_lr={} kd_lambda={} teacher={} seed={}",
        data.len(),
        data.n_classes,
        run.schedule.epochs,
        run.train.batch_size,
        run.schedule.peak_lr,
        run.train.kd_lambda,
        a.teacher_logits.as_ref().map_or("none".into(), |p| p.display().to_string()),
        run.train.seed
    );
    fs::create_dir_all(a.out.join("checkpoints"))?;
    fs::write(a.out.join("config.toml"), run.to_toml_string()?)?;
    let mut model = Model::<f32>::new(&run.model, run.train.seed)?;
    let secs = run.train.clip_seconds;
    let ckpt = a.out.join("checkpoints");
    let trace = train_loop(&mut model, &data, &run, teacher.as_ref(), &mut UniformSampler, |m, r| {
        save_checkpoint(m, secs, &ckpt.join(format!("epoch_{:03}", r.epoch)))?;
        let dev = r.teacher_deviation.map_or(String::new(), |d| format!(" teacher_dev {d:.4}"));
        out!("epoch {:>3} lr {:.3e} tau {:.2} loss {:.5}{dev}", r.epoch, r.lr, r.tau, r.mean_loss);
        Ok(())
    })?;
    save_checkpoint(&model, secs, &a.out.join("model"))?;
    fs::write(a.out.join("trace.csv"), trace.steps_csv())?;
    fs::write(a.out.join("epochs.csv"), trace.epochs_csv())?;
    if let (Some(first), Some(last)) = (trace.epochs.first(), trace.epochs.last()) {
        out!("loss first epoch {:.5} last epoch {:.5}", first.mean_loss, last.mean_loss);
    }
    out!("model saved to {}", a.out.join("model").display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (model, secs) = load_checkpoint(&a.checkpoint)?;
    let data = load_source(&a.source, model.config().n_classes, secs)?;
    let mels = dataset_mels(&data, &mel_config_for(model.config()))?;
    let z = predict_logits(&model, &mels, a.batch)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let y = data.targets(&idx)?;
    out!("clips {}", data.len());
    out!("accuracy {:.6}", accuracy(&z, &y)?);
    out!("mAP {:.6}", mean_average_precision(&z, &y)?);
    Ok(())
}

fn top_k(logits: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut s: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (i, crate::tensor::ops::sigmoid(z as f64)))
        .collect();
    s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    s.truncate(k.max(1));
    s
}

fn infer(a: InferArgs) -> CliResult<()> {
    let (model, secs) = load_checkpoint(&a.checkpoint)?;
    let ex = MelExtractor::new(&mel_config_for(model.config()))?;
    let items: Vec<(String, Vec<f32>)> = if let Some(path) = &a.wav {
        let w = read_wav(path)?;
        let z = model.predict(&ex.compute(&w)?)?;
        vec![(path.display().to_string(), z.into_data())]
    } else {
        let dir = a.data.as_ref().expect("clap enforces one input");
        let data = Dataset::load_dir(dir, model.config().n_classes, clip_samples(secs))?;
        let mels = dataset_mels(&data, ex.config())?;
        let z = predict_logits(&model, &mels, 32)?;
        let c = model.config().n_classes;
        data.clips
            .iter()
            .zip(z.data().chunks(c))
            .map(|(clip, row)| (clip.id.clone(), row.to_vec()))
            .collect()
    };
    out!("item,rank,class,score");
    for (name, z) in items {
        for (rank, (class, p)) in top_k(&z, a.top_k).into_iter().enumerate() {
            out!("{name},{},{class},{p}", rank + 1);
        }
    }
    Ok(())
}

fn logits(a: LogitsArgs) -> CliResult<()> {
    let (model, secs) = load_checkpoint(&a.checkpoint)?;
    let data = load_source(&a.source, model.config().n_classes, secs)?;
    let mels = dataset_mels(&data, &mel_config_for(model.config()))?;
    let z = predict_logits(&model, &mels, a.batch)?;
    let t = TeacherLogits::new(data.clips.iter().map(|c| c.id.clone()).collect(), z)?;
    t.save(&a.out)?;
    out!("wrote logits for {} clips to {}", data.len(), a.out.display());
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> CliResult<()> {
    let usage = |e: Error| Failure::Usage(e.to_string());
    let target: Target = a.target.parse().map_err(usage)?;
    if a.method.eq_ignore_ascii_case("mapping") {
        if target != Target::DyRelu {
            return Err(Failure::Usage(format!("mapping capture is defined for dyrelu, not {target}")));
        }
        let Some(out) = &a.out else {
            return Err(Failure::Usage("mapping capture needs --out".into()));
        };
        let (model, secs) = load_checkpoint(&a.checkpoint)?;
        let blocks = match &a.blocks {
            Some(b) => b.clone(),
            None => (1..=15).filter(|&i| model.net.blocks[i - 1].spec.has_dyrelu()).collect(),
        };
        let data = load_source(&a.source, model.config().n_classes, secs)?;
        let mels = dataset_mels(&data, &mel_config_for(model.config()))?;
        let caps = capture_dyrelu_mappings(&model, &mels, &blocks, a.samples, a.seed, a.batch)?;
        fs::create_dir_all(out)?;
        for c in caps {
            let path = out.join(format!("mapping_block{:02}.csv", c.block));
            fs::write(&path, c.to_csv())?;
            out!("block {} pairs {} -> {}", c.block, c.pairs.len(), path.display());
        }
        return Ok(());
    }
    let method: Method = a.method.parse().map_err(usage)?;
    let cfg = InspectionConfig {
        target,
        method,
        seed: a.seed,
        blocks: a.blocks.clone(),
        identity: a.identity_permutation,
    };
    cfg.validate().map_err(usage)?;
    if a.repeats == 0 {
        return Err(Failure::Usage("--repeats must be positive".into()));
    }
    let (model, secs) = load_checkpoint(&a.checkpoint)?;
    let data = load_source(&a.source, model.config().n_classes, secs)?;
    let mels = dataset_mels(&data, &mel_config_for(model.config()))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let metric = match a.metric {
        MetricArg::Accuracy => Metric::Accuracy,
        MetricArg::Map => Metric::MeanAveragePrecision,
    };
    let report = inspect(&model, &mels, &data.targets(&idx)?, &cfg, metric, a.batch, a.repeats)?;
    out!("target {target} method {method} seed {}", a.seed);
    out!("{report}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("inspection.csv"), format!("{report}\n"))?;
    }
    Ok(())
}

fn corrupted_case() -> crate::Result<CheckOutcome> {
    // d/dθ θ² at 3 reported as 6.5
    let r = finite_diff_gradcheck(|t| Ok(t[0] * t[0]), &[3.0], &[6.5], 1e-5)?;
    Ok(CheckOutcome {
        name: "negative control (corrupted gradient)".into(),
        max_rel_err: r.max_rel_err,
        passed: r.max_rel_err < crate::tensor::gradcheck::GRADCHECK_TOL,
    })
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let mut cases = Vec::new();
    if matches!(a.scope, Scope::Ops | Scope::All) {
        cases.extend(crate::tensor::gradcheck::ops_suite(a.seed)?);
    }
    if matches!(a.scope, Scope::Blocks | Scope::All) {
        cases.extend(crate::blocks::checks::blocks_suite(a.seed)?);
    }
    if matches!(a.scope, Scope::Loss | Scope::All) {
        cases.extend(crate::training::loss::loss_suite(a.seed)?);
    }
    if a.corrupt {
        cases.push(corrupted_case()?);
    }
    out!("{:<48} {:>12}  result", "check", "max_rel_err");
    for c in &cases {
        out!("{:<48} {:>12.3e}  {}", c.name, c.max_rel_err, if c.passed { "PASS" } else { "FAIL" });
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    out!("{} checks, {failed} failed", cases.len());
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn top_k_orders_by_probability() {
        let t = top_k(&[0.0, 2.0, -1.0, 2.0], 3);
        assert_eq!(t.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 3, 0]);
        assert!((t[2].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["dymn", "bogus"]), 2);
        assert_eq!(run(["dymn", "profile", "--model", "nope"]), 2);
        assert_eq!(run(["dymn", "gradcheck", "--scope", "everything"]), 2);
        assert_eq!(run(["dymn", "--help"]), 0);
    }
}
