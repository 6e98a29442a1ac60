use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use hyperpose::harness::{
    self, bench_attention, bench_csv, driftwatch, evaluate, generate, toy_gradcheck, Dataset, MotionGenerator,
    Precision, SyntheticSpec, TrainConfig,
};
use hyperpose::network::{count_parameters, sidecar_path, Model, ModelConfig};
use hyperpose::Real;

#[derive(Parser)]
#[command(name = "hyperpose", version, about = "Hyperbolic 2D-to-3D pose lifting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write logs and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the per-sequence metric table.
    Eval(EvalArgs),
    /// Finite-difference check of every toy-model gradient.
    Gradcheck(GradcheckArgs),
    /// Hyperboloid drift at every lift site of a checkpoint.
    Drift(DriftArgs),
    /// Banded vs dense temporal attention cost.
    Bench(BenchArgs),
    /// Parameter count of a model configuration.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    generator: Option<MotionGenerator>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    /// "h36m" or a skeleton JSON file.
    #[arg(long)]
    skeleton: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// JSON file with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; the training data is used when absent.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    no_hflip: bool,
    #[arg(long)]
    drift_watch: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Add distortion, retrieval MAP and attention entropy columns.
    #[arg(long)]
    diagnostics: bool,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "27,54,81,108,135,162,189,216,243")]
    frames: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3,9,13,27")]
    windows: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 17)]
    joints: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// "desk" or "full".
    #[arg(long, default_value = "desk")]
    preset: String,
    /// JSON file with a "model" section (or a bare model config).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let side: serde_json::Value = read_json(&sidecar_path(path))?;
    match side.get("dtype").and_then(|v| v.as_str()) {
        Some(s) => Ok(s.parse()?),
        None => bail!("{} has no dtype", sidecar_path(path).display()),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(g) = a.generator {
        spec.generator = g;
    }
    if let Some(t) = a.frames {
        spec.frames = t;
    }
    if let Some(n) = a.sequences {
        spec.sequences = n;
    }
    if let Some(s) = a.skeleton {
        spec.skeleton = s;
    }
    let ds = generate(&spec)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} sequences of {} frames ({} joints) to {}",
        ds.len(),
        ds.frames(),
        ds.joints(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let rc: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let data = Dataset::load(&a.data)?;
    let val = a.val_data.as_deref().map(Dataset::load).transpose()?;
    let mut model = rc.model.unwrap_or_default();
    model.joints = data.joints();
    model.frames = data.frames();
    let mut cfg = rc.train.unwrap_or_default();
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = a.precision {
        cfg.precision = p;
    }
    if a.no_hflip {
        cfg.hflip = false;
    }
    if a.drift_watch {
        cfg.drift_watch = true;
    }
    std::fs::create_dir_all(&a.out)?;
    let resolved = serde_json::json!({ "model": model, "train": cfg });
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;
    let (best_epoch, best_val, last) = match cfg.precision {
        Precision::F32 => summarize(harness::train::<f32>(&cfg, &model, &data, val.as_ref(), Some(&a.out))?),
        Precision::F64 => summarize(harness::train::<f64>(&cfg, &model, &data, val.as_ref(), Some(&a.out))?),
    };
    println!(
        "best epoch {best_epoch} (val MPJPE {best_val:.3} mm); final train MPJPE {last:.3} mm; outputs in {}",
        a.out.display()
    );
    Ok(())
}

fn summarize<F>(o: harness::TrainOutcome<F>) -> (usize, f64, f64) {
    let last = o.epochs.last().map_or(f64::NAN, |e| e.train_mpjpe);
    (o.best_epoch, o.epochs[o.best_epoch].val_mpjpe, last)
}

fn eval_with<F: Real>(a: &EvalArgs, data: &Dataset) -> Result<()> {
    let model = Model::<F>::load(&a.checkpoint)?;
    let report = evaluate(&model, data, a.diagnostics)?;
    write_or_print(a.out.as_deref(), &report.to_csv())?;
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&report.to_json())?)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => eval_with::<f32>(&a, &data),
        Precision::F64 => eval_with::<f64>(&a, &data),
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = toy_gradcheck(a.seed, a.step, a.tol)?;
    for p in &report.params {
        println!("{:<40} n={:<5} max_rel={:.3e}", p.name, p.numel, p.max_rel_error);
    }
    let worst = report.max_rel_error();
    if report.passed() {
        println!("PASS: {} tensors, worst relative error {worst:.3e} ≤ {:.1e}", report.params.len(), a.tol);
        Ok(())
    } else {
        bail!("gradcheck failed: worst relative error {worst:.3e} > {:.1e}", a.tol)
    }
}

fn drift_with<F: Real>(a: &DriftArgs, data: &Dataset) -> Result<()> {
    let model = Model::<F>::load(&a.checkpoint)?;
    let series = driftwatch(&model, data)?;
    write_or_print(a.out.as_deref(), &series.to_csv())?;
    eprintln!("max drift {:.3e}", series.max());
    Ok(())
}

fn drift(a: DriftArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => drift_with::<f32>(&a, &data),
        Precision::F64 => drift_with::<f64>(&a, &data),
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let rows = bench_attention(&a.frames, &a.windows, a.dim, a.heads, a.joints, a.seed)?;
    write_or_print(a.out.as_deref(), &bench_csv(&rows))?;
    eprintln!("multiply-adds count QKᵀ and P·V exactly over all joints, heads and channels");
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => {
            let v: serde_json::Value = read_json(p)?;
            let m = v.get("model").cloned().unwrap_or(v);
            serde_json::from_value(m)?
        }
        None => match a.preset.as_str() {
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full(),
            other => bail!("unknown preset {other:?}"),
        },
    };
    cfg.validate()?;
    println!("{}", count_parameters(&cfg));
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Drift(a) => drift(a),
        Command::Bench(a) => bench(a),
        Command::Params(a) => params(a),
    }
}
