//! Command-line front end. Exit codes: 0 success, 1 usage error,
//! 2 runtime or data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::baselines::{ha_fit, HaModel};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, InitRecord};
use crate::data::{
    parse_geometry, read_dataset, read_flow_file, split_filter, synth_generate, write_dataset, write_flow_file,
    Dataset, Splits, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{predict, write_error_grids, Inferencer, MeanBaseline, MetricsReport};
use crate::external::{read_external_csv, ExternalConfig};
use crate::grid::{FlowMap, ScaleFactor};
use crate::model::{Batch, FlowModel, ModelConfig, Variant};
use crate::selfcheck::run_suite;
use crate::train::{train, TrainConfig};

/// Batch size for inference-only passes.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "fineflow", version, about = "Infer fine-grained flow maps from coarse aggregates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints, history and test metrics.
    Train(TrainArgs),
    /// Run a checkpoint on a coarse flow file.
    Infer(InferArgs),
    /// Score a checkpoint or a baseline on the test split.
    Evaluate(EvaluateArgs),
    /// Score several methods on the test split side by side.
    Compare(CompareArgs),
    /// Finite-difference check of every operation and a tiny model.
    Gradcheck(GradcheckArgs),
}

fn geometry(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_geometry(s).map_err(|e| e.to_string())
}

fn scale(s: &str) -> std::result::Result<ScaleFactor, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    ScaleFactor::new(n).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coarse grid as WIDTHxHEIGHT.
    #[arg(long, default_value = "16x16", value_parser = geometry)]
    coarse: (usize, usize),
    /// Upscaling factor (at least 2).
    #[arg(long, default_value = "2", value_parser = scale)]
    scale: ScaleFactor,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    /// Fixed spatial allocation (historical average is exact).
    #[arg(long)]
    stationary: bool,
    /// Multiplicative per-cell noise level.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// full | ne | sl
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Residual blocks.
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Filters per convolution.
    #[arg(long, default_value_t = 128)]
    f: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Structural-loss weight (variant sl).
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Keep per-epoch progress off stdout.
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Coarse maps in the flow-file format.
    #[arg(long)]
    input: PathBuf,
    /// External-factor CSV, one row per input map (variant full).
    #[arg(long)]
    externals: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("method").required(true).args(["ckpt", "baseline"])))]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// mean | ha
    #[arg(long, value_parser = ["mean", "ha"])]
    baseline: Option<String>,
    #[arg(long)]
    data: PathBuf,
    /// Also write per-cell absolute errors.
    #[arg(long)]
    error_grids: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to include; repeatable.
    #[arg(long)]
    ckpt: Vec<PathBuf>,
    /// Comma-separated subset of mean,ha.
    #[arg(long, default_value = "mean,ha", value_delimiter = ',', value_parser = ["mean", "ha"])]
    baselines: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn generate(a: GenerateArgs) -> Result<i32> {
    let mut cfg = SynthConfig::new(a.coarse, a.scale, a.steps, a.seed);
    cfg.stationary = a.stationary;
    cfg.noise = a.noise;
    let d = synth_generate(&cfg)?;
    write_dataset(&d, &a.out)?;
    let (h, w) = d.manifest.fine_shape();
    println!(
        "wrote {} samples ({}x{} coarse, {}x{} fine) to {}",
        d.samples.len(),
        d.manifest.coarse_width,
        d.manifest.coarse_height,
        w,
        h,
        a.out.display()
    );
    Ok(0)
}

fn load_splits(dir: &Path) -> Result<(Dataset, Splits)> {
    let d = read_dataset(dir)?;
    let s = split_filter(&d.samples, d.manifest.ratios, d.manifest.zero_threshold)?;
    Ok((d, s))
}

/// Model config for `variant` on the dataset described by `d`.
fn model_config(d: &Dataset, variant: Variant, m: usize, f: usize) -> ModelConfig {
    let man = &d.manifest;
    // sl drops the external subnet along with the normalization layer
    let ext = (variant == Variant::Full).then(|| ExternalConfig::new(man.schema.clone()));
    let mut cfg = ModelConfig::new(m, f, man.scale, (man.coarse_height, man.coarse_width), variant, ext);
    cfg.scalers = man.scalers;
    cfg
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let (d, splits) = load_splits(&a.data)?;
    let cfg = model_config(&d, a.variant, a.m, a.f);
    let model = FlowModel::<f32>::build(cfg.clone(), a.seed)?;
    let tc = TrainConfig {
        lr: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        structural_weight: a.lambda,
        ..TrainConfig::default()
    };
    create_dir(&a.out)?;
    println!(
        "{} parameters; {} train / {} validation / {} test samples ({} removed)",
        model.param_count(),
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        splits.removed
    );
    let quiet = a.quiet;
    let outcome = train(model, &splits.train, &splits.valid, &tc, |r| {
        if !quiet {
            println!(
                "epoch {:>4}  lr {:e}  loss {:.6e}  val rmse {:.4}  mae {:.4}",
                r.epoch, r.lr, r.train_loss, r.val.rmse, r.val.mae
            );
        }
    })?;
    let meta = |epoch| CheckpointMeta {
        model: cfg.clone(),
        init: InitRecord::new(a.seed),
        train: Some(tc.clone()),
        epoch: Some(epoch),
    };
    save_checkpoint(&a.out.join("best.ckpt"), &meta(outcome.best_epoch), &outcome.best, Some(&outcome.best_adam))?;
    let last_epoch = a.epochs.saturating_sub(1);
    save_checkpoint(&a.out.join("last.ckpt"), &meta(last_epoch), &outcome.last, Some(&outcome.last_adam))?;
    outcome.history.write_csv(&a.out.join("history.csv"))?;
    let test = crate::eval::evaluate(&outcome.best, &splits.test, EVAL_BATCH)?;
    test.write(&a.out, "test")?;
    println!("best epoch {}", outcome.best_epoch);
    print!("{}", test.to_text(&format!("{} (test)", a.variant)));
    Ok(0)
}

fn infer(a: InferArgs) -> Result<i32> {
    let ck = load_checkpoint(&a.ckpt)?;
    let coarse = read_flow_file(&a.input)?;
    let records = match &a.externals {
        Some(p) => Some(read_external_csv(p)?.into_iter().map(|(_, r)| r).collect::<Vec<_>>()),
        None => None,
    };
    if let Some(r) = &records {
        if r.len() != coarse.len() {
            return Err(Error::Data(format!(
                "{} coarse maps but {} external rows",
                coarse.len(),
                r.len()
            )));
        }
    }
    let model = ck.model;
    let mut fine: Vec<FlowMap> = Vec::with_capacity(coarse.len());
    for (k, chunk) in coarse.chunks(EVAL_BATCH).enumerate() {
        let ext = records.as_ref().map(|r| &r[k * EVAL_BATCH..k * EVAL_BATCH + chunk.len()]);
        fine.extend(model.infer(&Batch {
            coarse: chunk,
            externals: ext,
        })?);
    }
    create_dir(&a.out)?;
    let path = a.out.join("fine.txt");
    write_flow_file(&path, &fine)?;
    println!("wrote {} fine maps to {}", fine.len(), path.display());
    Ok(0)
}

/// Baseline by name, fitted on the training split where needed.
fn baseline(name: &str, d: &Dataset, splits: &Splits) -> Result<Box<dyn Inferencer>> {
    match name {
        "mean" => Ok(Box::new(MeanBaseline(d.manifest.scale))),
        "ha" => {
            let fine: Vec<FlowMap> = splits.train.iter().map(|s| s.fine.clone()).collect();
            let ha: HaModel = ha_fit(&fine, d.manifest.scale)?;
            Ok(Box::new(ha))
        }
        other => Err(Error::Config(format!("unknown baseline {other}"))),
    }
}

fn score(inf: &dyn Inferencer, splits: &Splits, scale: ScaleFactor) -> Result<(MetricsReport, Vec<FlowMap>)> {
    let preds = predict(inf, &splits.test, EVAL_BATCH)?;
    let r = crate::eval::report(&preds, &splits.test, scale)?;
    Ok((r, preds))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<i32> {
    let (d, splits) = load_splits(&a.data)?;
    let inf: Box<dyn Inferencer> = match (&a.ckpt, &a.baseline) {
        (Some(p), _) => Box::new(load_checkpoint(p)?.model),
        (None, Some(b)) => baseline(b, &d, &splits)?,
        (None, None) => unreachable!("clap enforces one method"),
    };
    let name = inf.name();
    let (r, preds) = score(inf.as_ref(), &splits, d.manifest.scale)?;
    create_dir(&a.out)?;
    r.write(&a.out, &name)?;
    if a.error_grids {
        write_error_grids(&a.out.join(format!("{name}_errors.txt")), &preds, &splits.test)?;
    }
    print!("{}", r.to_text(&name));
    Ok(0)
}

fn compare(a: CompareArgs) -> Result<i32> {
    let (d, splits) = load_splits(&a.data)?;
    let mut methods: Vec<(String, Box<dyn Inferencer>)> = Vec::new();
    for b in &a.baselines {
        methods.push((b.clone(), baseline(b, &d, &splits)?));
    }
    for p in &a.ckpt {
        let m = load_checkpoint(p)?.model;
        let base = m.name();
        let mut name = base.clone();
        let mut k = 2;
        while methods.iter().any(|(n, _)| *n == name) {
            name = format!("{base}-{k}");
            k += 1;
        }
        methods.push((name, Box::new(m)));
    }
    if methods.is_empty() {
        return Err(Error::Config("nothing to compare: give --ckpt or --baselines".into()));
    }
    create_dir(&a.out)?;
    let mut table = format!(
        "{:<10} {:>10} {:>10} {:>10} {:>12} {:>8}\n",
        "method", "rmse", "mae", "mape", "structural", "samples"
    );
    for (name, inf) in &methods {
        let (r, _) = score(inf.as_ref(), &splits, d.manifest.scale)?;
        r.write(&a.out, name)?;
        let _ = writeln!(
            table,
            "{:<10} {:>10.4} {:>10.4} {:>10} {:>12.3e} {:>8}",
            name,
            r.rmse,
            r.mae,
            r.mape_text(),
            r.structural_residual.unwrap_or(0.0),
            r.samples
        );
    }
    write_file(&a.out.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let results = run_suite(a.seed)?;
    let mut ok = true;
    for c in &results {
        let pass = c.passes();
        ok &= pass;
        println!(
            "{:<20} max rel error {:.3e}  checked {:>5}  kinks {:>3}  {}",
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.report.skipped_kinks,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { 0 } else { 2 })
}
