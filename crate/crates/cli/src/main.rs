//! `hsrkan` command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
//! run breaks down numerically (non-finite loss, failed gradient check).

mod data;
mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hsrkan::degradation::{make_sample, patch_seed, synth_hsi, CubeMeta, SpatialDegradation, SpectralResponse, Split};
use hsrkan::gradcheck::{run_scope, Scope};
use hsrkan::io::{read_hsc, read_response_csv, write_hsc, write_pgm, write_response_csv};
use hsrkan::metrics::squared_error_map;
use hsrkan::model::param_count;
use hsrkan::trainer::{self, predict_all};
use hsrkan::{Checkpoint, MetricReport, ModelConfig, TrainConfig};

use manifest::RunManifest;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<hsrkan::Error> for CliError {
    fn from(e: hsrkan::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "hsrkan", version, about = "KAN-based hyperspectral super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic ground-truth cubes.
    Synth(SynthArgs),
    /// Derive multispectral and low-resolution inputs from ground truth.
    Degrade(DegradeArgs),
    /// Train a model on a degraded dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes metrics, reconstructions and heatmaps.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Quality metrics between two cubes, as one line of JSON.
    Metrics(MetricsArgs),
    /// Parameter and operation counts for a configuration.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 31)]
    bands: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    endmembers: usize,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DegradeArgs {
    /// Directory holding `NNNN_z.hsc` cubes.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Spectral response CSV (`c` rows of `C` weights); defaults to three
    /// Gaussian bands.
    #[arg(long)]
    response: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
    Toy,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::full(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optional validation directory.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON model configuration; fields left out come from `--preset`.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// JSON training configuration; fields left out take their defaults.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["model_config", "train_config"])]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Train without the spline sparsity terms.
    #[arg(long)]
    no_sparse_loss: bool,
    /// Replace channel attention by stacked per-pixel KAN layers.
    #[arg(long)]
    no_cab: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Layer,
    Model,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "op")]
    scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `gradcheck.json` and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    estimate: PathBuf,
    reference: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON model configuration; fields left out come from `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    /// Output patch side used for the operation count.
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hsrkan: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Applies `HSRKAN_THREADS`; `1` also switches the kernels to their
/// sequential paths.
fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("HSRKAN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("HSRKAN_THREADS must be a positive integer, got {raw:?}")))?;
    if n == 1 {
        hsrkan::parallel::set_enabled(false);
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    if a.size == 0 || a.bands == 0 || a.count == 0 {
        return Err(CliError::config("size, bands and count must be positive"));
    }
    out_dir(&a.out)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let mut man = RunManifest::new("synth");
    man.seed = Some(a.seed);
    man.effective_config = json!({
        "seed": a.seed, "bands": a.bands, "size": a.size, "count": a.count,
        "endmembers": a.endmembers, "split": format!("{split:?}").to_lowercase(),
    });
    for i in 0..a.count {
        let seed = patch_seed(a.seed, split, i);
        let cube = synth_hsi(seed, a.bands, a.size, a.size, a.endmembers)?.with_meta(CubeMeta {
            seed: Some(seed),
            source: "synth".into(),
        });
        let path = data::cube_path(&a.out, i, 'z');
        write_hsc(&path, &cube)?;
        man.output(path);
    }
    man.write(&a.out)?;
    println!("wrote {} cubes to {}", a.count, a.out.display());
    Ok(())
}

fn cmd_degrade(a: DegradeArgs) -> CliResult<()> {
    let truth = data::load_truth(&a.data)?;
    let bands = truth[0].1.bands();
    let response = match &a.response {
        Some(p) => read_response_csv(p)?,
        None => SpectralResponse::default_rgb(bands)?,
    };
    let deg = SpatialDegradation::new(a.scale)?;
    out_dir(&a.out)?;
    let mut man = RunManifest::new("degrade");
    if let Some(p) = &a.response {
        man.config_paths.insert("response".into(), p.clone());
    }
    man.effective_config = json!({ "scale": a.scale, "bands": bands, "msi_bands": response.rows() });
    let rpath = a.out.join("response.csv");
    write_response_csv(&rpath, &response)?;
    man.output(rpath);
    for (i, z) in truth {
        if z.height() % a.scale != 0 || z.width() % a.scale != 0 {
            return Err(CliError::config(format!("cube {i}: size not divisible by scale {}", a.scale)));
        }
        let s = make_sample(z, &response, &deg)?;
        for (role, cube) in [('z', &s.z), ('x', &s.x), ('y', &s.y)] {
            let path = data::cube_path(&a.out, i, role);
            write_hsc(&path, cube)?;
            man.output(path);
        }
    }
    man.write(&a.out)?;
    println!("degraded {} cubes into {}", man.outputs.len() / 3, a.out.display());
    Ok(())
}

fn model_config(a: &TrainArgs, samples: &[hsrkan::degradation::Sample]) -> CliResult<ModelConfig> {
    let mut v = serde_json::to_value(a.preset.config())?;
    let from_file = match &a.model_config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let s = &samples[0];
    let derived = json!({
        "hsi_bands": s.z.bands(),
        "msi_bands": s.x.bands(),
        "scale": s.z.height() / s.y.height().max(1),
    });
    for key in ["hsi_bands", "msi_bands", "scale"] {
        if let Some(given) = from_file.get(key) {
            if given != &derived[key] {
                return Err(CliError::config(format!("model config {key} = {given} but the data implies {}", derived[key])));
            }
        }
    }
    merge(&mut v, from_file);
    merge(&mut v, derived);
    let mut over = serde_json::Map::new();
    if let Some(s) = a.seed {
        over.insert("seed".into(), s.into());
    }
    if let Some(d) = a.hidden {
        over.insert("hidden".into(), d.into());
    }
    if let Some(l) = a.blocks {
        over.insert("blocks".into(), l.into());
    }
    if a.no_cab {
        over.insert("channel_attention".into(), false.into());
    }
    merge(&mut v, Value::Object(over));
    let cfg: ModelConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut v = serde_json::to_value(TrainConfig::default())?;
    if let Some(p) = &a.train_config {
        merge(&mut v, read_json(p)?);
    }
    let mut cfg: TrainConfig = serde_json::from_value(v)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr0 = lr;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
    }
    if a.no_sparse_loss {
        cfg.sparse_loss_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let train_set: Vec<_> = data::load_samples(&a.data)?.into_iter().map(|(_, s)| s).collect();
    let val_set: Vec<_> = match &a.val {
        Some(d) => data::load_samples(d)?.into_iter().map(|(_, s)| s).collect(),
        None => Vec::new(),
    };
    let mut man = RunManifest::new("train");
    man.config_paths.insert("data".into(), a.data.clone());
    if let Some(v) = &a.val {
        man.config_paths.insert("val".into(), v.clone());
    }
    for (k, p) in [("model_config", &a.model_config), ("train_config", &a.train_config), ("resume", &a.resume)] {
        if let Some(p) = p {
            man.config_paths.insert(k.into(), p.clone());
        }
    }
    out_dir(&a.out)?;
    let log_path = a.out.join("train_log.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let outcome = match &a.resume {
        Some(p) => {
            let mut ckpt = Checkpoint::load(p)?;
            if let Some(e) = a.epochs {
                ckpt.train.epochs = e;
            }
            if a.max_steps.is_some() {
                ckpt.train.max_steps = a.max_steps;
            }
            man.seed = Some(ckpt.train.seed);
            man.effective_config = json!({ "model": ckpt.model.config(), "train": ckpt.train });
            writeln!(log, "{}", trainer::CSV_HEADER)?;
            trainer::resume(ckpt, &train_set, &val_set, Some(&mut log))?
        }
        None => {
            let mcfg = model_config(&a, &train_set)?;
            let tcfg = train_config(&a)?;
            man.seed = Some(tcfg.seed);
            man.effective_config = json!({ "model": mcfg, "train": tcfg });
            trainer::train(mcfg, tcfg, &train_set, &val_set, Some(&mut log))?
        }
    };
    log.flush()?;
    man.output(&log_path);
    let cfg_path = a.out.join("effective_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&man.effective_config)? + "\n")?;
    man.output(cfg_path);
    let ckpt_path = a.out.join("checkpoint.hsrk");
    outcome.checkpoint.save(&ckpt_path)?;
    man.output(&ckpt_path);
    if let Some(r) = &outcome.val_report {
        let p = a.out.join("val_report.json");
        fs::write(&p, r.to_json() + "\n")?;
        man.output(p);
        println!("validation {}", r.to_json());
    }
    man.write(&a.out)?;
    let last = outcome.log.last();
    println!(
        "trained {} steps; final loss {}; checkpoint {}",
        last.map_or(0, |r| r.step),
        last.map_or("n/a".into(), |r| format!("{:.6}", r.total)),
        ckpt_path.display()
    );
    Ok(())
}

fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricReport {
        psnr: sum(|r| r.psnr),
        ssim: sum(|r| r.ssim),
        sam: sum(|r| r.sam),
        ergas: sum(|r| r.ergas),
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let indexed = data::load_samples(&a.data)?;
    let samples: Vec<_> = indexed.iter().map(|(_, s)| s.clone()).collect();
    let model = &ckpt.model;
    let scale = model.config().scale;
    out_dir(&a.out)?;
    let mut man = RunManifest::new("eval");
    man.config_paths.insert("checkpoint".into(), a.checkpoint.clone());
    man.config_paths.insert("data".into(), a.data.clone());
    man.seed = Some(ckpt.train.seed);
    man.effective_config = json!({ "model": model.config() });

    let preds = predict_all(Some(model), &samples, scale)?;
    let base = predict_all(None, &samples, scale)?;
    let mut per = Vec::new();
    let mut reports = Vec::new();
    let mut base_reports = Vec::new();
    for (((i, s), p), b) in indexed.iter().zip(&preds).zip(&base) {
        let r = MetricReport::compute(p, &s.z, scale)?;
        base_reports.push(MetricReport::compute(b, &s.z, scale)?);
        let pred_path = a.out.join(format!("{i:04}_pred.hsc"));
        write_hsc(&pred_path, p)?;
        let map_path = a.out.join(format!("{i:04}_sqerr.pgm"));
        write_pgm(&map_path, &squared_error_map(p, &s.z)?, p.height(), p.width())?;
        man.output(pred_path);
        man.output(map_path);
        per.push(json!({ "index": i, "metrics": r }));
        reports.push(r);
    }
    let mean = mean_report(&reports);
    let report = json!({
        "mean": mean,
        "baseline_upsample": mean_report(&base_reports),
        "samples": per,
    });
    let rpath = a.out.join("report.json");
    fs::write(&rpath, serde_json::to_string_pretty(&report)? + "\n")?;
    man.output(rpath);
    man.write(&a.out)?;
    println!("{}", mean.to_json());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let scope = match a.scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Layer => Scope::Layer,
        ScopeArg::Model => Scope::Model,
    };
    let results = run_scope(scope, a.seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    if let Some(dir) = &a.out {
        out_dir(dir)?;
        let mut man = RunManifest::new("gradcheck");
        man.seed = Some(a.seed);
        man.effective_config = json!({ "scope": scope });
        let p = dir.join("gradcheck.json");
        fs::write(&p, serde_json::to_string_pretty(&results)? + "\n")?;
        man.output(p);
        man.write(dir)?;
    }
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> CliResult<()> {
    let est = read_hsc(&a.estimate)?;
    let reference = read_hsc(&a.reference)?;
    println!("{}", MetricReport::compute(&est, &reference, a.scale)?.to_json());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let mut v = serde_json::to_value(a.preset.config())?;
    if let Some(p) = &a.config {
        merge(&mut v, read_json(p)?);
    }
    let mut cfg: ModelConfig = serde_json::from_value(v)?;
    if let Some(g) = a.grid {
        cfg.spline.grid_size = g;
    }
    if let Some(k) = a.order {
        cfg.spline.order = k;
    }
    let rep = param_count(&cfg, [a.patch, a.patch])?;
    let text = if a.json {
        serde_json::to_string_pretty(&json!({ "config": cfg, "report": rep }))?
    } else {
        let mut s = format!(
            "config: C={} c={} D={} L={} G={} k={} s={} cab={}\n",
            cfg.hsi_bands,
            cfg.msi_bands,
            cfg.hidden,
            cfg.blocks,
            cfg.spline.grid_size,
            cfg.spline.order,
            cfg.scale,
            cfg.channel_attention
        );
        s += &format!("{:<16} {:>12}\n", "module", "params");
        for (name, n) in &rep.modules {
            s += &format!("{name:<16} {n:>12}\n");
        }
        s += &format!("{:<16} {:>12}\n", "total", rep.total);
        s += &format!("{:<16} {:>12}\n", "kan edges", rep.kan_edges);
        s += &format!("{:<16} {:>12}\n", "per unit G", rep.per_grid_unit);
        s += &format!("{:<16} {:>12}\n", "per unit k", rep.per_order_unit);
        s += &format!("forward MACs at {}x{}: {}", a.patch, a.patch, rep.forward_macs);
        s
    };
    println!("{text}");
    if let Some(dir) = &a.out {
        out_dir(dir)?;
        let mut man = RunManifest::new("report");
        if let Some(p) = &a.config {
            man.config_paths.insert("config".into(), p.clone());
        }
        man.effective_config = serde_json::to_value(&cfg)?;
        let p = dir.join(if a.json { "report.json" } else { "report.txt" });
        fs::write(&p, text + "\n")?;
        man.output(p);
        man.write(dir)?;
    }
    Ok(())
}
