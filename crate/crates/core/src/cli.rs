//! Command-line front end: `gen-data`, `train`, `eval`, `analyze`, `export-embeddings`.
//!
//! Configuration precedence is flags > config file > built-in defaults.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    attach_scene_annotations, derive_base_scenes, gen_synthetic, load_dataset, load_scene_annotations, write_dataset,
    GcdSplit, SyntheticConfig,
};
use crate::decouple::MaskSource;
use crate::eval::{write_embeddings, EvalReport};
use crate::model::{Checkpoint, ModelConfig, MosModel, Variant};
use crate::train::{self, evaluate, prepare_samples, read_deviation_log, RunArtifacts, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mos", version, about = "Object-scene decoupled category discovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic object/scene dataset.
    GenData(GenDataArgs),
    /// Train a model described by a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the unlabeled part of a dataset.
    Eval(EvalArgs),
    /// Summarize the feature-deviation log of a run.
    Analyze(AnalyzeArgs),
    /// Write per-sample projection embeddings to CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML file with generator settings; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing dataset in `out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long, value_parser = parse_mask_source)]
    pub mask_source: Option<MaskSource>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Output directory, overriding `train.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Replace the artifacts of an existing run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Scene annotations (`id,scene` lines) enabling the quadrant breakdown.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_parser = parse_mask_source, default_value = "oracle")]
    pub mask_source: MaskSource,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory containing the deviation log.
    #[arg(long)]
    pub run: PathBuf,
    /// Curve output path (default `<run>/deviation_curve.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_mask_source, default_value = "oracle")]
    pub mask_source: MaskSource,
}

fn parse_mask_source(s: &str) -> std::result::Result<MaskSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Full description of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest; relative paths resolve against the config file's directory.
    pub data: PathBuf,
    /// Optional scene annotations replacing the manifest's scene column.
    pub annotations: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/manifest.csv"),
            annotations: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::config("config", e.to_string()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Read a config file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = parse_toml(&read_text(path)?, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data = resolve(base, &cfg.data);
        cfg.annotations = cfg.annotations.map(|a| resolve(base, &a));
        cfg.train.output_dir = resolve(base, &cfg.train.output_dir);
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, a: &TrainArgs) {
        let t = &mut self.train;
        if let Some(s) = a.seed {
            t.seed = s;
            self.model.init_seed = s;
        }
        if let Some(e) = a.epochs {
            t.epochs = e;
        }
        if let Some(l) = a.lambda1 {
            t.hyperparams.lambda_origin = l;
        }
        if let Some(l) = a.lambda2 {
            t.hyperparams.lambda_object = l;
        }
        if let Some(m) = a.mask_source {
            t.mask_source = m;
        }
        if let Some(e) = a.eval_every {
            t.eval_every = e;
        }
        if let Some(v) = a.variant {
            self.model.variant = v;
        }
        if let Some(o) = &a.out {
            t.output_dir = o.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Record of a training run written to `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Effective configuration as TOML, including command-line overrides.
    pub config_echo: String,
    pub artifacts: RunArtifacts,
    pub config_path: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Short content hash of the effective configuration.
pub fn run_id(config_echo: &str) -> String {
    let digest = Sha256::digest(config_echo.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Load a dataset and attach scene annotations and base scenes when available.
pub fn load_split(manifest: &Path, annotations: Option<&Path>, base_scene_min_count: usize) -> Result<GcdSplit> {
    let mut split = load_dataset(manifest)?.split;
    if let Some(path) = annotations {
        let ann = load_scene_annotations(path)?;
        for s in split.labeled.iter_mut().chain(split.unlabeled.iter_mut()) {
            s.scene_label = None;
        }
        attach_scene_annotations(split.labeled.iter_mut().chain(split.unlabeled.iter_mut()), &ann)?;
    }
    if split.samples().any(|s| s.scene_label.is_some()) {
        split.base_scenes = Some(derive_base_scenes(&split, base_scene_min_count)?);
    }
    Ok(split)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<String> {
    let mut cfg = match &args.config {
        Some(p) => parse_toml::<SyntheticConfig>(&read_text(p)?, p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let manifest = args.out.join("manifest.csv");
    if manifest.exists() && !args.force {
        return Err(Error::config(
            "out",
            format!("{} already holds a dataset; pass --force to replace it", args.out.display()),
        ));
    }
    if args.force && args.out.join("images").exists() {
        let dir = args.out.join("images");
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(format!("removing {}", dir.display()), e))?;
    }
    let (_, split) = gen_synthetic(&cfg)?;
    let names: Vec<String> = (0..cfg.n_scene_classes).map(|i| format!("scene{i}")).collect();
    let files = write_dataset(&args.out, &split, &names)?;
    write_text(&args.out.join("generator.toml"), &to_toml(&cfg)?)?;
    Ok(format!(
        "wrote {} images ({} labeled, {} unlabeled), {} masks, {} base / {} classes to {}",
        files.images,
        split.labeled.len(),
        split.unlabeled.len(),
        files.masks,
        split.base_classes.len(),
        split.all_classes.len(),
        args.out.display()
    ))
}

/// Resolve the effective config for `train`, returning it with its TOML echo.
pub fn effective_train_config(args: &TrainArgs) -> Result<(RunConfig, String)> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_overrides(args);
    cfg.validate()?;
    let echo = to_toml(&cfg)?;
    Ok((cfg, echo))
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let started = now();
    let (cfg, echo) = effective_train_config(args)?;
    let out = cfg.train.output_dir.clone();
    let metrics = out.join(train::METRICS_FILE);
    if args.resume.is_none() && metrics.exists() {
        if !args.force {
            return Err(Error::config(
                "output_dir",
                format!("{} already contains a run; pass --force or --resume", out.display()),
            ));
        }
        for f in [train::METRICS_FILE, train::DEVIATION_FILE] {
            let _ = std::fs::remove_file(out.join(f));
        }
        for d in ["eval", "checkpoints"] {
            let _ = std::fs::remove_dir_all(out.join(d));
        }
    }
    let split = load_split(&cfg.data, cfg.annotations.as_deref(), cfg.train.base_scene_min_count)?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.num_classes < split.num_classes() {
        return Err(Error::config(
            "model.num_classes",
            format!("dataset needs {} prototypes", split.num_classes()),
        ));
    }
    model_cfg.validate()?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        model_cfg = ck.model_config.clone();
    }
    let model = MosModel::new(model_cfg, DType::F32)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write_text(&out.join("config.toml"), &echo)?;
    let outcome = train::train(&model, &split, &cfg.train, resume.as_ref())?;
    let manifest = RunManifest {
        run_id: run_id(&echo),
        config_echo: echo,
        artifacts: outcome.artifacts,
        config_path: args.config.clone(),
        started_unix: started,
        finished_unix: now(),
    };
    write_text(&out.join("run.json"), &serde_json::to_string_pretty(&manifest)?)?;
    let last = outcome.history.last();
    Ok(format!(
        "run {} finished at epoch {}: acc_all={} ({})",
        manifest.run_id,
        outcome.final_epoch,
        last.map_or("n/a".into(), |m| format!("{:.4}", m.eval.acc_all)),
        out.display()
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.4}", v))
}

/// Human-readable report: overall, base and novel accuracy plus the quadrant table.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = format!(
        "All {:.4}  Base {}  Novel {}  (n={}, base={}, novel={})\n",
        r.acc_all,
        fmt_opt(r.acc_base),
        fmt_opt(r.acc_novel),
        r.n_all,
        r.n_base,
        r.n_novel
    );
    match &r.quadrants {
        Some(q) => {
            s.push_str("quadrant              acc     n\n");
            for quad in crate::data::Quadrant::ALL {
                if let Some(e) = q.get(quad) {
                    s.push_str(&format!("{:<20} {:.4} {:>5}\n", quad.name(), e.acc, e.n));
                }
            }
        }
        None => s.push_str("scene annotations unavailable; quadrant table omitted\n"),
    }
    s
}

fn load_for_inference(checkpoint: &Path, manifest: &Path, annotations: Option<&Path>) -> Result<(MosModel, GcdSplit)> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.build_model(DType::F32)?;
    let min_count = ck
        .metadata
        .get("train_config")
        .and_then(|t| serde_json::from_str::<TrainConfig>(t).ok())
        .map_or(1, |t| t.base_scene_min_count);
    let split = load_split(manifest, annotations, min_count)?;
    if split.num_classes() > model.config().num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} prototypes but the dataset has {} classes",
            model.config().num_classes,
            split.num_classes()
        )));
    }
    Ok((model, split))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalReport, String)> {
    let (model, split) = load_for_inference(&args.checkpoint, &args.manifest, args.annotations.as_deref())?;
    let tc = TrainConfig {
        mask_source: args.mask_source,
        ..Default::default()
    };
    let samples = prepare_samples(&split, &tc)?;
    let unlabeled: Vec<_> = samples.iter().filter(|s| !s.labeled).collect();
    let (report, dev) = evaluate(&model, &unlabeled, &split.base_classes, tc.eval_batch_size, 0)?;
    let mut text = format_report(&report);
    text.push_str(&format!("mean_dev {:.6}  l1_dev {:.6}\n", dev.mean_dev, dev.l1_dev));
    if let Some(out) = &args.out {
        write_text(out, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok((report, text))
}

/// Summary of a deviation log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationSummary {
    pub initial_l1: f64,
    pub final_l1: f64,
    pub mean_dev_min: f64,
    pub mean_dev_max: f64,
    pub epochs: usize,
}

impl DeviationSummary {
    pub fn increased(&self) -> bool {
        self.final_l1 > self.initial_l1
    }

    pub fn mean_dev_range(&self) -> f64 {
        self.mean_dev_max - self.mean_dev_min
    }
}

/// Per-epoch means of a deviation log: `(epoch, mean_dev, l1_dev)`.
pub fn deviation_curve(rows: &[(usize, usize, f64, f64)]) -> Vec<(usize, f64, f64)> {
    let mut out: Vec<(usize, f64, f64, usize)> = Vec::new();
    for &(_, epoch, m, l1) in rows {
        match out.last_mut() {
            Some(last) if last.0 == epoch => {
                last.1 += m;
                last.2 += l1;
                last.3 += 1;
            }
            _ => out.push((epoch, m, l1, 1)),
        }
    }
    out.into_iter()
        .map(|(e, m, l1, n)| (e, m / n as f64, l1 / n as f64))
        .collect()
}

pub fn summarize_deviation(curve: &[(usize, f64, f64)]) -> Result<DeviationSummary> {
    let (first, last) = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidArgument("deviation log has no rows".into())),
    };
    Ok(DeviationSummary {
        initial_l1: first.2,
        final_l1: last.2,
        mean_dev_min: curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min),
        mean_dev_max: curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max),
        epochs: curve.len(),
    })
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(DeviationSummary, String)> {
    let log = args.run.join(train::DEVIATION_FILE);
    if !log.exists() {
        return Err(Error::io(
            format!("reading {}", log.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "deviation log missing"),
        ));
    }
    let curve = deviation_curve(&read_deviation_log(&log)?);
    let summary = summarize_deviation(&curve)?;
    let mut csv = String::from("epoch,mean_dev,l1_dev\n");
    for (e, m, l1) in &curve {
        csv.push_str(&format!("{e},{m},{l1}\n"));
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.join("deviation_curve.csv"));
    write_text(&out, &csv)?;
    let text = format!(
        "l1_dev initial {:.6} final {:.6} (increased: {}); mean_dev range [{:.6}, {:.6}] width {:.6} over {} epochs\ncurve written to {}",
        summary.initial_l1,
        summary.final_l1,
        summary.increased(),
        summary.mean_dev_min,
        summary.mean_dev_max,
        summary.mean_dev_range(),
        summary.epochs,
        out.display()
    );
    Ok((summary, text))
}

pub fn cmd_export(args: &ExportArgs) -> Result<String> {
    let (model, split) = load_for_inference(&args.checkpoint, &args.manifest, None)?;
    let tc = TrainConfig {
        mask_source: args.mask_source,
        ..Default::default()
    };
    let samples = prepare_samples(&split, &tc)?;
    let originals: Vec<_> = samples.iter().map(|s| s.original.clone()).collect();
    let objects: Vec<_> = samples.iter().map(|s| s.object.clone()).collect();
    let inf = model.infer(&originals, &objects, tc.eval_batch_size)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    write_embeddings(&args.out, &ids, &labels, &inf.z)?;
    Ok(format!("wrote {} embeddings to {}", ids.len(), args.out.display()))
}

/// Run a parsed command, returning the text to print.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a).map(|(_, t)| t),
        Command::Analyze(a) => cmd_analyze(a).map(|(_, t)| t),
        Command::ExportEmbeddings(a) => cmd_export(a),
    }
}
