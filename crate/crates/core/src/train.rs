//! Training loop: paired augmentation, schedules, SGD with momentum,
//! checkpointing, metrics and deviation logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{quadrant_of, GcdSplit, Quadrant, Sample};
use crate::decouple::{decouple, heuristic_mask, load_mask, FillMode, HeuristicMaskConfig, MaskSource, SaliencyMask};
use crate::eval::{cluster_acc, feature_deviation, quadrant_report, DeviationStats, EvalReport};
use crate::image::Image;
use crate::losses::{branch_loss, branch_terms, total_loss, BranchBatch, Hyperparams, LossParts, TeacherWarmup};
use crate::model::{images_to_tensor, Checkpoint, HeadOutput, MosModel, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Area fraction range of the random resized crop.
    pub scale: (f64, f64),
    /// Aspect ratio range of the random resized crop.
    pub ratio: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.3, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

/// One draw of augmentation parameters, applicable to any image of the same size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub top: f32,
    pub left: f32,
    pub crop_h: f32,
    pub crop_w: f32,
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl AugmentParams {
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let area = (height * width) as f64;
        let (log_lo, log_hi) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
        let mut crop = None;
        for _ in 0..10 {
            let target = area * rng.random_range(cfg.scale.0..=cfg.scale.1);
            let aspect = rng.random_range(log_lo..=log_hi).exp();
            let w = (target * aspect).sqrt().round() as usize;
            let h = (target / aspect).sqrt().round() as usize;
            if (1..=width).contains(&w) && (1..=height).contains(&h) {
                let top = rng.random_range(0..=height - h);
                let left = rng.random_range(0..=width - w);
                crop = Some((top, left, h, w));
                break;
            }
        }
        let (top, left, h, w) = crop.unwrap_or((0, 0, height, width));
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let mut factor = |s: f64| {
            if s > 0.0 {
                rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32
            } else {
                1.0
            }
        };
        let brightness = factor(cfg.brightness);
        let contrast = factor(cfg.contrast);
        let saturation = factor(cfg.saturation);
        Self {
            top: top as f32,
            left: left as f32,
            crop_h: h as f32,
            crop_w: w as f32,
            flip,
            brightness,
            contrast,
            saturation,
        }
    }

    /// Crop, flip, resize to `out`, then brightness, contrast and saturation jitter,
    /// clipping to `[0, 1]` after each color step.
    pub fn apply(&self, image: &Image, out: (usize, usize)) -> Image {
        let mut img = image.crop_resize(self.top, self.left, self.crop_h, self.crop_w, out.0, out.1, self.flip);
        scale_all(&mut img, self.brightness);
        let n = img.pixel_count() as f32;
        let gray_mean = gray(&img).iter().sum::<f32>() / n;
        blend_all(&mut img, |_| gray_mean, self.contrast);
        let g = gray(&img);
        blend_all(&mut img, |i| g[i], self.saturation);
        img
    }
}

fn gray(img: &Image) -> Vec<f32> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    (0..r.len()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
}

fn scale_all(img: &mut Image, f: f32) {
    for c in 0..3 {
        for v in img.channel_mut(c).iter_mut() {
            *v *= f;
        }
    }
    img.clamp01();
}

fn blend_all(img: &mut Image, target: impl Fn(usize) -> f32, f: f32) {
    for c in 0..3 {
        for (i, v) in img.channel_mut(c).iter_mut().enumerate() {
            let t = target(i);
            *v = t + f * (*v - t);
        }
    }
    img.clamp01();
}

/// Two independent augmented views of one image.
pub fn augment(image: &Image, cfg: &AugmentConfig, out: (usize, usize), rng: &mut impl Rng) -> (Image, Image) {
    let (h, w) = image.shape();
    let p1 = AugmentParams::sample(cfg, h, w, rng);
    let p2 = AugmentParams::sample(cfg, h, w, rng);
    (p1.apply(image, out), p2.apply(image, out))
}

/// Two views of an original/object pair; each view uses one parameter draw for
/// both images so they stay pixel-aligned.
pub fn augment_pair(
    original: &Image,
    object: &Image,
    cfg: &AugmentConfig,
    out: (usize, usize),
    rng: &mut impl Rng,
) -> [(Image, Image); 2] {
    let (h, w) = original.shape();
    let p1 = AugmentParams::sample(cfg, h, w, rng);
    let p2 = AugmentParams::sample(cfg, h, w, rng);
    [
        (p1.apply(original, out), p1.apply(object, out)),
        (p2.apply(original, out), p2.apply(object, out)),
    ]
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Teacher temperature for a 0-based epoch: linear from `start` to `end` over
/// `epochs`, then constant.
pub fn tau_t_schedule(epoch: usize, warmup: &TeacherWarmup) -> f64 {
    if warmup.epochs == 0 || epoch >= warmup.epochs {
        return warmup.end;
    }
    warmup.start + (warmup.end - warmup.start) * epoch as f64 / warmup.epochs as f64
}

/// Teacher temperature used in a 0-based epoch: the warmup schedule, or the
/// constant `tau_t` when warmup is disabled.
pub fn teacher_tau(hp: &Hyperparams, epoch: usize) -> f64 {
    if hp.teacher_warmup.epochs == 0 {
        hp.tau_t
    } else {
        tau_t_schedule(epoch, &hp.teacher_warmup)
    }
}

/// SGD with momentum and coupled weight decay: `v = m v + (g + wd w)`, `w -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn load_state(&mut self, state: BTreeMap<String, Tensor>) {
        self.velocity = state;
    }

    pub fn step(&mut self, model: &MosModel, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in model.params().iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor().detach();
            let g = g.detach();
            let g = if self.weight_decay != 0.0 {
                (g + (&w * self.weight_decay)?)?
            } else {
                g
            };
            let v = match self.velocity.get(name) {
                Some(prev) if self.momentum != 0.0 => ((prev.to_dtype(g.dtype())? * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(&w - (&v * lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hyperparams: Hyperparams,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mask_source: MaskSource,
    pub fill_mode: FillMode,
    pub heuristic: HeuristicMaskConfig,
    pub augment: AugmentConfig,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Save a resumable checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Labeled-scene count for a scene to count as base in the quadrant breakdown.
    pub base_scene_min_count: usize,
    pub eval_batch_size: usize,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams::default(),
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            mask_source: MaskSource::Oracle,
            fill_mode: FillMode::PerChannel,
            heuristic: HeuristicMaskConfig::default(),
            augment: AugmentConfig::default(),
            eval_every: 1,
            checkpoint_every: 0,
            base_scene_min_count: 1,
            eval_batch_size: 128,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.eval_every < 1 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        if self.eval_batch_size < 1 {
            return Err(Error::config("eval_batch_size", "must be >= 1"));
        }
        let a = &self.augment;
        if !(0.0 < a.scale.0 && a.scale.0 <= a.scale.1 && a.scale.1 <= 1.0) {
            return Err(Error::config("augment.scale", "must satisfy 0 < lo <= hi <= 1"));
        }
        if !(0.0 < a.ratio.0 && a.ratio.0 <= a.ratio.1) {
            return Err(Error::config("augment.ratio", "must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// One sample with its object image precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub original: Image,
    pub object: Image,
    pub label: usize,
    pub labeled: bool,
    pub quadrant: Option<Quadrant>,
}

pub fn resolve_mask(sample: &Sample, source: MaskSource, heuristic: &HeuristicMaskConfig) -> Result<SaliencyMask> {
    let shape = sample.image.shape();
    match source {
        MaskSource::Oracle => sample
            .oracle_mask
            .clone()
            .ok_or_else(|| Error::MaskUnavailable(sample.id.clone())),
        MaskSource::File => {
            let path = sample
                .mask_path
                .as_ref()
                .ok_or_else(|| Error::MaskUnavailable(sample.id.clone()))?;
            load_mask(path, shape)
        }
        MaskSource::Heuristic => Ok(heuristic_mask(&sample.image, heuristic)),
    }
}

/// Compute object images for every sample of the split, labeled first.
pub fn prepare_samples(split: &GcdSplit, cfg: &TrainConfig) -> Result<Vec<PreparedSample>> {
    split
        .samples()
        .map(|s| {
            let mask = resolve_mask(s, cfg.mask_source, &cfg.heuristic)?;
            Ok(PreparedSample {
                id: s.id.clone(),
                original: s.image.clone(),
                object: decouple(&s.image, &mask, cfg.fill_mode)?,
                label: s.object_label,
                labeled: s.is_labeled,
                quadrant: if split.base_scenes.is_some() {
                    quadrant_of(s, split).ok()
                } else {
                    None
                },
            })
        })
        .collect()
}

/// Augmented tensors for one batch: `x`/`o` stack view 1 then view 2, `(2B, 3, H, W)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub o: Tensor,
    pub labels: Vec<usize>,
    pub labeled: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn build(
        samples: &[&PreparedSample],
        aug: Option<&AugmentConfig>,
        size: (usize, usize),
        dtype: DType,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut xs = [Vec::new(), Vec::new()];
        let mut os = [Vec::new(), Vec::new()];
        for s in samples {
            let views = match aug {
                Some(cfg) => augment_pair(&s.original, &s.object, cfg, size, rng),
                None => {
                    let x = s.original.resize(size.0, size.1);
                    let o = s.object.resize(size.0, size.1);
                    [(x.clone(), o.clone()), (x, o)]
                }
            };
            for (v, (x, o)) in views.into_iter().enumerate() {
                xs[v].push(x);
                os[v].push(o);
            }
        }
        let cat = |v: &[Vec<Image>; 2]| -> Result<Tensor> {
            let all: Vec<Image> = v[0].iter().chain(&v[1]).cloned().collect();
            images_to_tensor(&all, dtype, size)
        };
        Ok(Self {
            x: cat(&xs)?,
            o: cat(&os)?,
            labels: samples.iter().map(|s| s.label).collect(),
            labeled: samples.iter().map(|s| s.labeled).collect(),
        })
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub total: f64,
    pub origin: Option<LossParts<f64>>,
    pub object: Option<LossParts<f64>>,
    pub origin_loss: Option<f64>,
    pub object_loss: Option<f64>,
    pub lr: f64,
    pub tau_t: f64,
    pub deviation: Option<DeviationStats>,
    /// False when the step skipped the parameter update (all branch weights zero).
    pub updated: bool,
}

fn split_views(h: &HeadOutput, b: usize) -> Result<[HeadOutput; 2]> {
    let part = |start: usize| -> Result<HeadOutput> {
        Ok(HeadOutput {
            z: h.z.narrow(0, start, b)?,
            cosine: h.cosine.narrow(0, start, b)?,
            logits: h.logits.narrow(0, start, b)?,
        })
    };
    Ok([part(0)?, part(b)?])
}

fn branch(
    out: &HeadOutput,
    batch: &Batch,
    hp: &Hyperparams,
    tau_t: f64,
) -> Result<(Tensor, LossParts<Tensor>)> {
    let views = split_views(out, batch.len())?;
    let parts = branch_terms(
        &BranchBatch {
            views: [&views[0], &views[1]],
            teacher: [&views[0].cosine, &views[1].cosine],
            labels: &batch.labels,
            labeled: &batch.labeled,
        },
        hp,
        tau_t,
    )?;
    Ok((branch_loss(&parts, hp.lambda)?, parts))
}

fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn breakdown_text(r: &StepReport) -> String {
    let mut s = format!("total={}", r.total);
    for (name, p) in [("origin", &r.origin), ("object", &r.object)] {
        if let Some(p) = p {
            let _ = write!(
                s,
                " {name}[un_nce={} un_cls={} sup_nce={} sup_cls={}]",
                p.un_nce, p.un_cls, p.sup_nce, p.sup_cls
            );
        }
    }
    s
}

/// Forward both views, evaluate the per-branch objectives and return the
/// differentiable total together with its breakdown. No update is applied.
pub fn compute_loss(
    model: &MosModel,
    batch: &Batch,
    hp: &Hyperparams,
    tau_t: f64,
    step: usize,
) -> Result<(Tensor, StepReport)> {
    let mut report = StepReport {
        step,
        total: 0.0,
        origin: None,
        object: None,
        origin_loss: None,
        object_loss: None,
        lr: 0.0,
        tau_t,
        deviation: None,
        updated: false,
    };
    let total = match model.config().variant {
        Variant::Mos => {
            let out = model.forward_dual(&batch.x, &batch.o)?;
            let (lo, po) = branch(&out.origin, batch, hp, tau_t)?;
            let (lb, pb) = branch(&out.object, batch, hp, tau_t)?;
            report.origin = Some(po.values()?);
            report.object = Some(pb.values()?);
            report.origin_loss = Some(scalar(&lo)?);
            report.object_loss = Some(scalar(&lb)?);
            report.deviation = Some(feature_deviation(
                &tensor_rows(&out.features.v_x)?,
                &tensor_rows(&out.features.v_o)?,
                step,
            )?);
            total_loss(&lo, &lb, hp.lambda_origin, hp.lambda_object)?
        }
        Variant::ObjectOnly => {
            let (_, out) = model.forward_single(&batch.o)?;
            let (l, p) = branch(&out, batch, hp, tau_t)?;
            report.object = Some(p.values()?);
            report.object_loss = Some(scalar(&l)?);
            l
        }
        Variant::OriginOnly => {
            let (_, out) = model.forward_single(&batch.x)?;
            let (l, p) = branch(&out, batch, hp, tau_t)?;
            report.origin = Some(p.values()?);
            report.origin_loss = Some(scalar(&l)?);
            l
        }
    };
    report.total = scalar(&total)?;
    Ok((total, report))
}

/// One optimizer update on `batch`. Aborts with the loss breakdown if the loss
/// is not finite. When both branch weights are zero the update is skipped.
pub fn train_step(
    model: &MosModel,
    opt: &mut Sgd,
    batch: &Batch,
    hp: &Hyperparams,
    lr: f64,
    tau_t: f64,
    step: usize,
) -> Result<StepReport> {
    let (loss, mut report) = compute_loss(model, batch, hp, tau_t, step)?;
    report.lr = lr;
    let finite = report.total.is_finite()
        && [&report.origin, &report.object]
            .iter()
            .filter_map(|p| p.as_ref())
            .all(|p| p.as_array().iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFiniteLoss {
            step,
            breakdown: breakdown_text(&report),
        });
    }
    let weighted = model.config().variant != Variant::Mos || hp.lambda_origin != 0.0 || hp.lambda_object != 0.0;
    if weighted {
        let grads = loss.backward()?;
        opt.step(model, &grads, lr)?;
        report.updated = true;
    }
    Ok(report)
}

/// Evaluate the prediction branch on `samples` (typically the unlabeled set).
pub fn evaluate(
    model: &MosModel,
    samples: &[&PreparedSample],
    base_classes: &std::collections::BTreeSet<usize>,
    batch: usize,
    step: usize,
) -> Result<(EvalReport, DeviationStats)> {
    let originals: Vec<Image> = samples.iter().map(|s| s.original.clone()).collect();
    let objects: Vec<Image> = samples.iter().map(|s| s.object.clone()).collect();
    let inf = model.infer(&originals, &objects, batch)?;
    let y_true: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut report = cluster_acc(&y_true, &inf.labels, base_classes, Some(model.config().num_classes))?;
    let quadrants: Vec<Option<Quadrant>> = samples.iter().map(|s| s.quadrant).collect();
    if quadrants.iter().any(Option::is_some) {
        report.quadrants = Some(quadrant_report(&y_true, &inf.labels, &quadrants, &report.matching)?);
    }
    let dev = feature_deviation(&inf.v_x, &inf.v_o, step)?;
    Ok((report, dev))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const DEVIATION_FILE: &str = "deviation.csv";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const DEVIATION_HEADER: &str = "step,epoch,mean_dev,l1_dev";

pub fn metrics_header() -> String {
    let mut cols = vec!["epoch".to_string(), "lr".into(), "tau_t".into(), "loss_total".into()];
    for b in ["origin", "object"] {
        for t in ["un_nce", "un_cls", "sup_nce", "sup_cls"] {
            cols.push(format!("{b}_{t}"));
        }
    }
    cols.extend(["acc_all", "acc_base", "acc_novel"].map(String::from));
    for q in Quadrant::ALL {
        cols.push(format!("acc_{}", q.tag()));
    }
    cols.extend(["mean_dev", "l1_dev"].map(String::from));
    cols.join(",")
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

/// Epoch-level record: mean losses over the epoch's steps plus evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub tau_t: f64,
    pub loss_total: f64,
    pub origin: Option<LossParts<f64>>,
    pub object: Option<LossParts<f64>>,
    pub eval: EvalReport,
    pub deviation: DeviationStats,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut f = vec![
            self.epoch.to_string(),
            format!("{}", self.lr),
            format!("{}", self.tau_t),
            format!("{}", self.loss_total),
        ];
        for p in [&self.origin, &self.object] {
            match p {
                Some(p) => f.extend(p.as_array().iter().map(|v| format!("{v}"))),
                None => f.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        f.push(format!("{}", self.eval.acc_all));
        f.push(opt_field(self.eval.acc_base));
        f.push(opt_field(self.eval.acc_novel));
        for q in Quadrant::ALL {
            f.push(opt_field(self.eval.quadrants.as_ref().and_then(|r| r.get(q)).map(|e| e.acc)));
        }
        f.push(format!("{}", self.deviation.mean_dev));
        f.push(format!("{}", self.deviation.l1_dev));
        f.join(",")
    }
}

/// Paths written by [`train`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub deviation_log: PathBuf,
    pub eval_reports: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifacts: RunArtifacts,
    pub history: Vec<EpochMetrics>,
    pub steps: Vec<StepReport>,
    pub final_epoch: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(format!("writing {}", path.display()), e)
}

/// Keep the header and rows whose leading integer column is `<= epoch_limit`
/// (column index `col`), so a resumed run appends after the checkpointed epoch.
fn truncate_log(path: &Path, header: &str, col: usize, epoch_limit: usize) -> Result<()> {
    let mut out = format!("{header}\n");
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let keep = line
                .split(',')
                .nth(col)
                .and_then(|v| v.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch_limit);
            if keep {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Deterministic shuffle of `0..n` for a 0-based epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> (Vec<usize>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    (order, rng)
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    let full = n / batch;
    if n % batch >= 2 { full + 1 } else { full }
}

/// Train `model` on `split`. When `resume` is given, parameters, optimizer
/// state and the epoch counter are restored from it and the logs are truncated
/// to that epoch before appending.
pub fn train(
    model: &MosModel,
    split: &GcdSplit,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.num_classes() > model.config().num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!(
                "dataset has {} classes but the model has {} prototypes",
                split.num_classes(),
                model.config().num_classes
            ),
        ));
    }
    let samples = prepare_samples(split, cfg)?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateSplit("need at least 2 training samples".into()));
    }
    let unlabeled: Vec<&PreparedSample> = samples.iter().filter(|s| !s.labeled).collect();
    if unlabeled.is_empty() {
        return Err(Error::DegenerateSplit("no unlabeled samples to evaluate".into()));
    }
    let size = model.config().backbone.input_size;
    let batch = cfg.batch_size.min(n);
    let spe = steps_per_epoch(n, batch);
    let total_steps = spe * cfg.epochs;

    let out = &cfg.output_dir;
    let ckpt_dir = out.join("checkpoints");
    let eval_dir = out.join("eval");
    for d in [out, &ckpt_dir, &eval_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut artifacts = RunArtifacts {
        metrics: out.join(METRICS_FILE),
        deviation_log: out.join(DEVIATION_FILE),
        final_checkpoint: ckpt_dir.join(FINAL_CHECKPOINT),
        ..Default::default()
    };

    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let start_epoch = match resume {
        Some(ckpt) => {
            if ckpt.model_config != *model.config() {
                return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
            }
            model.params().load(&ckpt.params)?;
            opt.load_state(ckpt.optimizer.clone());
            ckpt.epoch
        }
        None => 0,
    };
    if start_epoch > cfg.epochs {
        return Err(Error::config(
            "epochs",
            format!("checkpoint is at epoch {start_epoch}, beyond the configured {}", cfg.epochs),
        ));
    }
    truncate_log(&artifacts.metrics, &metrics_header(), 0, start_epoch)?;
    truncate_log(&artifacts.deviation_log, DEVIATION_HEADER, 1, start_epoch)?;

    let config_echo = serde_json::to_string(cfg)?;
    let mut history = Vec::new();
    let mut steps = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let tau_t = teacher_tau(&cfg.hyperparams, epoch);
        let (order, mut rng) = epoch_order(cfg.seed, epoch, n);
        let mut sums = (0.0, LossParts::<f64>::default(), LossParts::<f64>::default());
        let mut dev_rows = String::new();
        let mut lr = cfg.lr;
        for (k, chunk) in order.chunks(batch).enumerate().take(spe) {
            let step = epoch * spe + k;
            lr = cosine_lr(step, total_steps, cfg.lr);
            let items: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let b = Batch::build(&items, Some(&cfg.augment), size, model.dtype(), &mut rng)?;
            let r = train_step(model, &mut opt, &b, &cfg.hyperparams, lr, tau_t, step)?;
            sums.0 += r.total;
            if let Some(p) = &r.origin {
                sums.1.scaled_add(p, 1.0);
            }
            if let Some(p) = &r.object {
                sums.2.scaled_add(p, 1.0);
            }
            if let Some(d) = &r.deviation {
                let _ = writeln!(dev_rows, "{},{},{},{}", step, epoch + 1, d.mean_dev, d.l1_dev);
            }
            steps.push(r);
        }
        append(&artifacts.deviation_log, &dev_rows)?;

        let epoch_no = epoch + 1;
        let mean = |p: &LossParts<f64>| {
            let mut m = LossParts::default();
            m.scaled_add(p, 1.0 / spe as f64);
            m
        };
        let is_eval = epoch_no % cfg.eval_every == 0 || epoch_no == cfg.epochs;
        if is_eval {
            let (report, dev) = evaluate(model, &unlabeled, &split.base_classes, cfg.eval_batch_size, epoch_no * spe)?;
            let variant = model.config().variant;
            let m = EpochMetrics {
                epoch: epoch_no,
                lr,
                tau_t,
                loss_total: sums.0 / spe as f64,
                origin: (variant != Variant::ObjectOnly).then(|| mean(&sums.1)),
                object: (variant != Variant::OriginOnly).then(|| mean(&sums.2)),
                eval: report,
                deviation: dev,
            };
            append(&artifacts.metrics, &format!("{}\n", m.csv_row()))?;
            let path = eval_dir.join(format!("epoch_{epoch_no:03}.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(io_err(&path))?;
            artifacts.eval_reports.push(path);
            history.push(m);
        }

        let save = |path: &Path| -> Result<()> {
            let mut ckpt = Checkpoint::from_model(model, epoch_no)?;
            ckpt.optimizer = opt.state().clone();
            ckpt.metadata.insert("train_config".into(), config_echo.clone());
            ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
            ckpt.save(path)
        };
        if cfg.checkpoint_every > 0 && epoch_no % cfg.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("epoch_{epoch_no:03}.safetensors"));
            save(&path)?;
            artifacts.checkpoints.push(path);
        }
        if epoch_no == cfg.epochs {
            save(&artifacts.final_checkpoint)?;
        }
    }
    if start_epoch == cfg.epochs {
        let mut ckpt = Checkpoint::from_model(model, cfg.epochs)?;
        ckpt.optimizer = opt.state().clone();
        ckpt.metadata.insert("train_config".into(), config_echo);
        ckpt.save(&artifacts.final_checkpoint)?;
    }
    Ok(TrainOutcome {
        artifacts,
        history,
        steps,
        final_epoch: cfg.epochs,
    })
}

/// Rows of a deviation log: `(step, epoch, mean_dev, l1_dev)`.
pub fn read_deviation_log(path: &Path) -> Result<Vec<(usize, usize, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err("expected 4 columns"));
        }
        rows.push((
            f[0].parse().map_err(|_| parse_err("bad step"))?,
            f[1].parse().map_err(|_| parse_err("bad epoch"))?,
            f[2].parse().map_err(|_| parse_err("bad mean_dev"))?,
            f[3].parse().map_err(|_| parse_err("bad l1_dev"))?,
        ));
    }
    Ok(rows)
}
