//! Per-branch semi-supervised objective.
//!
//! Each branch combines four terms: supervised contrastive (`sup_nce`), prototype
//! cross-entropy on labels (`sup_cls`), cross-view InfoNCE (`un_nce`) and
//! sharpened teacher-student cross-entropy with a mean-entropy bonus (`un_cls`):
//!
//! ```text
//! L_branch = (1 - lambda) (un_nce + un_cls) + lambda (sup_nce + sup_cls)
//! L        = lambda1 L_origin + lambda2 L_object
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::{log_softmax, softmax};
use serde::{Deserialize, Serialize};

use crate::model::HeadOutput;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherWarmup {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Supervised/unsupervised balance `lambda`.
    pub lambda: f64,
    /// Origin-branch weight `lambda1`.
    pub lambda_origin: f64,
    /// Object-branch weight `lambda2`.
    pub lambda_object: f64,
    /// Unsupervised contrastive temperature.
    pub tau_u: f64,
    /// Supervised contrastive temperature.
    pub tau_c: f64,
    /// Student temperature of the distillation term.
    pub tau_s: f64,
    /// Teacher temperature after warmup.
    pub tau_t: f64,
    /// Weight of the mean-entropy maximization term.
    pub memax_weight: f64,
    pub teacher_warmup: TeacherWarmup,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda: 0.35,
            lambda_origin: 1.0,
            lambda_object: 1.0,
            tau_u: 0.07,
            tau_c: 1.0,
            tau_s: 0.1,
            tau_t: 0.07,
            memax_weight: 1.0,
            teacher_warmup: TeacherWarmup {
                start: 0.04,
                end: 0.07,
                epochs: 20,
            },
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must be in [0, 1]"));
        }
        for (name, v) in [("lambda_origin", self.lambda_origin), ("lambda_object", self.lambda_object)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        for (name, v) in [
            ("tau_u", self.tau_u),
            ("tau_c", self.tau_c),
            ("tau_s", self.tau_s),
            ("tau_t", self.tau_t),
            ("teacher_warmup.start", self.teacher_warmup.start),
            ("teacher_warmup.end", self.teacher_warmup.end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "temperature must be > 0"));
            }
        }
        if !(self.memax_weight >= 0.0) {
            return Err(Error::config("memax_weight", "must be >= 0"));
        }
        Ok(())
    }
}

/// The four terms of one branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub un_nce: T,
    pub un_cls: T,
    pub sup_nce: T,
    pub sup_cls: T,
}

impl LossParts<f64> {
    pub fn combine(&self, lambda: f64) -> f64 {
        (1.0 - lambda) * (self.un_nce + self.un_cls) + lambda * (self.sup_nce + self.sup_cls)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.un_nce, self.un_cls, self.sup_nce, self.sup_cls]
    }

    pub fn scaled_add(&mut self, other: &LossParts<f64>, w: f64) {
        self.un_nce += w * other.un_nce;
        self.un_cls += w * other.un_cls;
        self.sup_nce += w * other.sup_nce;
        self.sup_cls += w * other.sup_cls;
    }
}

impl LossParts<Tensor> {
    pub fn values(&self) -> Result<LossParts<f64>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossParts {
            un_nce: v(&self.un_nce)?,
            un_cls: v(&self.un_cls)?,
            sup_nce: v(&self.sup_nce)?,
            sup_cls: v(&self.sup_cls)?,
        })
    }
}

pub fn branch_loss(parts: &LossParts<Tensor>, lambda: f64) -> Result<Tensor> {
    let unsup = (&parts.un_nce + &parts.un_cls)?;
    let sup = (&parts.sup_nce + &parts.sup_cls)?;
    Ok(((unsup * (1.0 - lambda))? + (sup * lambda)?)?)
}

pub fn total_loss(origin: &Tensor, object: &Tensor, lambda_origin: f64, lambda_object: f64) -> Result<Tensor> {
    Ok(((origin * lambda_origin)? + (object * lambda_object)?)?)
}

pub fn total_loss_value(origin: f64, object: f64, lambda_origin: f64, lambda_object: f64) -> f64 {
    lambda_origin * origin + lambda_object * object
}

static SUPCON_WITHOUT_POSITIVES: AtomicU64 = AtomicU64::new(0);

/// Number of supervised-contrastive calls so far whose batch had no positive pair.
pub fn supcon_degenerate_batches() -> u64 {
    SUPCON_WITHOUT_POSITIVES.load(Ordering::Relaxed)
}

fn check_temperature(name: &str, t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be > 0, got {t}")));
    }
    Ok(())
}

fn zero_like(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

fn host_matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64, like: &Tensor) -> Result<Tensor> {
    let mut v = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            v.push(f(i, j));
        }
    }
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Supervised contrastive loss over unit-norm rows `z` with integer labels.
///
/// Each anchor contributes the mean negative log-probability of its positives
/// (same label, other index) against all other rows; anchors without positives
/// are skipped, and a batch with no positives at all yields 0.
pub fn sup_con_loss(z: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
    check_temperature("tau_c", tau)?;
    let n = z.dim(0)?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    let pos_count: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let valid = pos_count.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        SUPCON_WITHOUT_POSITIVES.fetch_add(1, Ordering::Relaxed);
        return zero_like(z);
    }
    let sim = (z.matmul(&z.t()?)? / tau)?;
    let logits = sim.broadcast_sub(&sim.max_keepdim(1)?.detach())?;
    let not_self = host_matrix(n, n, |i, j| (i != j) as u8 as f64, z)?;
    let pos_weight = host_matrix(
        n,
        n,
        |i, j| {
            if i != j && labels[i] == labels[j] {
                1.0 / (pos_count[i] as f64 * valid as f64)
            } else {
                0.0
            }
        },
        z,
    )?;
    let log_denom = (logits.exp()? * not_self)?.sum_keepdim(1)?.log()?;
    let log_prob = logits.broadcast_sub(&log_denom)?;
    Ok((log_prob * pos_weight)?.sum_all()?.neg()?)
}

/// Symmetric cross-view InfoNCE: row `i` of `z1` is positive with row `i` of `z2`,
/// every other row of the other view is a negative.
pub fn info_nce_loss(z1: &Tensor, z2: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature("tau_u", tau)?;
    if z1.dims() != z2.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z1.dims()),
            actual: format!("{:?}", z2.dims()),
        });
    }
    let b = z1.dim(0)?;
    if b < 2 {
        return Err(Error::InvalidArgument("InfoNCE needs a batch of at least 2 (no negatives)".into()));
    }
    let logits = (z1.matmul(&z2.t()?)? / tau)?;
    let eye = host_matrix(b, b, |i, j| (i == j) as u8 as f64, z1)?;
    let a = (log_softmax(&logits, D::Minus1)? * &eye)?.sum_all()?;
    let c = (log_softmax(&logits.t()?, D::Minus1)? * &eye)?.sum_all()?;
    Ok(((a + c)? / (-2.0 * b as f64))?)
}

fn one_hot(labels: &[usize], k: usize, like: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    host_matrix(labels.len(), k, |i, j| (labels[i] == j) as u8 as f64, like)
}

/// Mean softmax cross-entropy of `logits` (`(N, K)`) against `labels`.
pub fn sup_cls_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    if n == 0 {
        return zero_like(logits);
    }
    let target = one_hot(labels, k, logits)?;
    Ok(((log_softmax(logits, D::Minus1)? * target)?.sum_all()? / (-(n as f64)))?)
}

/// Teacher-student cross-entropy across views minus `memax_weight * H(mean student prediction)`.
///
/// `student[v]` and `teacher[v]` are prototype similarities for view `v`; the
/// teacher side is detached and sharpened with `tau_t`, the student uses `tau_s`.
pub fn self_distill_loss(
    student: [&Tensor; 2],
    teacher: [&Tensor; 2],
    tau_s: f64,
    tau_t: f64,
    memax_weight: f64,
) -> Result<Tensor> {
    check_temperature("tau_s", tau_s)?;
    check_temperature("tau_t", tau_t)?;
    let mut ce = zero_like(student[0])?;
    for (t, s) in [(0usize, 1usize), (1, 0)] {
        let q = softmax(&(teacher[t].detach() / tau_t)?, D::Minus1)?;
        let log_p = log_softmax(&(student[s] / tau_s)?, D::Minus1)?;
        let term = (q * log_p)?.sum(D::Minus1)?.mean_all()?.neg()?;
        ce = (ce + term)?;
    }
    let ce = (ce / 2.0)?;
    if memax_weight == 0.0 {
        return Ok(ce);
    }
    let all = Tensor::cat(&[student[0], student[1]], 0)?;
    let mean_p = softmax(&(all / tau_s)?, D::Minus1)?.mean(0)?;
    let entropy = (&mean_p * mean_p.clamp(1e-12, 1.0)?.log()?)?.sum_all()?.neg()?;
    Ok((ce - (entropy * memax_weight)?)?)
}

/// Inputs for one branch's loss on a batch of two augmented views.
pub struct BranchBatch<'a> {
    pub views: [&'a HeadOutput; 2],
    /// Prototype similarities acting as the teacher; detached inside the loss.
    pub teacher: [&'a Tensor; 2],
    pub labels: &'a [usize],
    pub labeled: &'a [bool],
}

fn select_rows(t: &Tensor, idx: &[u32]) -> Result<Tensor> {
    let ids = Tensor::from_slice(idx, idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

/// Evaluate all four terms of one branch. Every image takes part in the
/// unsupervised terms; labeled images additionally feed the supervised terms.
pub fn branch_terms(batch: &BranchBatch<'_>, hp: &Hyperparams, tau_t: f64) -> Result<LossParts<Tensor>> {
    let [v1, v2] = batch.views;
    let un_nce = info_nce_loss(&v1.z, &v2.z, hp.tau_u)?;
    let un_cls = self_distill_loss(
        [&v1.cosine, &v2.cosine],
        batch.teacher,
        hp.tau_s,
        tau_t,
        hp.memax_weight,
    )?;

    let idx: Vec<u32> = batch
        .labeled
        .iter()
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(i, _)| i as u32)
        .collect();
    let (sup_nce, sup_cls) = if idx.is_empty() {
        (zero_like(&v1.z)?, zero_like(&v1.z)?)
    } else {
        let labels: Vec<usize> = idx.iter().map(|&i| batch.labels[i as usize]).collect();
        let both: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let z = Tensor::cat(&[select_rows(&v1.z, &idx)?, select_rows(&v2.z, &idx)?], 0)?;
        let logits = Tensor::cat(&[select_rows(&v1.logits, &idx)?, select_rows(&v2.logits, &idx)?], 0)?;
        (sup_con_loss(&z, &both, hp.tau_c)?, sup_cls_loss(&logits, &both)?)
    };
    Ok(LossParts {
        un_nce,
        un_cls,
        sup_nce,
        sup_cls,
    })
}
