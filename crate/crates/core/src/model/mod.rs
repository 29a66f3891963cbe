//! Dual-branch model: shared backbone `f`, scene-awareness module `theta`
//! (jointly normalized concatenation followed by an MLP) and a prototype header.
//!
//! ```text
//! v_x = f(X)   v_o = f(O)   v_s = detach(v_x)
//! origin = head(theta(v_x, v_s))      object = head(theta(v_o, v_s))
//! ```
//!
//! Evaluation reads only the object branch.

mod backbone;
mod checkpoint;
mod layers;
mod params;

use candle_core::{Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

pub use backbone::{Backbone, BackboneConfig, EncoderKind};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use layers::{l2_normalize, LayerNorm, Linear, Mlp};
pub use params::{Init, ParamStore};
pub use candle_core::DType;

/// Guard on the joint norm of `v_i ++ v_s`.
pub const INTERACTION_EPS: f64 = 1e-12;

/// Which training regime the model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both branches, scene-awareness module, object branch used for prediction.
    Mos,
    /// Single branch on object images, header directly on backbone features.
    ObjectOnly,
    /// Single branch on original images, header directly on backbone features.
    OriginOnly,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mos" => Ok(Variant::Mos),
            "object_only" | "object-only" => Ok(Variant::ObjectOnly),
            "origin_only" | "origin-only" => Ok(Variant::OriginOnly),
            other => Err(Error::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    /// Number of prototypes `K = |C_u|`.
    pub num_classes: usize,
    /// Projection dimension of the contrastive embedding `z`.
    pub proj_dim: usize,
    pub proj_hidden: usize,
    /// Projector depth of the single-branch header; the dual-branch header drops one layer.
    pub baseline_head_depth: usize,
    /// Hidden width of the scene-awareness MLP (default `2 d`).
    pub sa_hidden: Option<usize>,
    /// Layer-normalize the hidden activations of the scene-awareness MLP. Its input
    /// is unit-norm, so without this the hidden pre-activations are tiny.
    pub sa_layer_norm: bool,
    /// Temperature dividing prototype similarities into logits.
    pub logit_temperature: f64,
    /// When false the origin branch owns a separate scene-awareness module and header.
    pub shared_branch_weights: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mos,
            backbone: BackboneConfig::default(),
            num_classes: 8,
            proj_dim: 64,
            proj_hidden: 256,
            baseline_head_depth: 3,
            sa_hidden: None,
            sa_layer_norm: true,
            logit_temperature: 0.1,
            shared_branch_weights: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be > 0"));
        }
        if self.proj_dim == 0 || self.proj_hidden == 0 {
            return Err(Error::config("proj_dim", "projection sizes must be > 0"));
        }
        if self.sa_hidden == Some(0) {
            return Err(Error::config("sa_hidden", "must be > 0"));
        }
        if self.baseline_head_depth < 2 {
            return Err(Error::config("baseline_head_depth", "must be >= 2"));
        }
        if !(self.logit_temperature > 0.0) {
            return Err(Error::config("logit_temperature", "must be > 0"));
        }
        Ok(())
    }

    pub fn head_depth(&self) -> usize {
        match self.variant {
            Variant::Mos => self.baseline_head_depth - 1,
            _ => self.baseline_head_depth,
        }
    }

    pub fn sa_hidden(&self) -> usize {
        self.sa_hidden.unwrap_or(2 * self.backbone.dim)
    }
}

/// Output of the header for a batch.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Unit-norm projection used by the contrastive terms, `(B, p)`.
    pub z: Tensor,
    /// Cosine similarities against the unit-norm prototypes, `(B, K)`.
    pub cosine: Tensor,
    /// `cosine / logit_temperature`.
    pub logits: Tensor,
}

impl HeadOutput {
    pub fn detach(&self) -> HeadOutput {
        HeadOutput {
            z: self.z.detach(),
            cosine: self.cosine.detach(),
            logits: self.logits.detach(),
        }
    }
}

/// Per-image backbone features of one dual-branch pass, each `(B, d)`.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub v_x: Tensor,
    pub v_o: Tensor,
    pub v_s: Tensor,
}

#[derive(Debug, Clone)]
pub struct DualOutput {
    pub origin: HeadOutput,
    pub object: HeadOutput,
    pub features: FeatureBundle,
}

/// Header: projector MLP for `z`, cosine prototypes for classification.
#[derive(Debug, Clone)]
pub struct Header {
    projector: Mlp,
    prototypes: Tensor,
    temperature: f64,
}

impl Header {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.backbone.dim;
        let mut dims = vec![d];
        dims.extend(std::iter::repeat_n(cfg.proj_hidden, cfg.head_depth() - 1));
        dims.push(cfg.proj_dim);
        let projector = Mlp::new(store, &format!("{prefix}.projector"), &dims, rng)?;
        let prototypes = store.add(&format!("{prefix}.prototypes"), &[cfg.num_classes, d], Init::Normal(1.0), rng)?;
        Ok(Self {
            projector,
            prototypes,
            temperature: cfg.logit_temperature,
        })
    }

    pub fn projector_depth(&self) -> usize {
        self.projector.depth()
    }

    pub fn forward(&self, h: &Tensor) -> Result<HeadOutput> {
        let z = l2_normalize(&self.projector.forward(h)?, 1e-12)?;
        let embed = l2_normalize(h, 1e-12)?;
        let protos = l2_normalize(&self.prototypes, 1e-12)?;
        let cosine = embed.matmul(&protos.t()?)?;
        let logits = (&cosine / self.temperature)?;
        Ok(HeadOutput { z, cosine, logits })
    }
}

/// Scene-awareness module: `MLP((v_i ++ v_s) / ||v_i ++ v_s||)` with one hidden layer.
#[derive(Debug, Clone)]
pub struct SceneAwareness {
    hidden: Linear,
    norm: Option<LayerNorm>,
    out: Linear,
}

impl SceneAwareness {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.backbone.dim;
        let h = cfg.sa_hidden();
        let hidden = Linear::new(store, &format!("{prefix}.mlp.0"), 2 * d, h, rng)?;
        let norm = if cfg.sa_layer_norm {
            Some(LayerNorm::new(store, &format!("{prefix}.mlp.norm"), h, rng)?)
        } else {
            None
        };
        let out = Linear::new(store, &format!("{prefix}.mlp.1"), h, d, rng)?;
        Ok(Self { hidden, norm, out })
    }

    pub fn forward(&self, v_i: &Tensor, v_s: &Tensor) -> Result<Tensor> {
        let mut h = self.hidden.forward(&normalized_concat(v_i, v_s)?)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(&h)?;
        }
        self.out.forward(&h.gelu_erf()?)
    }
}

/// Row-wise `(v_i ++ v_s) / ||v_i ++ v_s||_2`; rows with joint norm below
/// [`INTERACTION_EPS`] are rejected.
pub fn normalized_concat(v_i: &Tensor, v_s: &Tensor) -> Result<Tensor> {
    if v_i.dims() != v_s.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", v_i.dims()),
            actual: format!("{:?}", v_s.dims()),
        });
    }
    let cat = Tensor::cat(&[v_i, v_s], D::Minus1)?;
    let norm = cat.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norm.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
    if !(min >= INTERACTION_EPS) {
        return Err(Error::Degenerate(format!(
            "joint feature norm {min:e} is below {INTERACTION_EPS:e}"
        )));
    }
    Ok(cat.broadcast_div(&norm)?)
}

/// Gradient-isolated copy of the original-image features, used as the scene feature.
pub fn scene_features(v_x: &Tensor) -> Tensor {
    v_x.detach()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Detach `v_x` and `v_o` where they enter the scene-awareness module, leaving
    /// only the scene path connected to the backbone. Used to probe gradient isolation.
    pub block_branch_paths: bool,
}

#[derive(Debug)]
pub struct MosModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    sa: Option<SceneAwareness>,
    head: Header,
    origin_modules: Option<(SceneAwareness, Header)>,
}

impl MosModel {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        rng.set_stream(3);
        let mut store = ParamStore::new(dtype);
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone, &mut rng)?;
        let (sa, origin_modules) = match config.variant {
            Variant::Mos => {
                let sa = SceneAwareness::new(&mut store, "sa", &config, &mut rng)?;
                let origin = if config.shared_branch_weights {
                    None
                } else {
                    Some((
                        SceneAwareness::new(&mut store, "origin_sa", &config, &mut rng)?,
                        Header::new(&mut store, "origin_head", &config, &mut rng)?,
                    ))
                };
                (Some(sa), origin)
            }
            _ => (None, None),
        };
        let head = Header::new(&mut store, "head", &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            sa,
            head,
            origin_modules,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn header(&self) -> &Header {
        &self.head
    }

    pub fn backbone_forward(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.forward(images)
    }

    /// Interaction plus header for one branch; `origin` selects the origin branch modules.
    pub fn branch_head(&self, v_i: &Tensor, v_s: &Tensor, origin: bool) -> Result<HeadOutput> {
        let (sa, head) = match (&self.origin_modules, origin) {
            (Some((sa, head)), true) => (sa, head),
            _ => (
                self.sa
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("variant has no scene-awareness module".into()))?,
                &self.head,
            ),
        };
        head.forward(&sa.forward(v_i, v_s)?)
    }

    pub fn interaction(&self, v_i: &Tensor, v_s: &Tensor) -> Result<Tensor> {
        self.sa
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("variant has no scene-awareness module".into()))?
            .forward(v_i, v_s)
    }

    pub fn forward_dual(&self, x: &Tensor, o: &Tensor) -> Result<DualOutput> {
        self.forward_dual_with(x, o, ForwardOptions::default())
    }

    pub fn forward_dual_with(&self, x: &Tensor, o: &Tensor, opts: ForwardOptions) -> Result<DualOutput> {
        if x.dims() != o.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", x.dims()),
                actual: format!("{:?}", o.dims()),
            });
        }
        let b = x.dim(0)?;
        let feats = self.backbone.forward(&Tensor::cat(&[x, o], 0)?)?;
        let v_x = feats.narrow(0, 0, b)?;
        let v_o = feats.narrow(0, b, b)?;
        let v_s = scene_features(&v_x);
        let (in_x, in_o) = if opts.block_branch_paths {
            (v_x.detach(), v_o.detach())
        } else {
            (v_x.clone(), v_o.clone())
        };
        let origin = self.branch_head(&in_x, &v_s, true)?;
        let object = self.branch_head(&in_o, &v_s, false)?;
        Ok(DualOutput {
            origin,
            object,
            features: FeatureBundle { v_x, v_o, v_s },
        })
    }

    /// Header applied directly to backbone features (single-branch variants).
    pub fn forward_single(&self, images: &Tensor) -> Result<(Tensor, HeadOutput)> {
        let v = self.backbone.forward(images)?;
        let out = self.head.forward(&v)?;
        Ok((v, out))
    }

    /// Prediction-time head output: object branch for MOS, the single branch otherwise.
    pub fn eval_output(&self, x: &Tensor, o: &Tensor) -> Result<(HeadOutput, FeatureBundle)> {
        match self.config.variant {
            Variant::Mos => {
                let out = self.forward_dual(x, o)?;
                Ok((out.object, out.features))
            }
            Variant::ObjectOnly | Variant::OriginOnly => {
                let b = x.dim(0)?;
                let feats = self.backbone.forward(&Tensor::cat(&[x, o], 0)?)?;
                let v_x = feats.narrow(0, 0, b)?;
                let v_o = feats.narrow(0, b, b)?;
                let input = if self.config.variant == Variant::ObjectOnly { &v_o } else { &v_x };
                let out = self.head.forward(input)?;
                let v_s = scene_features(&v_x);
                Ok((out, FeatureBundle { v_x, v_o, v_s }))
            }
        }
    }

    /// Predicted labels for aligned original/object images, processed in chunks of `batch`.
    pub fn predict(&self, originals: &[Image], objects: &[Image], batch: usize) -> Result<Vec<usize>> {
        Ok(self.infer(originals, objects, batch)?.labels)
    }

    /// Labels, embeddings and features for a set of images.
    pub fn infer(&self, originals: &[Image], objects: &[Image], batch: usize) -> Result<Inference> {
        if originals.len() != objects.len() {
            return Err(Error::InvalidArgument(format!(
                "{} original images but {} object images",
                originals.len(),
                objects.len()
            )));
        }
        let mut out = Inference::default();
        for (xs, os) in originals.chunks(batch.max(1)).zip(objects.chunks(batch.max(1))) {
            let x = images_to_tensor(xs, self.dtype(), self.config.backbone.input_size)?;
            let o = images_to_tensor(os, self.dtype(), self.config.backbone.input_size)?;
            let (head, feats) = self.eval_output(&x, &o)?;
            let logits = head.logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.labels.extend(logits.iter().map(|row| argmax_lowest(row)));
            out.z.extend(head.z.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            out.v_x.extend(feats.v_x.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            out.v_o.extend(feats.v_o.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// Load a checkpoint into a single-precision model.
pub fn load_model(path: &std::path::Path) -> Result<MosModel> {
    Checkpoint::load(path)?.build_model(DType::F32)
}

#[derive(Debug, Clone, Default)]
pub struct Inference {
    pub labels: Vec<usize>,
    pub z: Vec<Vec<f64>>,
    pub v_x: Vec<Vec<f64>>,
    pub v_o: Vec<Vec<f64>>,
}

/// Index of the maximum; exact ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stack images into a `(B, 3, H, W)` tensor, resizing to `size` when needed.
pub fn images_to_tensor(images: &[Image], dtype: DType, size: (usize, usize)) -> Result<Tensor> {
    let (h, w) = size;
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.shape() == size {
            data.extend_from_slice(img.as_slice());
        } else {
            data.extend_from_slice(img.resize(h, w).as_slice());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
