//! Procedural object-on-scene benchmark with exact object masks.
//!
//! Scenes are oriented two-tone stripe textures whose orientation and hue depend on
//! the scene class; their mean color is the same for every scene. Objects are
//! bright glyphs. Object classes come in pairs `(2j, 2j+1)` that share glyph shape
//! `j` and differ only by a small hue offset, so their home scenes
//! (`k mod n_scene_classes`) carry information the glyph alone resolves poorly.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_gcd_split, make_gcd_split_with_base, GcdSplit, Sample};
use crate::decouple::{MaskSource, SaliencyMask};
use crate::image::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_object_classes: usize,
    pub n_scene_classes: usize,
    pub image_size: (usize, usize),
    pub samples_per_class: usize,
    /// Probability that a sample is drawn in its object's home scene.
    pub correlation: f64,
    pub seed: u64,
    pub base_class_fraction: f64,
    /// Explicit base classes; overrides `base_class_fraction` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_classes: Option<Vec<usize>>,
    pub labeled_fraction: f64,
    /// Glyph radius as a fraction of the shorter image side.
    pub glyph_scale: f64,
    /// Hue distance (fraction of the color wheel) between the two classes sharing a glyph shape.
    pub pair_hue_offset: f64,
    /// Per-sample standard deviation of glyph hue.
    pub hue_jitter: f64,
    /// Amplitude of the scene stripe texture.
    pub scene_amplitude: f64,
    pub pixel_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_object_classes: 8,
            n_scene_classes: 4,
            image_size: (64, 64),
            samples_per_class: 40,
            correlation: 0.9,
            seed: 0,
            base_class_fraction: 0.5,
            base_classes: None,
            labeled_fraction: 0.5,
            glyph_scale: 0.17,
            pair_hue_offset: 0.06,
            hue_jitter: 0.02,
            scene_amplitude: 0.15,
            pixel_noise: 0.03,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_object_classes < 2 {
            return Err(Error::config("n_object_classes", "must be >= 2"));
        }
        if self.n_scene_classes < 2 {
            return Err(Error::config("n_scene_classes", "must be >= 2"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config("samples_per_class", "must be >= 2"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::config("correlation", "must be in [0, 1]"));
        }
        if !(self.base_class_fraction > 0.0 && self.base_class_fraction <= 1.0) {
            return Err(Error::config("base_class_fraction", "must be in (0, 1]"));
        }
        if let Some(base) = &self.base_classes {
            if base.is_empty() {
                return Err(Error::config("base_classes", "must not be empty"));
            }
            if let Some(&bad) = base.iter().find(|&&c| c >= self.n_object_classes) {
                return Err(Error::config(
                    "base_classes",
                    format!("class {bad} out of range for {} classes", self.n_object_classes),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::config("labeled_fraction", "must be in [0, 1]"));
        }
        let min_side = self.image_size.0.min(self.image_size.1) as f64;
        let max_radius = self.glyph_scale * 1.1 * min_side;
        if self.glyph_scale <= 0.0 || 2.0 * max_radius + 2.0 > min_side {
            return Err(Error::config(
                "glyph_scale",
                format!("glyph diameter {:.1}px does not fit a {min_side}px image", 2.0 * max_radius),
            ));
        }
        for (name, v) in [
            ("pair_hue_offset", self.pair_hue_offset),
            ("hue_jitter", self.hue_jitter),
            ("scene_amplitude", self.scene_amplitude),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

pub fn home_scene(object_class: usize, n_scene_classes: usize) -> usize {
    object_class % n_scene_classes
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Glyph membership in normalized coordinates `(u, v) in [-1, 1]^2`.
fn glyph_contains(shape: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    match shape % 8 {
        0 => r2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => (-0.85..=0.85).contains(&v) && u.abs() <= (v + 0.85) / 1.7,
        3 => (u.abs() <= 0.3 || v.abs() <= 0.3) && u.abs().max(v.abs()) <= 1.0,
        4 => (0.3..=1.0).contains(&r2),
        5 => u.abs() + v.abs() <= 1.0,
        6 => ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35) && r2 <= 1.0,
        _ => u.abs() <= 0.9 && (v.abs() <= 0.25 || (0.55..=0.9).contains(&v.abs())),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f32 = rng.random::<f32>().max(1e-7);
    let u2: f32 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn draw_scene(cfg: &SyntheticConfig, object_class: usize, rng: &mut ChaCha8Rng) -> usize {
    let home = home_scene(object_class, cfg.n_scene_classes);
    if rng.random::<f64>() < cfg.correlation {
        home
    } else {
        let k = rng.random_range(0..cfg.n_scene_classes - 1);
        if k >= home {
            k + 1
        } else {
            k
        }
    }
}

fn render(cfg: &SyntheticConfig, object_class: usize, scene: usize, rng: &mut ChaCha8Rng) -> (Image, SaliencyMask) {
    let (h, w) = cfg.image_size;
    let n_scenes = cfg.n_scene_classes as f32;

    let angle = PI * scene as f32 / n_scenes + 0.08 * gaussian(rng);
    let period = rng.random_range(6.0f32..12.0);
    let phase = rng.random_range(0.0f32..2.0 * PI);
    let tone = hsv_to_rgb(scene as f32 / n_scenes, 0.8, 1.0);
    let tone_mean = tone.iter().sum::<f32>() / 3.0;
    let amp = cfg.scene_amplitude as f32;
    let (ca, sa) = (angle.cos(), angle.sin());

    let shape = object_class / 2;
    let n_shapes = cfg.n_object_classes.div_ceil(2) as f32;
    let variant = if object_class % 2 == 0 { -0.5 } else { 0.5 };
    let hue = shape as f32 / n_shapes
        + variant * cfg.pair_hue_offset as f32
        + cfg.hue_jitter as f32 * gaussian(rng);
    let glyph_rgb = hsv_to_rgb(hue, 0.75, 0.95);

    let min_side = h.min(w) as f32;
    let radius = cfg.glyph_scale as f32 * min_side * rng.random_range(0.9f32..1.1);
    let center = |len: usize, rng: &mut ChaCha8Rng| {
        let len = len as f32;
        let lo = radius.max(0.3 * len);
        let hi = (len - 1.0 - radius).min(0.7 * len);
        if lo < hi {
            rng.random_range(lo..hi)
        } else {
            len / 2.0
        }
    };
    let cy = center(h, rng);
    let cx = center(w, rng);

    let mask = SaliencyMask::from_fn(h, w, MaskSource::Oracle, |y, x| {
        glyph_contains(shape, (x as f32 - cx) / radius, (y as f32 - cy) / radius)
    });

    let noise = cfg.pixel_noise as f32;
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let fg = mask.get(y, x);
            let wave = (phase + 2.0 * PI * (x as f32 * ca + y as f32 * sa) / period).sin();
            for c in 0..3 {
                let base = if fg {
                    glyph_rgb[c]
                } else {
                    0.35 + amp * wave * (0.5 + tone[c] - tone_mean)
                };
                img.set(c, y, x, (base + noise * gaussian(rng)).clamp(0.0, 1.0));
            }
        }
    }
    (img, mask)
}

/// Generate the benchmark and its GCD split. Deterministic for a given config.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<Sample>, GcdSplit)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut samples = Vec::with_capacity(cfg.n_object_classes * cfg.samples_per_class);
    for class in 0..cfg.n_object_classes {
        for i in 0..cfg.samples_per_class {
            let scene = draw_scene(cfg, class, &mut rng);
            let (image, mask) = render(cfg, class, scene, &mut rng);
            let sample = Sample::new(format!("s{class:03}_{i:04}"), image, class)
                .with_scene(scene)
                .with_oracle_mask(mask)?;
            samples.push(sample);
        }
    }
    let split = match &cfg.base_classes {
        Some(base) => make_gcd_split_with_base(
            samples.clone(),
            base.iter().copied().collect(),
            cfg.labeled_fraction,
            cfg.seed,
        )?,
        None => make_gcd_split(
            samples.clone(),
            cfg.base_class_fraction,
            cfg.labeled_fraction,
            cfg.seed,
        )?,
    };
    Ok((samples, split))
}
