//! Saliency masks and object extraction.
//!
//! The object image keeps foreground pixels and replaces the scene with a fill
//! value: `O = X * M + mu * (1 - M)`, where `mu` is the mean pixel value of `X`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::{load_gray8, Image, CHANNELS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Oracle,
    File,
    Heuristic,
}

impl std::str::FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(MaskSource::Oracle),
            "file" => Ok(MaskSource::File),
            "heuristic" => Ok(MaskSource::Heuristic),
            other => Err(Error::config(
                "mask_source",
                format!("expected oracle|file|heuristic, got `{other}`"),
            )),
        }
    }
}

/// Binary foreground map: 1 marks the object, 0 the scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    source: MaskSource,
}

impl SaliencyMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, source: MaskSource) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} mask"),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            source,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool, source: MaskSource) -> Self {
        Self {
            height,
            width,
            data: vec![value as u8; height * width],
            source,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        source: MaskSource,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
            source,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn with_source(mut self, source: MaskSource) -> Self {
        self.source = source;
        self
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn iou(&self, other: &SaliencyMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Nearest-neighbour resample, used when a stored mask must follow a resized image.
    pub fn resize(&self, out_h: usize, out_w: usize) -> SaliencyMask {
        if (out_h, out_w) == self.shape() {
            return self.clone();
        }
        SaliencyMask::from_fn(out_h, out_w, self.source, |y, x| {
            let sy = (y * self.height) / out_h;
            let sx = (x * self.width) / out_w;
            self.get(sy, sx)
        })
    }
}

/// How the scene fill value is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    #[default]
    PerChannel,
    Scalar,
}

/// Mean pixel value of the whole image, per channel (or one scalar broadcast to all channels).
pub fn mean_fill(image: &Image, mode: FillMode) -> Result<[f32; CHANNELS]> {
    if image.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty image".into()));
    }
    let n = image.pixel_count() as f64;
    let mut mu = [0f32; CHANNELS];
    for (c, m) in mu.iter_mut().enumerate() {
        let sum: f64 = image.channel(c).iter().map(|&v| v as f64).sum();
        *m = (sum / n) as f32;
    }
    if mode == FillMode::Scalar {
        let s = mu.iter().map(|&v| v as f64).sum::<f64>() / CHANNELS as f64;
        mu = [s as f32; CHANNELS];
    }
    Ok(mu)
}

pub fn extract_object(image: &Image, mask: &SaliencyMask, mu: [f32; CHANNELS]) -> Result<Image> {
    if image.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", image.shape()),
            actual: format!("{:?}", mask.shape()),
        });
    }
    let m = mask.as_slice();
    let mut out = image.clone();
    for (c, &fill) in mu.iter().enumerate() {
        for (v, &keep) in out.channel_mut(c).iter_mut().zip(m) {
            if keep == 0 {
                *v = fill;
            }
        }
    }
    Ok(out)
}

/// Mean fill followed by extraction.
pub fn decouple(image: &Image, mask: &SaliencyMask, mode: FillMode) -> Result<Image> {
    let mu = mean_fill(image, mode)?;
    extract_object(image, mask, mu)
}

/// Load an 8-bit grayscale mask; pixels `>= 128` are foreground.
pub fn load_mask(path: &Path, expected_shape: (usize, usize)) -> Result<SaliencyMask> {
    let (h, w, raw) = load_gray8(path)?;
    if (h, w) != expected_shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected_shape:?}"),
            actual: format!("{:?} in {}", (h, w), path.display()),
        });
    }
    let data = raw.into_iter().map(|v| (v >= 128) as u8).collect();
    SaliencyMask::new(h, w, data, MaskSource::File)
}

pub fn save_mask(path: &Path, mask: &SaliencyMask) -> Result<()> {
    let (h, w) = mask.shape();
    let data = mask.as_slice().iter().map(|&v| v * 255).collect();
    crate::image::save_gray8(path, h, w, data)
}

/// Parameters of the center-prior / contrast fallback mask. Not derived from any saliency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicMaskConfig {
    /// Pixels whose color distance from the image mean exceeds this quantile are salient.
    pub quantile: f64,
    /// Area fraction of the centered ellipse prior.
    pub ellipse_area: f64,
}

impl Default for HeuristicMaskConfig {
    fn default() -> Self {
        Self {
            quantile: 0.8,
            ellipse_area: 0.5,
        }
    }
}

pub fn heuristic_mask(image: &Image, cfg: &HeuristicMaskConfig) -> SaliencyMask {
    let (h, w) = image.shape();
    let mu = mean_fill(image, FillMode::PerChannel).unwrap_or([0.0; CHANNELS]);
    let mut dev = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d2: f32 = (0..CHANNELS)
                .map(|c| (image.get(c, y, x) - mu[c]).powi(2))
                .sum();
            dev.push(d2.sqrt());
        }
    }
    let mut sorted = dev.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = cfg.quantile.clamp(0.0, 1.0);
    let idx = ((sorted.len() - 1) as f64 * q).floor() as usize;
    let threshold = sorted[idx];

    // Ellipse with the image aspect ratio; area fraction a => semi-axes scaled by sqrt(4a/pi).
    let scale = (4.0 * cfg.ellipse_area.clamp(0.0, 1.0) / std::f64::consts::PI).sqrt();
    let ry = scale * h as f64 / 2.0;
    let rx = scale * w as f64 / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let ellipse = SaliencyMask::from_fn(h, w, MaskSource::Heuristic, |y, x| {
        let dy = (y as f64 - cy) / ry;
        let dx = (x as f64 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    });

    let combined = SaliencyMask::from_fn(h, w, MaskSource::Heuristic, |y, x| {
        dev[y * w + x] > threshold && ellipse.get(y, x)
    });
    if combined.foreground_count() == 0 {
        ellipse
    } else {
        combined
    }
}
