//! Planar RGB float images and raster file IO.

use std::path::Path;

use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// A 3-channel image stored channel-major (`[c][y][x]`), values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; CHANNELS])
    }

    pub fn filled(height: usize, width: usize, value: [f32; CHANNELS]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(plane * CHANNELS);
        for v in value {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {height}x{width}x3", height * width * CHANNELS),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.pixel_count();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.pixel_count();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample of the crop `[top, top+crop_h) x [left, left+crop_w)` (fractional
    /// coordinates allowed) resized to `out_h x out_w`, optionally mirrored horizontally.
    pub fn crop_resize(
        &self,
        top: f32,
        left: f32,
        crop_h: f32,
        crop_w: f32,
        out_h: usize,
        out_w: usize,
        flip: bool,
    ) -> Image {
        let sy = crop_h / out_h as f32;
        let sx = crop_w / out_w as f32;
        let max_y = (self.height - 1) as f32;
        let max_x = (self.width - 1) as f32;
        let mut out = Image::zeros(out_h, out_w);
        for oy in 0..out_h {
            let fy = (top + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let src_x = if flip { out_w - 1 - ox } else { ox };
                let fx = (left + (src_x as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..CHANNELS {
                    let top_row = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bottom_row = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.set(c, oy, ox, top_row * (1.0 - wy) + bottom_row * wy);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if (out_h, out_w) == self.shape() {
            return self.clone();
        }
        self.crop_resize(
            0.0,
            0.0,
            self.height as f32,
            self.width as f32,
            out_h,
            out_w,
            false,
        )
    }

    /// Quantize to 8-bit interleaved RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Build from 8-bit interleaved RGB, normalizing by 255.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes", height * width * CHANNELS),
                actual: format!("{} bytes", rgb.len()),
            });
        }
        Ok(Image::from_fn(height, width, |c, y, x| {
            rgb[(y * width + x) * CHANNELS + c] as f32 / 255.0
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_rgb8(h as usize, w as usize, img.as_raw())
    }
}

/// Read a single-channel 8-bit raster.
pub fn load_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::io(
            format!("reading {}", path.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let img = ::image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn save_gray8(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<()> {
    let buf = ::image::GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::InvalidArgument("gray buffer length mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}
