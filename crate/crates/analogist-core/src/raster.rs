//! Minimal raster types and resampling.
//!
//! Pixels are f32 in [0, 1]. RGB data is interleaved row-major; masks are
//! single-channel. The std companion crate converts to and from 8-bit PNG.

use alloc::{format, vec, vec::Vec};

use crate::error::{Error, Result};

/// Interleaved RGB raster, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// len == h * w * 3
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x3 = {} values", h, w, h * w * 3),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Image { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        Image { h, w, data }
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.h == 0 || self.w == 0
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.w + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.w + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies `src` into this image with its top-left corner at (r0, c0).
    /// The source must fit entirely.
    pub fn blit(&mut self, src: &Image, r0: usize, c0: usize) {
        assert!(r0 + src.h <= self.h && c0 + src.w <= self.w, "blit out of bounds");
        for r in 0..src.h {
            let dst_off = ((r0 + r) * self.w + c0) * 3;
            let src_off = r * src.w * 3;
            self.data[dst_off..dst_off + src.w * 3]
                .copy_from_slice(&src.data[src_off..src_off + src.w * 3]);
        }
    }

    /// Extracts the rectangle of size (h, w) at (r0, c0).
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Image {
        assert!(r0 + h <= self.h && c0 + w <= self.w, "crop out of bounds");
        let mut out = Image::new(h, w);
        for r in 0..h {
            let src_off = ((r0 + r) * self.w + c0) * 3;
            let dst_off = r * w * 3;
            out.data[dst_off..dst_off + w * 3].copy_from_slice(&self.data[src_off..src_off + w * 3]);
        }
        out
    }

    pub fn clamp_in_place(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean absolute per-channel difference against another image of the
    /// same shape.
    pub fn mae(&self, other: &Image) -> f32 {
        assert_eq!(self.data.len(), other.data.len(), "mae shape mismatch");
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        (sum / self.data.len() as f64) as f32
    }
}

/// Single-channel raster with values in {0.0, 1.0}.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    /// len == h * w
    pub data: Vec<f32>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0.0; h * w] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Block-reduces to (h, w) taking the max of each block. Requires the
    /// mask dimensions to be multiples of the target.
    pub fn downsample_max(&self, h: usize, w: usize) -> Result<Mask> {
        if h == 0 || w == 0 || self.h % h != 0 || self.w % w != 0 {
            return Err(Error::InvalidInput(format!(
                "mask {}x{} not block-divisible to {}x{}",
                self.h, self.w, h, w
            )));
        }
        let (bh, bw) = (self.h / h, self.w / w);
        let mut out = Mask::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let mut m = 0.0f32;
                for dr in 0..bh {
                    for dc in 0..bw {
                        m = m.max(self.get(r * bh + dr, c * bw + dc));
                    }
                }
                out.data[r * w + c] = m;
            }
        }
        Ok(out)
    }
}

/// Bilinear resample to (h, w) with half-pixel centers (align_corners off).
///
/// An integer downscale of a constant image stays constant, and upsampling
/// is the smooth inverse used by the latent codec.
pub fn resize_bilinear(src: &Image, h: usize, w: usize) -> Result<Image> {
    if src.is_empty() {
        return Err(Error::InvalidInput("cannot resize an empty image".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("target size must be nonzero".into()));
    }
    if src.h == h && src.w == w {
        return Ok(src.clone());
    }
    let mut out = Image::new(h, w);
    let sy = src.h as f32 / h as f32;
    let sx = src.w as f32 / w as f32;
    for r in 0..h {
        let fy = ((r as f32 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy as usize).min(src.h - 1);
        let y1 = (y0 + 1).min(src.h - 1);
        let wy = fy - y0 as f32;
        for c in 0..w {
            let fx = ((c as f32 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx as usize).min(src.w - 1);
            let x1 = (x0 + 1).min(src.w - 1);
            let wx = fx - x0 as f32;
            let p00 = src.pixel(y0, x0);
            let p01 = src.pixel(y0, x1);
            let p10 = src.pixel(y1, x0);
            let p11 = src.pixel(y1, x1);
            let mut rgb = [0.0f32; 3];
            for k in 0..3 {
                let top = p00[k] * (1.0 - wx) + p01[k] * wx;
                let bot = p10[k] * (1.0 - wx) + p11[k] * wx;
                rgb[k] = top * (1.0 - wy) + bot * wy;
            }
            out.set_pixel(r, c, rgb);
        }
    }
    Ok(out)
}

/// Area-average downscale by an integer factor.
pub fn downsample_area(src: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || src.h % factor != 0 || src.w % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} not divisible by factor {}",
            src.h, src.w, factor
        )));
    }
    let (h, w) = (src.h / factor, src.w / factor);
    let mut out = Image::new(h, w);
    let norm = 1.0 / (factor * factor) as f32;
    for r in 0..h {
        for c in 0..w {
            let mut acc = [0.0f32; 3];
            for dr in 0..factor {
                for dc in 0..factor {
                    let p = src.pixel(r * factor + dr, c * factor + dc);
                    for k in 0..3 {
                        acc[k] += p[k];
                    }
                }
            }
            out.set_pixel(r, c, [acc[0] * norm, acc[1] * norm, acc[2] * norm]);
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB between two same-shape images
/// (peak = 1.0).
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "psnr shape mismatch");
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    -10.0 * num_traits::Float::log10(mse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = Image::filled(30, 20, [0.25, 0.5, 0.75]);
        let out = resize_bilinear(&img, 16, 16).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let p = out.pixel(r, c);
                assert!((p[0] - 0.25).abs() < 1e-6);
                assert!((p[1] - 0.5).abs() < 1e-6);
                assert!((p[2] - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_identity_is_exact() {
        let mut img = Image::new(8, 8);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 97) as f32 / 97.0;
        }
        let out = resize_bilinear(&img, 8, 8).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn empty_image_rejected() {
        let img = Image::new(0, 4);
        assert!(matches!(resize_bilinear(&img, 4, 4), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let mut img = Image::new(2, 2);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        img.set_pixel(0, 1, [0.0, 1.0, 0.0]);
        img.set_pixel(1, 0, [0.0, 0.0, 1.0]);
        img.set_pixel(1, 1, [1.0, 1.0, 1.0]);
        let out = downsample_area(&img, 2).unwrap();
        let p = out.pixel(0, 0);
        assert_eq!(p, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn mask_downsample_max_marks_any_hit() {
        let mut m = Mask::new(4, 4);
        m.data[3 * 4 + 3] = 1.0;
        let d = m.downsample_max(2, 2).unwrap();
        assert_eq!(d.data, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = Image::filled(4, 4, [0.3, 0.3, 0.3]);
        assert!(psnr(&img, &img).is_infinite());
    }
}
