//! Image / latent codecs.
//!
//! Two built-in toy codecs stand in for a learned autoencoder:
//!
//! * [`Codec::Bilinear8`] — area downsample by 8 into the first three latent
//!   channels (RGB in [0, 1]), zero fourth channel; decode is a bilinear
//!   upsample with clamping. Lossy but smooth.
//! * [`Codec::SpaceToDepth2`] — factor-2 space-to-depth of the luminance
//!   channel. Round-trips grayscale content exactly, which makes it the
//!   codec of choice for bit-exactness tests.
//!
//! [`LatentCodec`] is the adapter contract an external autoencoder must
//! satisfy to slot into the pipeline.

use alloc::{format, string::String, vec::Vec};

use crate::error::{Error, Result};
use crate::raster::{downsample_area, resize_bilinear, Image};
use crate::tensor::Latent;

/// Contract for anything that maps images into 4-channel latents and back.
pub trait LatentCodec {
    /// Spatial shrink factor between image and latent.
    fn scale_factor(&self) -> usize;
    /// Encodes to a batch-1 latent. Image sides must divide by the factor.
    fn encode(&self, image: &Image) -> Result<Latent<f32>>;
    /// Decodes a batch-1 latent to an image clamped to [0, 1].
    fn decode(&self, latent: &Latent<f32>) -> Result<Image>;
}

/// Built-in toy codecs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Bilinear8,
    SpaceToDepth2,
}

impl Codec {
    pub fn name(&self) -> &'static str {
        match self {
            Codec::Bilinear8 => "bilinear8",
            Codec::SpaceToDepth2 => "s2d2",
        }
    }

    pub fn from_name(name: &str) -> Result<Codec> {
        match name {
            "bilinear8" => Ok(Codec::Bilinear8),
            "s2d2" => Ok(Codec::SpaceToDepth2),
            other => Err(Error::InvalidConfig(format!("unknown codec {other:?}"))),
        }
    }
}

fn check_divisible(image: &Image, factor: usize) -> Result<()> {
    if image.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty image".into()));
    }
    if image.h % factor != 0 || image.w % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} not divisible by codec factor {factor}",
            image.h, image.w
        )));
    }
    Ok(())
}

impl LatentCodec for Codec {
    fn scale_factor(&self) -> usize {
        match self {
            Codec::Bilinear8 => 8,
            Codec::SpaceToDepth2 => 2,
        }
    }

    fn encode(&self, image: &Image) -> Result<Latent<f32>> {
        let factor = self.scale_factor();
        check_divisible(image, factor)?;
        let (h, w) = (image.h / factor, image.w / factor);
        let mut latent = Latent::zeros(1, h, w);
        match self {
            Codec::Bilinear8 => {
                let small = downsample_area(image, factor)?;
                for ch in 0..3 {
                    for p in 0..h * w {
                        latent.data[ch * h * w + p] = small.data[p * 3 + ch];
                    }
                }
            }
            Codec::SpaceToDepth2 => {
                for r in 0..h {
                    for c in 0..w {
                        for dr in 0..2 {
                            for dc in 0..2 {
                                let px = image.pixel(2 * r + dr, 2 * c + dc);
                                let luma = (px[0] + px[1] + px[2]) / 3.0;
                                let ch = dr * 2 + dc;
                                latent.data[ch * h * w + r * w + c] = luma;
                            }
                        }
                    }
                }
            }
        }
        Ok(latent)
    }

    fn decode(&self, latent: &Latent<f32>) -> Result<Image> {
        if latent.n != 1 {
            return Err(Error::InvalidInput(format!(
                "decode expects a batch-1 latent, got batch {}",
                latent.n
            )));
        }
        let factor = self.scale_factor();
        let (h, w) = (latent.h, latent.w);
        let mut out = match self {
            Codec::Bilinear8 => {
                let mut small = Image::new(h, w);
                for ch in 0..3 {
                    for p in 0..h * w {
                        small.data[p * 3 + ch] = latent.data[ch * h * w + p];
                    }
                }
                resize_bilinear(&small, h * factor, w * factor)?
            }
            Codec::SpaceToDepth2 => {
                let mut img = Image::new(h * 2, w * 2);
                for r in 0..h {
                    for c in 0..w {
                        for dr in 0..2 {
                            for dc in 0..2 {
                                let v = latent.data[(dr * 2 + dc) * h * w + r * w + c];
                                img.set_pixel(2 * r + dr, 2 * c + dc, [v, v, v]);
                            }
                        }
                    }
                }
                img
            }
        };
        out.clamp_in_place();
        Ok(out)
    }
}

/// Codec description embedded in checkpoints and manifests.
pub fn codec_to_string(codec: Codec) -> String {
    codec.name().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_encodes_to_constant_latent_with_zero_alpha() {
        let img = Image::filled(64, 64, [0.3, 0.5, 0.7]);
        let z = Codec::Bilinear8.encode(&img).unwrap();
        assert_eq!((z.h, z.w), (8, 8));
        let hw = 64;
        for p in 0..hw {
            assert!((z.data[p] - 0.3).abs() < 1e-6);
            assert!((z.data[hw + p] - 0.5).abs() < 1e-6);
            assert!((z.data[2 * hw + p] - 0.7).abs() < 1e-6);
            assert_eq!(z.data[3 * hw + p], 0.0);
        }
    }

    #[test]
    fn zero_latent_decodes_to_black() {
        let z = Latent::zeros(1, 8, 8);
        let img = Codec::Bilinear8.decode(&z).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_shape_follows_scale_factor() {
        let z = Latent::zeros(1, 64, 64);
        let img = Codec::Bilinear8.decode(&z).unwrap();
        assert_eq!((img.h, img.w), (512, 512));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let img = Image::filled(60, 64, [0.0; 3]);
        assert!(matches!(Codec::Bilinear8.encode(&img), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn space_to_depth_round_trips_grayscale_exactly() {
        let mut img = Image::new(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                let v = ((r * 31 + c * 7) % 97) as f32 / 96.0;
                img.set_pixel(r, c, [v, v, v]);
            }
        }
        let z = Codec::SpaceToDepth2.encode(&img).unwrap();
        let back = Codec::SpaceToDepth2.decode(&z).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn decode_is_deterministic() {
        let mut z = Latent::zeros(1, 4, 4);
        for (i, v) in z.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        let a = Codec::Bilinear8.decode(&z).unwrap();
        let b = Codec::Bilinear8.decode(&z).unwrap();
        assert_eq!(a, b);
    }
}
