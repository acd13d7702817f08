//! Shaped float buffers and the little-endian dump format shared by the
//! attention heatmap tool and the debug latent dumps.

use alloc::{format, vec, vec::Vec};
use num_traits::Float;

use crate::error::{Error, Result};

/// A dense row-major f32 tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn from_data(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{numel} values for shape {shape:?}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Serializes as magic, u32 rank, u32 dims, f32 payload, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidInput(format!("tensor dump: {msg}"));
        if bytes.len() < 8 || &bytes[0..4] != MAGIC {
            return Err(bad("missing or truncated header"));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(bad("truncated shape"));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 8 + 4 * i;
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        if bytes.len() != header + 4 * numel {
            return Err(bad("payload size does not match shape"));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}

const MAGIC: &[u8; 4] = b"ATNS";

/// A batch of 4-channel latents, layout [batch][channel][row][col].
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T = f32> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

/// Latents always carry four channels.
pub const LATENT_CHANNELS: usize = 4;

impl<T: Float> Latent<T> {
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Latent { n, h, w, data: vec![T::zero(); n * LATENT_CHANNELS * h * w] }
    }

    pub fn from_data(n: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * LATENT_CHANNELS * h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{LATENT_CHANNELS}x{h}x{w}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Latent { n, h, w, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn same_shape(&self, other: &Latent<T>) -> bool {
        (self.n, self.h, self.w) == (other.n, other.h, other.w)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent in {context}")));
        }
        Ok(())
    }
}

impl Latent<f32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.n, LATENT_CHANNELS, self.h, self.w],
            data: self.data.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let t = Tensor::from_data(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN, f32::MAX]).unwrap();
        let bytes = t.to_bytes();
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn corrupt_dumps_are_rejected() {
        assert!(Tensor::from_bytes(b"nope").is_err());
        let mut bytes = Tensor::zeros(&[4]).to_bytes();
        bytes.pop();
        assert!(Tensor::from_bytes(&bytes).is_err());
    }

    #[test]
    fn latent_shape_is_enforced() {
        assert!(Latent::<f32>::from_data(1, 2, 2, vec![0.0; 16]).is_ok());
        assert!(Latent::<f32>::from_data(1, 2, 2, vec![0.0; 15]).is_err());
    }
}
