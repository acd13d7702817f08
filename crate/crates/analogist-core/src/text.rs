//! Deterministic hash-based toy text encoder.
//!
//! Tokens are hashed into a fixed id space and mapped through a seeded
//! random embedding table (generated functionally, never materialized),
//! plus sinusoidal position features. Linguistic quality is irrelevant here;
//! what matters is that distinct prompts get distinct, reproducible
//! embeddings that cross-attention can condition on. Any external encoder
//! mapping a string to an (L x d) matrix can replace this one via
//! [`TextEncoder`].

use alloc::{string::String, vec, vec::Vec};

use crate::denoiser::TextBatch;
use crate::nn::timestep_features;
use crate::rng::DetRng;

pub const PAD_ID: u32 = 0;
pub const BEGIN_ID: u32 = 1;
pub const END_ID: u32 = 2;
/// Total id space including the three reserved ids.
pub const VOCAB_SIZE: u32 = 65_536;
/// Default token count, matching the usual text-encoder convention.
pub const DEFAULT_TEXT_LEN: usize = 77;
/// Default embedding width of the toy encoder.
pub const DEFAULT_TEXT_DIM: usize = 64;

const TABLE_SEED: u64 = 0x7465_7874;

/// FNV-1a over bytes; the token hash and the config digest both use it.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// An (L x d) embedding of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub l: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl TextEmbedding {
    /// Batches embeddings that share (l, d) into denoiser input.
    pub fn batch(items: &[&TextEmbedding]) -> TextBatch<f32> {
        assert!(!items.is_empty());
        let (l, d) = (items[0].l, items[0].d);
        let mut data = Vec::with_capacity(items.len() * l * d);
        for e in items {
            assert_eq!((e.l, e.d), (l, d), "text embeddings must share dimensions");
            data.extend_from_slice(&e.data);
        }
        TextBatch { n: items.len(), l, d, data }
    }

    pub fn to_batch(&self) -> TextBatch<f32> {
        TextBatch { n: 1, l: self.l, d: self.d, data: self.data.clone() }
    }
}

/// Contract for external text encoders.
pub trait TextEncoder {
    fn dims(&self) -> (usize, usize);
    fn encode(&self, text: &str) -> TextEmbedding;
}

/// Lowercases, splits on whitespace and punctuation, hashes each token into
/// the id space, and frames the sequence as [BEGIN, tokens..., END, PAD...]
/// of exactly `max_len` ids.
pub fn tokenize(text: &str, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "need room for the begin and end markers");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BEGIN_ID);
    let lowered = text.to_lowercase();
    for token in lowered.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        if ids.len() == max_len - 1 {
            break;
        }
        let hash = fnv1a64(token.as_bytes());
        ids.push(3 + (hash % (VOCAB_SIZE as u64 - 3)) as u32);
    }
    ids.push(END_ID);
    ids.resize(max_len, PAD_ID);
    ids
}

/// Embedding table row for one token id, drawn from a fixed seed stream.
fn table_row(id: u32, d: usize, out: &mut [f32]) {
    let mut rng = DetRng::stream(TABLE_SEED, &[id as u64]);
    for v in out[..d].iter_mut() {
        *v = rng.next_normal_f32();
    }
}

/// Maps token ids to the (L x d) embedding: table row plus sinusoidal
/// position features. PAD rows are exactly zero.
pub fn embed(tokens: &[u32], d: usize) -> TextEmbedding {
    let l = tokens.len();
    let mut data = vec![0.0f32; l * d];
    for (pos, &id) in tokens.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        let row = &mut data[pos * d..(pos + 1) * d];
        table_row(id, d, row);
        let pe: Vec<f32> = timestep_features(pos, d);
        for (v, p) in row.iter_mut().zip(pe) {
            *v += p;
        }
    }
    TextEmbedding { l, d, data }
}

pub fn encode_text(text: &str, max_len: usize, d: usize) -> TextEmbedding {
    embed(&tokenize(text, max_len), d)
}

/// The toy encoder as a [`TextEncoder`] implementation.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    pub max_len: usize,
    pub d: usize,
}

impl Default for HashTextEncoder {
    fn default() -> Self {
        HashTextEncoder { max_len: DEFAULT_TEXT_LEN, d: DEFAULT_TEXT_DIM }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dims(&self) -> (usize, usize) {
        (self.max_len, self.d)
    }

    fn encode(&self, text: &str) -> TextEmbedding {
        encode_text(text, self.max_len, self.d)
    }
}

/// Positive and negative prompt texts with their embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub positive: String,
    pub negative: String,
    pub positive_emb: TextEmbedding,
    pub negative_emb: TextEmbedding,
}

impl PromptBundle {
    pub fn new(positive: &str, negative: &str, max_len: usize, d: usize) -> Self {
        PromptBundle {
            positive: positive.into(),
            negative: negative.into(),
            positive_emb: encode_text(positive, max_len, d),
            negative_emb: encode_text(negative, max_len, d),
        }
    }
}
