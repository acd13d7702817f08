//! The two attention surgeries: self-attention cloning (SAC) and
//! cross-attention masking (CAM).
//!
//! Both are pure transformations of per-head attention matrices. SAC runs on
//! pre-softmax self-attention scores and overwrites the (A' rows, B' cols)
//! block with `s` times the (A rows, B cols) block, transplanting the
//! structural correspondence between the example input and the query onto
//! the generated cell. CAM runs on post-softmax cross-attention weights and
//! zeroes every row whose query position lies outside B', so text guidance
//! only touches the generated cell.

use alloc::{format, vec::Vec};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::{RegionIndexMap, Role};

/// Which attention family a score matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Pre-softmax position-to-position scores, (heads, hw, hw).
    SelfAttention,
    /// Post-softmax position-to-token weights, (heads, hw, text_len).
    CrossAttention,
}

/// Per-head attention score or weight matrices at one feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub kind: ScoreKind,
    pub heads: usize,
    /// Feature-map resolution behind the flattened position axis.
    pub h: usize,
    pub w: usize,
    /// Token count; 0 for self-attention.
    pub text_len: usize,
    /// Row-major [head][query position][key], key dimension hw or text_len.
    pub data: Vec<f32>,
}

impl AttentionScores {
    pub fn cols(&self) -> usize {
        match self.kind {
            ScoreKind::SelfAttention => self.h * self.w,
            ScoreKind::CrossAttention => self.text_len,
        }
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// One head's matrix as a flat row-major slice.
    pub fn head(&self, head: usize) -> &[f32] {
        let stride = self.positions() * self.cols();
        &self.data[head * stride..(head + 1) * stride]
    }

    fn check_resolution(&self, idx: &RegionIndexMap) -> Result<()> {
        if (self.h, self.w) != (idx.h, idx.w) {
            return Err(Error::ShapeMismatch {
                expected: format!("index map {}x{}", idx.h, idx.w),
                got: format!("scores {}x{}", self.h, self.w),
            });
        }
        Ok(())
    }
}

/// Default SAC coefficient.
pub const DEFAULT_SAC_COEFFICIENT: f32 = 1.3;
/// SAC coefficient preset for skeleton-to-image tasks.
pub const SKELETON_TO_IMAGE_SAC_COEFFICIENT: f32 = 1.4;

/// Enablement and gating of the two surgeries.
#[derive(Debug, Clone, PartialEq)]
pub struct SurgeryConfig {
    pub sac_enabled: bool,
    pub cam_enabled: bool,
    /// SAC coefficient balancing structure preservation against
    /// transformation strength. Must be positive.
    pub s: f32,
    /// Inclusive range of attention block indices the surgeries run in.
    pub layer_range: (usize, usize),
    /// Inclusive range of diffusion timesteps the surgeries run in.
    pub timestep_range: (usize, usize),
    /// Also clone the transposed block (B', A') from (B, A).
    pub symmetric_clone: bool,
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        SurgeryConfig {
            sac_enabled: true,
            cam_enabled: true,
            s: DEFAULT_SAC_COEFFICIENT,
            // The reference UNet applies surgery in blocks 3..=10 of 16;
            // scaled onto the 8-block toy denoiser this is blocks 1..=5.
            layer_range: (1, 5),
            timestep_range: (0, usize::MAX),
            symmetric_clone: false,
        }
    }
}

impl SurgeryConfig {
    /// Disables both surgeries, for misaligned tasks and ablations.
    pub fn disabled() -> Self {
        SurgeryConfig { sac_enabled: false, cam_enabled: false, ..SurgeryConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "SAC coefficient must be positive, got {}",
                self.s
            )));
        }
        if self.layer_range.0 > self.layer_range.1 {
            return Err(Error::InvalidConfig("empty layer range".into()));
        }
        if self.timestep_range.0 > self.timestep_range.1 {
            return Err(Error::InvalidConfig("empty timestep range".into()));
        }
        Ok(())
    }
}

/// Whether SAC and CAM apply at a given attention block and timestep.
pub fn gate(layer_idx: usize, timestep: usize, cfg: &SurgeryConfig) -> (bool, bool) {
    let in_layers = layer_idx >= cfg.layer_range.0 && layer_idx <= cfg.layer_range.1;
    let in_time = timestep >= cfg.timestep_range.0 && timestep <= cfg.timestep_range.1;
    let hit = in_layers && in_time;
    (cfg.sac_enabled && hit, cfg.cam_enabled && hit)
}

/// In-place SAC on a single head's pre-softmax score matrix (hw x hw,
/// row-major). Overwrites block (A' rows, B' cols) with `s` times block
/// (A rows, B cols); with `symmetric`, also (B' rows, A' cols) from
/// `s` times (B rows, A cols).
///
/// Quadrant index sets are sorted row-major, so the k-th index of each set
/// addresses the same within-quadrant offset; pairing them elementwise is
/// the positional identification the clone relies on.
pub fn sac_in_place<T: Float>(
    scores: &mut [T],
    idx: &RegionIndexMap,
    s: T,
    symmetric: bool,
) {
    let hw = idx.positions();
    debug_assert_eq!(scores.len(), hw * hw);
    let a = idx.role(Role::A);
    let a_prime = idx.role(Role::APrime);
    let b = idx.role(Role::B);
    let b_prime = idx.role(Role::BPrime);
    for (qi, &q_src) in a.iter().enumerate() {
        let q_dst = a_prime[qi];
        for (ki, &k_src) in b.iter().enumerate() {
            let k_dst = b_prime[ki];
            scores[q_dst * hw + k_dst] = scores[q_src * hw + k_src] * s;
        }
    }
    if symmetric {
        for (qi, &q_src) in b.iter().enumerate() {
            let q_dst = b_prime[qi];
            for (ki, &k_src) in a.iter().enumerate() {
                let k_dst = a_prime[ki];
                scores[q_dst * hw + k_dst] = scores[q_src * hw + k_src] * s;
            }
        }
    }
}

/// In-place CAM on a single head's post-softmax weight matrix
/// (hw x text_len, row-major): rows with query positions in A, A', or B are
/// zeroed; rows in B' are untouched.
pub fn cam_in_place<T: Float>(weights: &mut [T], text_len: usize, idx: &RegionIndexMap) {
    debug_assert_eq!(weights.len(), idx.positions() * text_len);
    for role in [Role::A, Role::APrime, Role::B] {
        for &pos in idx.role(role) {
            let row = &mut weights[pos * text_len..(pos + 1) * text_len];
            for v in row.iter_mut() {
                *v = T::zero();
            }
        }
    }
}

/// Pure SAC over every head of a self-attention score matrix.
pub fn clone_self_attention(
    scores: &AttentionScores,
    idx: &RegionIndexMap,
    s: f32,
    symmetric: bool,
) -> Result<AttentionScores> {
    if scores.kind != ScoreKind::SelfAttention {
        return Err(Error::InvalidInput("SAC requires self-attention scores".into()));
    }
    scores.check_resolution(idx)?;
    if !(s > 0.0) {
        return Err(Error::InvalidConfig(format!("SAC coefficient must be positive, got {s}")));
    }
    let mut out = scores.clone();
    let hw = out.positions();
    for head in out.data.chunks_mut(hw * hw) {
        sac_in_place(head, idx, s, symmetric);
    }
    Ok(out)
}

/// Pure CAM over every head of a cross-attention weight matrix.
pub fn mask_cross_attention(
    weights: &AttentionScores,
    idx: &RegionIndexMap,
) -> Result<AttentionScores> {
    if weights.kind != ScoreKind::CrossAttention {
        return Err(Error::InvalidInput("CAM requires cross-attention weights".into()));
    }
    weights.check_resolution(idx)?;
    let mut out = weights.clone();
    let (hw, text_len) = (out.positions(), out.text_len);
    for head in out.data.chunks_mut(hw * text_len) {
        cam_in_place(head, text_len, idx);
    }
    Ok(out)
}
