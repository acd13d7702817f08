//! The compact attention-based noise predictor with the 9-channel inpainting
//! input signature: noisy latent (4) + masked-image latent (4) + mask (1).
//!
//! The network is a small UNet: per resolution stage one residual block
//! followed by transformer blocks, each holding one self-attention and one
//! cross-attention layer. Attention blocks are numbered globally in forward
//! order; the surgery hooks gate on that index. Every layer has a
//! hand-written backward pass driven by caches recorded during
//! `forward_train`; inference (`predict_noise`) runs the identical math with
//! caches disabled, so hooked-but-disabled and hook-free forwards are
//! bit-identical by construction.

use alloc::collections::BTreeMap;
use alloc::{format, string::String, vec, vec::Vec};

use crate::attention::{cam_in_place, gate, sac_in_place, AttentionScores, ScoreKind, SurgeryConfig};
use crate::error::{Error, Result};
use crate::grid::{region_indices, RegionIndexMap};
use crate::nn::{
    avg_pool2, avg_pool2_backward, matmul, matmul_a_bt, matmul_at_b_acc, nchw_to_nlc, nlc_to_nchw,
    silu_backward, silu_forward, softmax_rows_backward_in_place, softmax_rows_in_place, t,
    timestep_features, upsample_nearest2, upsample_nearest2_backward, Conv1x1, Conv1x1Cache,
    Conv3x3, Conv3x3Cache, Grads, Init, LayerNorm, LayerNormCache, Linear, LinearCache,
    ParamLayout, ParamSet, Real, SiluCache,
};
use crate::tensor::{Latent, LATENT_CHANNELS};

/// Batched text-conditioning embeddings, layout (n, l, d).
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch<T> {
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Real> TextBatch<T> {
    pub fn from_rows(n: usize, l: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * l * d {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{l}x{d} text batch"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(TextBatch { n, l, d, data })
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Channel width per resolution stage; stage i runs at the latent
    /// resolution divided by 2^i.
    pub stage_widths: Vec<usize>,
    /// Transformer blocks per stage per side.
    pub blocks_per_stage: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    /// Hidden width multiplier of the per-block MLP.
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig::toy()
    }
}

impl DenoiserConfig {
    /// Desk-scale default: 8 transformer blocks (2 per stage per side) over
    /// two stages, trained at a 16x16 latent.
    pub fn toy() -> Self {
        DenoiserConfig {
            stage_widths: vec![64, 96],
            blocks_per_stage: 2,
            heads: 4,
            text_dim: 64,
            time_dim: 64,
            mlp_ratio: 2,
        }
    }

    /// Tiny single-stage network (2 attention blocks, < 5k parameters) used
    /// by the finite-difference gradient check.
    pub fn micro() -> Self {
        DenoiserConfig {
            stage_widths: vec![8],
            blocks_per_stage: 1,
            heads: 2,
            text_dim: 8,
            time_dim: 8,
            mlp_ratio: 2,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn block_count(&self) -> usize {
        2 * self.stages() * self.blocks_per_stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::InvalidConfig("at least one stage required".into()));
        }
        for &w in &self.stage_widths {
            if w == 0 || w % self.heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage width {w} must be a positive multiple of {} heads",
                    self.heads
                )));
            }
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::InvalidConfig("time_dim must be positive and even".into()));
        }
        if self.blocks_per_stage == 0 || self.mlp_ratio == 0 || self.text_dim == 0 {
            return Err(Error::InvalidConfig("zero-sized component".into()));
        }
        Ok(())
    }
}

/// Request to record one layer's attention matrices during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureSpec {
    pub layer: usize,
    pub kind: ScoreKind,
}

/// Inference-time state threaded through the attention blocks: the surgery
/// configuration, the current timestep, precomputed quadrant index maps per
/// attention resolution, and an optional score capture request.
#[derive(Debug)]
pub struct HookContext<'a> {
    pub surgery: &'a SurgeryConfig,
    pub timestep: usize,
    pub maps: &'a BTreeMap<(usize, usize), RegionIndexMap>,
    pub capture: Option<CaptureSpec>,
    /// (layer index, scores) pairs recorded for `capture`.
    pub captured: Vec<(usize, AttentionScores)>,
}

impl<'a> HookContext<'a> {
    pub fn new(
        surgery: &'a SurgeryConfig,
        timestep: usize,
        maps: &'a BTreeMap<(usize, usize), RegionIndexMap>,
    ) -> Self {
        HookContext { surgery, timestep, maps, capture: None, captured: Vec::new() }
    }
}

#[inline]
fn gather_head<T: Real>(
    src: &[T],
    ni: usize,
    rows: usize,
    c: usize,
    head_off: usize,
    dh: usize,
    out: &mut [T],
) {
    for p in 0..rows {
        let off = (ni * rows + p) * c + head_off;
        out[p * dh..(p + 1) * dh].copy_from_slice(&src[off..off + dh]);
    }
}

#[inline]
fn scatter_head<T: Real>(
    dst: &mut [T],
    ni: usize,
    rows: usize,
    c: usize,
    head_off: usize,
    dh: usize,
    src: &[T],
) {
    for p in 0..rows {
        let off = (ni * rows + p) * c + head_off;
        dst[off..off + dh].copy_from_slice(&src[p * dh..(p + 1) * dh]);
    }
}

fn add_in_place<T: Real>(acc: &mut [T], other: &[T]) {
    debug_assert_eq!(acc.len(), other.len());
    for (a, &b) in acc.iter_mut().zip(other) {
        *a = *a + b;
    }
}

// ---------------------------------------------------------------------------
// Self-attention with the SAC hook
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
}

#[derive(Debug, Default, Clone)]
pub struct SelfAttnCache<T> {
    wq: LinearCache<T>,
    wk: LinearCache<T>,
    wv: LinearCache<T>,
    wo: LinearCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    n: usize,
    hw: usize,
}

impl SelfAttention {
    fn declare(layout: &mut ParamLayout, name: &str, width: usize, heads: usize) -> Self {
        SelfAttention {
            wq: Linear::declare(layout, &format!("{name}.q"), width, width, false),
            wk: Linear::declare(layout, &format!("{name}.k"), width, width, false),
            wv: Linear::declare(layout, &format!("{name}.v"), width, width, false),
            wo: Linear::declare(layout, &format!("{name}.o"), width, width, false),
            heads,
            width,
        }
    }

    /// Standard scaled dot-product attention over flattened positions, with
    /// the SAC hook applied to pre-softmax scores when gated on.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        n: usize,
        hw: usize,
        resolution: (usize, usize),
        layer_idx: usize,
        mut hooks: Option<&mut HookContext<'_>>,
        mut cache: Option<&mut SelfAttnCache<T>>,
    ) -> Vec<T> {
        let rows = n * hw;
        let c = self.width;
        let dh = c / self.heads;
        let scale = t::<T>(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(ps, x, rows, cache.as_deref_mut().map(|c| &mut c.wq));
        let k = self.wk.forward(ps, x, rows, cache.as_deref_mut().map(|c| &mut c.wk));
        let v = self.wv.forward(ps, x, rows, cache.as_deref_mut().map(|c| &mut c.wv));

        // Resolve hook decisions once; the map reference outlives the
        // mutable borrow of the context.
        let mut sac: Option<(&RegionIndexMap, T, bool)> = None;
        let mut capture_buf: Option<Vec<f32>> = None;
        if let Some(h) = hooks.as_deref_mut() {
            let (apply_sac, _) = gate(layer_idx, h.timestep, h.surgery);
            if apply_sac {
                let maps: &BTreeMap<(usize, usize), RegionIndexMap> = h.maps;
                let map = maps
                    .get(&resolution)
                    .expect("hook context is validated to cover every attention resolution");
                sac = Some((map, t::<T>(h.surgery.s as f64), h.surgery.symmetric_clone));
            }
            if h.capture == Some(CaptureSpec { layer: layer_idx, kind: ScoreKind::SelfAttention }) {
                capture_buf = Some(vec![0.0f32; self.heads * hw * hw]);
            }
        }

        let mut out = vec![T::zero(); rows * c];
        let mut qh = vec![T::zero(); hw * dh];
        let mut kh = vec![T::zero(); hw * dh];
        let mut vh = vec![T::zero(); hw * dh];
        let mut scores = vec![T::zero(); hw * hw];
        let mut oh = vec![T::zero(); hw * dh];
        for ni in 0..n {
            for head in 0..self.heads {
                let head_off = head * dh;
                gather_head(&q, ni, hw, c, head_off, dh, &mut qh);
                gather_head(&k, ni, hw, c, head_off, dh, &mut kh);
                gather_head(&v, ni, hw, c, head_off, dh, &mut vh);
                matmul_a_bt(&qh, &kh, hw, dh, hw, &mut scores);
                for s in scores.iter_mut() {
                    *s = *s * scale;
                }
                if let Some((map, coef, symmetric)) = sac {
                    sac_in_place(&mut scores, map, coef, symmetric);
                }
                if let (Some(buf), 0) = (capture_buf.as_mut(), ni) {
                    for (dst, &sv) in
                        buf[head * hw * hw..(head + 1) * hw * hw].iter_mut().zip(&scores)
                    {
                        *dst = sv.to_f64().unwrap() as f32;
                    }
                }
                softmax_rows_in_place(&mut scores, hw);
                matmul(&scores, &vh, hw, hw, dh, &mut oh);
                scatter_head(&mut out, ni, hw, c, head_off, dh, &oh);
            }
        }
        if let (Some(h), Some(buf)) = (hooks.as_deref_mut(), capture_buf) {
            h.captured.push((
                layer_idx,
                AttentionScores {
                    kind: ScoreKind::SelfAttention,
                    heads: self.heads,
                    h: resolution.0,
                    w: resolution.1,
                    text_len: 0,
                    data: buf,
                },
            ));
        }
        if let Some(cc) = cache.as_deref_mut() {
            cc.q = q;
            cc.k = k;
            cc.v = v;
            cc.n = n;
            cc.hw = hw;
        }
        self.wo.forward(ps, &out, rows, cache.as_deref_mut().map(|c| &mut c.wo))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &SelfAttnCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let (n, hw) = (cache.n, cache.hw);
        let rows = n * hw;
        let c = self.width;
        let dh = c / self.heads;
        let scale = t::<T>(1.0 / (dh as f64).sqrt());
        let d_concat = self.wo.backward(ps, grads, &cache.wo, dy);
        let mut dq = vec![T::zero(); rows * c];
        let mut dk = vec![T::zero(); rows * c];
        let mut dv = vec![T::zero(); rows * c];
        let mut qh = vec![T::zero(); hw * dh];
        let mut kh = vec![T::zero(); hw * dh];
        let mut vh = vec![T::zero(); hw * dh];
        let mut doh = vec![T::zero(); hw * dh];
        let mut probs = vec![T::zero(); hw * hw];
        let mut dp = vec![T::zero(); hw * hw];
        let mut dqh = vec![T::zero(); hw * dh];
        let mut dkh = vec![T::zero(); hw * dh];
        let mut dvh = vec![T::zero(); hw * dh];
        for ni in 0..n {
            for head in 0..self.heads {
                let head_off = head * dh;
                gather_head(&cache.q, ni, hw, c, head_off, dh, &mut qh);
                gather_head(&cache.k, ni, hw, c, head_off, dh, &mut kh);
                gather_head(&cache.v, ni, hw, c, head_off, dh, &mut vh);
                gather_head(&d_concat, ni, hw, c, head_off, dh, &mut doh);
                // Recompute probabilities instead of caching hw x hw per head.
                matmul_a_bt(&qh, &kh, hw, dh, hw, &mut probs);
                for s in probs.iter_mut() {
                    *s = *s * scale;
                }
                softmax_rows_in_place(&mut probs, hw);
                // dV = P^T dO; dP = dO V^T.
                dvh.iter_mut().for_each(|v| *v = T::zero());
                matmul_at_b_acc(&probs, &doh, hw, hw, dh, &mut dvh);
                matmul_a_bt(&doh, &vh, hw, dh, hw, &mut dp);
                softmax_rows_backward_in_place(&probs, &mut dp, hw);
                // dQ = dS K * scale; dK = dS^T Q * scale.
                matmul(&dp, &kh, hw, hw, dh, &mut dqh);
                dkh.iter_mut().for_each(|v| *v = T::zero());
                matmul_at_b_acc(&dp, &qh, hw, hw, dh, &mut dkh);
                for v in dqh.iter_mut() {
                    *v = *v * scale;
                }
                for v in dkh.iter_mut() {
                    *v = *v * scale;
                }
                scatter_head(&mut dq, ni, hw, c, head_off, dh, &dqh);
                scatter_head(&mut dk, ni, hw, c, head_off, dh, &dkh);
                scatter_head(&mut dv, ni, hw, c, head_off, dh, &dvh);
            }
        }
        let mut dx = self.wq.backward(ps, grads, &cache.wq, &dq);
        add_in_place(&mut dx, &self.wk.backward(ps, grads, &cache.wk, &dk));
        add_in_place(&mut dx, &self.wv.backward(ps, grads, &cache.wv, &dv));
        dx
    }
}

// ---------------------------------------------------------------------------
// Cross-attention with the CAM hook
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
}

#[derive(Debug, Default, Clone)]
pub struct CrossAttnCache<T> {
    wq: LinearCache<T>,
    wk: LinearCache<T>,
    wv: LinearCache<T>,
    wo: LinearCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    n: usize,
    hw: usize,
    l: usize,
}

impl CrossAttention {
    fn declare(
        layout: &mut ParamLayout,
        name: &str,
        width: usize,
        text_dim: usize,
        heads: usize,
    ) -> Self {
        CrossAttention {
            wq: Linear::declare(layout, &format!("{name}.q"), width, width, false),
            wk: Linear::declare(layout, &format!("{name}.k"), text_dim, width, false),
            wv: Linear::declare(layout, &format!("{name}.v"), text_dim, width, false),
            wo: Linear::declare(layout, &format!("{name}.o"), width, width, false),
            heads,
            width,
        }
    }

    /// Image-to-text attention; softmax runs over the token axis. When the
    /// CAM hook is gated on, post-softmax rows outside B' are zeroed, so
    /// those positions contribute an exactly-zero vector before the residual
    /// connection (the output projection has no bias).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        text: &TextBatch<T>,
        n: usize,
        hw: usize,
        resolution: (usize, usize),
        layer_idx: usize,
        mut hooks: Option<&mut HookContext<'_>>,
        mut cache: Option<&mut CrossAttnCache<T>>,
    ) -> Vec<T> {
        debug_assert_eq!(text.n, n);
        let rows = n * hw;
        let c = self.width;
        let dh = c / self.heads;
        let l = text.l;
        let scale = t::<T>(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(ps, x, rows, cache.as_deref_mut().map(|c| &mut c.wq));
        let k =
            self.wk.forward(ps, &text.data, n * l, cache.as_deref_mut().map(|c| &mut c.wk));
        let v =
            self.wv.forward(ps, &text.data, n * l, cache.as_deref_mut().map(|c| &mut c.wv));

        let mut cam_map: Option<&RegionIndexMap> = None;
        let mut capture_buf: Option<Vec<f32>> = None;
        if let Some(h) = hooks.as_deref_mut() {
            let (_, apply_cam) = gate(layer_idx, h.timestep, h.surgery);
            if apply_cam {
                let maps: &BTreeMap<(usize, usize), RegionIndexMap> = h.maps;
                cam_map = Some(
                    maps.get(&resolution)
                        .expect("hook context is validated to cover every attention resolution"),
                );
            }
            if h.capture == Some(CaptureSpec { layer: layer_idx, kind: ScoreKind::CrossAttention })
            {
                capture_buf = Some(vec![0.0f32; self.heads * hw * l]);
            }
        }

        let mut out = vec![T::zero(); rows * c];
        let mut qh = vec![T::zero(); hw * dh];
        let mut kh = vec![T::zero(); l * dh];
        let mut vh = vec![T::zero(); l * dh];
        let mut weights = vec![T::zero(); hw * l];
        let mut oh = vec![T::zero(); hw * dh];
        for ni in 0..n {
            for head in 0..self.heads {
                let head_off = head * dh;
                gather_head(&q, ni, hw, c, head_off, dh, &mut qh);
                gather_head(&k, ni, l, c, head_off, dh, &mut kh);
                gather_head(&v, ni, l, c, head_off, dh, &mut vh);
                matmul_a_bt(&qh, &kh, hw, dh, l, &mut weights);
                for s in weights.iter_mut() {
                    *s = *s * scale;
                }
                softmax_rows_in_place(&mut weights, l);
                if let Some(map) = cam_map {
                    cam_in_place(&mut weights, l, map);
                }
                if let (Some(buf), 0) = (capture_buf.as_mut(), ni) {
                    for (dst, &sv) in buf[head * hw * l..(head + 1) * hw * l].iter_mut().zip(&weights)
                    {
                        *dst = sv.to_f64().unwrap() as f32;
                    }
                }
                matmul(&weights, &vh, hw, l, dh, &mut oh);
                scatter_head(&mut out, ni, hw, c, head_off, dh, &oh);
            }
        }
        if let (Some(h), Some(buf)) = (hooks.as_deref_mut(), capture_buf) {
            h.captured.push((
                layer_idx,
                AttentionScores {
                    kind: ScoreKind::CrossAttention,
                    heads: self.heads,
                    h: resolution.0,
                    w: resolution.1,
                    text_len: l,
                    data: buf,
                },
            ));
        }
        if let Some(cc) = cache.as_deref_mut() {
            cc.q = q;
            cc.k = k;
            cc.v = v;
            cc.n = n;
            cc.hw = hw;
            cc.l = l;
        }
        self.wo.forward(ps, &out, rows, cache.as_deref_mut().map(|c| &mut c.wo))
    }

    /// Backward pass. Text embeddings are frozen, so their gradient is
    /// dropped after the projection weights have been accumulated.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &CrossAttnCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let (n, hw, l) = (cache.n, cache.hw, cache.l);
        let rows = n * hw;
        let c = self.width;
        let dh = c / self.heads;
        let scale = t::<T>(1.0 / (dh as f64).sqrt());
        let d_concat = self.wo.backward(ps, grads, &cache.wo, dy);
        let mut dq = vec![T::zero(); rows * c];
        let mut dk = vec![T::zero(); n * l * c];
        let mut dv = vec![T::zero(); n * l * c];
        let mut qh = vec![T::zero(); hw * dh];
        let mut kh = vec![T::zero(); l * dh];
        let mut vh = vec![T::zero(); l * dh];
        let mut doh = vec![T::zero(); hw * dh];
        let mut probs = vec![T::zero(); hw * l];
        let mut dp = vec![T::zero(); hw * l];
        let mut dqh = vec![T::zero(); hw * dh];
        let mut dkh = vec![T::zero(); l * dh];
        let mut dvh = vec![T::zero(); l * dh];
        for ni in 0..n {
            for head in 0..self.heads {
                let head_off = head * dh;
                gather_head(&cache.q, ni, hw, c, head_off, dh, &mut qh);
                gather_head(&cache.k, ni, l, c, head_off, dh, &mut kh);
                gather_head(&cache.v, ni, l, c, head_off, dh, &mut vh);
                gather_head(&d_concat, ni, hw, c, head_off, dh, &mut doh);
                matmul_a_bt(&qh, &kh, hw, dh, l, &mut probs);
                for s in probs.iter_mut() {
                    *s = *s * scale;
                }
                softmax_rows_in_place(&mut probs, l);
                dvh.iter_mut().for_each(|v| *v = T::zero());
                matmul_at_b_acc(&probs, &doh, hw, l, dh, &mut dvh);
                matmul_a_bt(&doh, &vh, hw, dh, l, &mut dp);
                softmax_rows_backward_in_place(&probs, &mut dp, l);
                matmul(&dp, &kh, hw, l, dh, &mut dqh);
                dkh.iter_mut().for_each(|v| *v = T::zero());
                matmul_at_b_acc(&dp, &qh, hw, l, dh, &mut dkh);
                for v in dqh.iter_mut() {
                    *v = *v * scale;
                }
                for v in dkh.iter_mut() {
                    *v = *v * scale;
                }
                scatter_head(&mut dq, ni, hw, c, head_off, dh, &dqh);
                scatter_head(&mut dk, ni, l, c, head_off, dh, &dkh);
                scatter_head(&mut dv, ni, l, c, head_off, dh, &dvh);
            }
        }
        let dx = self.wq.backward(ps, grads, &cache.wq, &dq);
        // Accumulate dWk/dWv; the returned text gradients are discarded.
        let _ = self.wk.backward(ps, grads, &cache.wk, &dk);
        let _ = self.wv.backward(ps, grads, &cache.wv, &dv);
        dx
    }
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub self_attn: SelfAttention,
    pub ln2: LayerNorm,
    pub cross_attn: CrossAttention,
    pub ln3: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
    /// Global attention-block index used by the surgery gate.
    pub layer_idx: usize,
}

#[derive(Debug, Default, Clone)]
pub struct TBlockCache<T> {
    ln1: LayerNormCache<T>,
    sa: SelfAttnCache<T>,
    ln2: LayerNormCache<T>,
    ca: CrossAttnCache<T>,
    ln3: LayerNormCache<T>,
    fc1: LinearCache<T>,
    silu: SiluCache<T>,
    fc2: LinearCache<T>,
    n: usize,
    hw: usize,
}

impl TransformerBlock {
    fn declare(
        layout: &mut ParamLayout,
        name: &str,
        width: usize,
        heads: usize,
        text_dim: usize,
        mlp_ratio: usize,
        layer_idx: usize,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::declare(layout, &format!("{name}.ln1"), width),
            self_attn: SelfAttention::declare(layout, &format!("{name}.sa"), width, heads),
            ln2: LayerNorm::declare(layout, &format!("{name}.ln2"), width),
            cross_attn: CrossAttention::declare(
                layout,
                &format!("{name}.ca"),
                width,
                text_dim,
                heads,
            ),
            ln3: LayerNorm::declare(layout, &format!("{name}.ln3"), width),
            fc1: Linear::declare(layout, &format!("{name}.mlp1"), width, width * mlp_ratio, true),
            fc2: Linear::declare(layout, &format!("{name}.mlp2"), width * mlp_ratio, width, true),
            width,
            layer_idx,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        text: &TextBatch<T>,
        n: usize,
        resolution: (usize, usize),
        mut hooks: Option<&mut HookContext<'_>>,
        mut cache: Option<&mut TBlockCache<T>>,
    ) -> Vec<T> {
        let hw = resolution.0 * resolution.1;
        let c = self.width;
        let rows = n * hw;
        let mut seq = nchw_to_nlc(x, n, c, hw);
        let t1 = self.ln1.forward(ps, &seq, cache.as_deref_mut().map(|c| &mut c.ln1));
        let sa = self.self_attn.forward(
            ps,
            &t1,
            n,
            hw,
            resolution,
            self.layer_idx,
            hooks.as_deref_mut(),
            cache.as_deref_mut().map(|c| &mut c.sa),
        );
        add_in_place(&mut seq, &sa);
        let t2 = self.ln2.forward(ps, &seq, cache.as_deref_mut().map(|c| &mut c.ln2));
        let ca = self.cross_attn.forward(
            ps,
            &t2,
            text,
            n,
            hw,
            resolution,
            self.layer_idx,
            hooks.as_deref_mut(),
            cache.as_deref_mut().map(|c| &mut c.ca),
        );
        add_in_place(&mut seq, &ca);
        let t3 = self.ln3.forward(ps, &seq, cache.as_deref_mut().map(|c| &mut c.ln3));
        let f1 = self.fc1.forward(ps, &t3, rows, cache.as_deref_mut().map(|c| &mut c.fc1));
        let a = silu_forward(&f1, cache.as_deref_mut().map(|c| &mut c.silu));
        let f2 = self.fc2.forward(ps, &a, rows, cache.as_deref_mut().map(|c| &mut c.fc2));
        add_in_place(&mut seq, &f2);
        if let Some(cc) = cache.as_deref_mut() {
            cc.n = n;
            cc.hw = hw;
        }
        nlc_to_nchw(&seq, n, c, hw)
    }

    fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &TBlockCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let (n, hw) = (cache.n, cache.hw);
        let c = self.width;
        let mut dseq = nchw_to_nlc(dy, n, c, hw);
        // MLP branch.
        let df2 = self.fc2.backward(ps, grads, &cache.fc2, &dseq);
        let da = silu_backward(&cache.silu, &df2);
        let df1 = self.fc1.backward(ps, grads, &cache.fc1, &da);
        let dt3 = self.ln3.backward(ps, grads, &cache.ln3, &df1);
        add_in_place(&mut dseq, &dt3);
        // Cross-attention branch.
        let dca = self.cross_attn.backward(ps, grads, &cache.ca, &dseq);
        let dt2 = self.ln2.backward(ps, grads, &cache.ln2, &dca);
        add_in_place(&mut dseq, &dt2);
        // Self-attention branch.
        let dsa = self.self_attn.backward(ps, grads, &cache.sa, &dseq);
        let dt1 = self.ln1.backward(ps, grads, &cache.ln1, &dsa);
        add_in_place(&mut dseq, &dt1);
        nlc_to_nchw(&dseq, n, c, hw)
    }
}

// ---------------------------------------------------------------------------
// Residual block with timestep conditioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock {
    ln1: LayerNorm,
    conv1: Conv3x3,
    time_proj: Linear,
    ln2: LayerNorm,
    conv2: Conv3x3,
    channels: usize,
}

#[derive(Debug, Default, Clone)]
pub struct ResBlockCache<T> {
    ln1: LayerNormCache<T>,
    silu1: SiluCache<T>,
    conv1: Conv3x3Cache<T>,
    time_proj: LinearCache<T>,
    ln2: LayerNormCache<T>,
    silu2: SiluCache<T>,
    conv2: Conv3x3Cache<T>,
    n: usize,
    h: usize,
    w: usize,
}

impl ResBlock {
    fn declare(layout: &mut ParamLayout, name: &str, channels: usize, time_dim: usize) -> Self {
        ResBlock {
            ln1: LayerNorm::declare(layout, &format!("{name}.ln1"), channels),
            conv1: Conv3x3::declare(layout, &format!("{name}.conv1"), channels, channels),
            time_proj: Linear::declare(layout, &format!("{name}.temb"), time_dim, channels, true),
            ln2: LayerNorm::declare(layout, &format!("{name}.ln2"), channels),
            conv2: Conv3x3::declare(layout, &format!("{name}.conv2"), channels, channels),
            channels,
        }
    }

    fn norm_nchw<T: Real>(
        ln: &LayerNorm,
        ps: &ParamSet<T>,
        x: &[T],
        n: usize,
        c: usize,
        hw: usize,
        cache: Option<&mut LayerNormCache<T>>,
    ) -> Vec<T> {
        let seq = nchw_to_nlc(x, n, c, hw);
        let y = ln.forward(ps, &seq, cache);
        nlc_to_nchw(&y, n, c, hw)
    }

    fn norm_nchw_backward<T: Real>(
        ln: &LayerNorm,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
        n: usize,
        c: usize,
        hw: usize,
    ) -> Vec<T> {
        let dseq = nchw_to_nlc(dy, n, c, hw);
        let dx = ln.backward(ps, grads, cache, &dseq);
        nlc_to_nchw(&dx, n, c, hw)
    }

    fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        temb: &[T],
        n: usize,
        h: usize,
        w: usize,
        mut cache: Option<&mut ResBlockCache<T>>,
    ) -> Vec<T> {
        let c = self.channels;
        let hw = h * w;
        let h1 = Self::norm_nchw(&self.ln1, ps, x, n, c, hw, cache.as_deref_mut().map(|c| &mut c.ln1));
        let a1 = silu_forward(&h1, cache.as_deref_mut().map(|c| &mut c.silu1));
        let mut c1 =
            self.conv1.forward(ps, &a1, n, h, w, cache.as_deref_mut().map(|c| &mut c.conv1));
        // Per-channel shift from the timestep embedding.
        let tp = self.time_proj.forward(ps, temb, n, cache.as_deref_mut().map(|c| &mut c.time_proj));
        for ni in 0..n {
            for ch in 0..c {
                let shift = tp[ni * c + ch];
                for v in c1[(ni * c + ch) * hw..(ni * c + ch + 1) * hw].iter_mut() {
                    *v = *v + shift;
                }
            }
        }
        let h2 =
            Self::norm_nchw(&self.ln2, ps, &c1, n, c, hw, cache.as_deref_mut().map(|c| &mut c.ln2));
        let a2 = silu_forward(&h2, cache.as_deref_mut().map(|c| &mut c.silu2));
        let c2 = self.conv2.forward(ps, &a2, n, h, w, cache.as_deref_mut().map(|c| &mut c.conv2));
        if let Some(cc) = cache.as_deref_mut() {
            cc.n = n;
            cc.h = h;
            cc.w = w;
        }
        let mut y = x.to_vec();
        add_in_place(&mut y, &c2);
        y
    }

    /// Returns (dx, dtemb).
    fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &ResBlockCache<T>,
        dy: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let c = self.channels;
        let hw = h * w;
        let dc2 = self.conv2.backward(ps, grads, &cache.conv2, dy);
        let da2 = silu_backward(&cache.silu2, &dc2);
        let dc1 =
            Self::norm_nchw_backward(&self.ln2, ps, grads, &cache.ln2, &da2, n, c, hw);
        // Timestep projection gradient: sum over positions per (n, channel).
        let mut dtp = vec![T::zero(); n * c];
        for ni in 0..n {
            for ch in 0..c {
                let mut acc = T::zero();
                for &v in &dc1[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                    acc = acc + v;
                }
                dtp[ni * c + ch] = acc;
            }
        }
        let dtemb = self.time_proj.backward(ps, grads, &cache.time_proj, &dtp);
        let da1 = self.conv1.backward(ps, grads, &cache.conv1, &dc1);
        let dh1 = silu_backward(&cache.silu1, &da1);
        let dx_branch =
            Self::norm_nchw_backward(&self.ln1, ps, grads, &cache.ln1, &dh1, n, c, hw);
        let mut dx = dy.to_vec();
        add_in_place(&mut dx, &dx_branch);
        (dx, dtemb)
    }
}

// ---------------------------------------------------------------------------
// The denoiser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct EncStage {
    res: ResBlock,
    tbs: Vec<TransformerBlock>,
    /// Channel projection applied after pooling into the next stage.
    down: Option<Conv1x1>,
}

#[derive(Debug, Clone)]
struct DecStage {
    /// Channel projection applied after upsampling from the next stage.
    up: Option<Conv1x1>,
    /// Projection fusing [upsampled, skip] back to the stage width.
    fuse: Option<Conv1x1>,
    res: ResBlock,
    tbs: Vec<TransformerBlock>,
}

#[derive(Debug, Default, Clone)]
pub struct EncStageCache<T> {
    res: ResBlockCache<T>,
    tbs: Vec<TBlockCache<T>>,
    down: Option<Conv1x1Cache<T>>,
}

#[derive(Debug, Default, Clone)]
pub struct DecStageCache<T> {
    up: Option<Conv1x1Cache<T>>,
    fuse: Option<Conv1x1Cache<T>>,
    res: ResBlockCache<T>,
    tbs: Vec<TBlockCache<T>>,
}

/// Activation caches recorded by `forward_train` and consumed by `backward`.
#[derive(Debug, Default, Clone)]
pub struct DenoiserCache<T> {
    conv_in: Conv1x1Cache<T>,
    time_fc1: LinearCache<T>,
    time_silu: SiluCache<T>,
    time_fc2: LinearCache<T>,
    enc: Vec<EncStageCache<T>>,
    dec: Vec<DecStageCache<T>>,
    out_ln: LayerNormCache<T>,
    out_silu: SiluCache<T>,
    out_conv: Conv1x1Cache<T>,
    n: usize,
    h: usize,
    w: usize,
}

/// Number of input channels: noisy latent + masked-image latent + mask.
pub const INPUT_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    layout: ParamLayout,
    conv_in: Conv1x1,
    time_fc1: Linear,
    time_fc2: Linear,
    enc: Vec<EncStage>,
    dec: Vec<DecStage>,
    out_ln: LayerNorm,
    out_conv: Conv1x1,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let widths = &config.stage_widths;
        let stages = widths.len();
        let conv_in = Conv1x1::declare(&mut layout, "conv_in", INPUT_CHANNELS, widths[0]);
        let time_fc1 =
            Linear::declare(&mut layout, "time.fc1", config.time_dim, config.time_dim, true);
        let time_fc2 =
            Linear::declare(&mut layout, "time.fc2", config.time_dim, config.time_dim, true);
        let mut block_idx = 0usize;
        let mut enc = Vec::with_capacity(stages);
        for (i, &width) in widths.iter().enumerate() {
            let res = ResBlock::declare(&mut layout, &format!("enc{i}.res"), width, config.time_dim);
            let mut tbs = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                tbs.push(TransformerBlock::declare(
                    &mut layout,
                    &format!("enc{i}.tb{b}"),
                    width,
                    config.heads,
                    config.text_dim,
                    config.mlp_ratio,
                    block_idx,
                ));
                block_idx += 1;
            }
            let down = (i + 1 < stages).then(|| {
                Conv1x1::declare(&mut layout, &format!("enc{i}.down"), width, widths[i + 1])
            });
            enc.push(EncStage { res, tbs, down });
        }
        // Decoder stages are declared bottleneck-first so the global block
        // index keeps increasing in execution order.
        let mut dec: Vec<Option<DecStage>> = (0..stages).map(|_| None).collect();
        for i in (0..stages).rev() {
            let width = widths[i];
            let up = (i + 1 < stages).then(|| {
                Conv1x1::declare(&mut layout, &format!("dec{i}.up"), widths[i + 1], width)
            });
            let fuse = (i + 1 < stages).then(|| {
                Conv1x1::declare(&mut layout, &format!("dec{i}.fuse"), 2 * width, width)
            });
            let res = ResBlock::declare(&mut layout, &format!("dec{i}.res"), width, config.time_dim);
            let mut tbs = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                tbs.push(TransformerBlock::declare(
                    &mut layout,
                    &format!("dec{i}.tb{b}"),
                    width,
                    config.heads,
                    config.text_dim,
                    config.mlp_ratio,
                    block_idx,
                ));
                block_idx += 1;
            }
            dec[i] = Some(DecStage { up, fuse, res, tbs });
        }
        let dec: Vec<DecStage> = dec.into_iter().map(|s| s.unwrap()).collect();
        let out_ln = LayerNorm::declare(&mut layout, "out.ln", widths[0]);
        let out_conv =
            Conv1x1::declare_zeroed(&mut layout, "out.conv", widths[0], LATENT_CHANNELS);
        Ok(Denoiser {
            config,
            layout,
            conv_in,
            time_fc1,
            time_fc2,
            enc,
            dec,
            out_ln,
            out_conv,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    pub fn block_count(&self) -> usize {
        self.config.block_count()
    }

    /// Random initialization; the output head starts at zero.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        self.layout.init(seed)
    }

    pub fn zeroed_params<T: Real>(&self) -> ParamSet<T> {
        self.layout.zeroed()
    }

    /// Attention resolutions for a latent of the given size, one per stage.
    pub fn attention_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.config.stages()).map(|i| (h >> i, w >> i)).collect()
    }

    /// Quadrant index maps for every attention resolution of an (h, w)
    /// latent, as consumed by [`HookContext`].
    pub fn region_maps(
        &self,
        h: usize,
        w: usize,
    ) -> Result<BTreeMap<(usize, usize), RegionIndexMap>> {
        let mut maps = BTreeMap::new();
        for (sh, sw) in self.attention_resolutions(h, w) {
            maps.insert((sh, sw), region_indices(sh, sw)?);
        }
        Ok(maps)
    }

    fn check_latent_geometry(&self, h: usize, w: usize) -> Result<()> {
        let stages = self.config.stages();
        let div = 1usize << (stages - 1);
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::InvalidInput(format!(
                "latent {h}x{w} must be divisible by {div} for {stages} stages"
            )));
        }
        Ok(())
    }

    pub fn make_cache<T: Real>(&self) -> DenoiserCache<T> {
        DenoiserCache {
            enc: self
                .enc
                .iter()
                .map(|s| EncStageCache {
                    res: Default::default(),
                    tbs: vec![Default::default(); s.tbs.len()],
                    down: s.down.map(|_| Default::default()),
                })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|s| DecStageCache {
                    up: s.up.map(|_| Default::default()),
                    fuse: s.fuse.map(|_| Default::default()),
                    res: Default::default(),
                    tbs: vec![Default::default(); s.tbs.len()],
                })
                .collect(),
            ..Default::default()
        }
    }

    fn validate_call<T: Real>(
        &self,
        ps: &ParamSet<T>,
        z_t: &Latent<T>,
        text: &TextBatch<T>,
        masked_latent: &Latent<T>,
        mask: &[T],
    ) -> Result<()> {
        if ps.data.len() != self.layout.total_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.layout.total_len()),
                got: format!("{}", ps.data.len()),
            });
        }
        if !z_t.same_shape(masked_latent) {
            return Err(Error::ShapeMismatch {
                expected: format!("masked latent {}x4x{}x{}", z_t.n, z_t.h, z_t.w),
                got: format!("{}x4x{}x{}", masked_latent.n, masked_latent.h, masked_latent.w),
            });
        }
        if mask.len() != z_t.h * z_t.w {
            return Err(Error::ShapeMismatch {
                expected: format!("mask of {} values", z_t.h * z_t.w),
                got: format!("{}", mask.len()),
            });
        }
        if text.n != z_t.n || text.d != self.config.text_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("text batch {}x?x{}", z_t.n, self.config.text_dim),
                got: format!("{}x{}x{}", text.n, text.l, text.d),
            });
        }
        self.check_latent_geometry(z_t.h, z_t.w)?;
        z_t.ensure_finite("z_t")?;
        masked_latent.ensure_finite("masked latent")?;
        if text.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(())
    }

    /// Inference forward pass: predicts the noise residual for `z_t` at
    /// timestep `t`, with the attention surgeries applied per `hooks`.
    /// Deterministic given inputs and parameters.
    pub fn predict_noise<T: Real>(
        &self,
        ps: &ParamSet<T>,
        z_t: &Latent<T>,
        timestep: usize,
        text: &TextBatch<T>,
        masked_latent: &Latent<T>,
        mask: &[T],
        hooks: Option<&mut HookContext<'_>>,
    ) -> Result<Latent<T>> {
        self.validate_call(ps, z_t, text, masked_latent, mask)?;
        if let Some(h) = &hooks {
            for res in self.attention_resolutions(z_t.h, z_t.w) {
                if !h.maps.contains_key(&res) {
                    return Err(Error::NotFound(format!(
                        "region index map for attention resolution {}x{}",
                        res.0, res.1
                    )));
                }
            }
        }
        let ts = vec![timestep; z_t.n];
        Ok(self.forward_inner(ps, z_t, &ts, text, masked_latent, mask, hooks, None))
    }

    /// Training forward pass with per-sample timesteps; records activation
    /// caches for [`Denoiser::backward`]. Surgery hooks never run here.
    pub fn forward_train<T: Real>(
        &self,
        ps: &ParamSet<T>,
        z_t: &Latent<T>,
        timesteps: &[usize],
        text: &TextBatch<T>,
        masked_latent: &Latent<T>,
        mask: &[T],
        cache: &mut DenoiserCache<T>,
    ) -> Result<Latent<T>> {
        self.validate_call(ps, z_t, text, masked_latent, mask)?;
        if timesteps.len() != z_t.n {
            return Err(Error::ShapeMismatch {
                expected: format!("{} timesteps", z_t.n),
                got: format!("{}", timesteps.len()),
            });
        }
        Ok(self.forward_inner(ps, z_t, timesteps, text, masked_latent, mask, None, Some(cache)))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_inner<T: Real>(
        &self,
        ps: &ParamSet<T>,
        z_t: &Latent<T>,
        timesteps: &[usize],
        text: &TextBatch<T>,
        masked_latent: &Latent<T>,
        mask: &[T],
        mut hooks: Option<&mut HookContext<'_>>,
        mut cache: Option<&mut DenoiserCache<T>>,
    ) -> Latent<T> {
        let (n, h, w) = (z_t.n, z_t.h, z_t.w);
        let hw = h * w;
        let widths = &self.config.stage_widths;
        let stages = widths.len();

        // Assemble the 9-channel input.
        let mut x = vec![T::zero(); n * INPUT_CHANNELS * hw];
        for ni in 0..n {
            let dst = &mut x[ni * INPUT_CHANNELS * hw..(ni + 1) * INPUT_CHANNELS * hw];
            dst[..LATENT_CHANNELS * hw]
                .copy_from_slice(&z_t.data[ni * LATENT_CHANNELS * hw..(ni + 1) * LATENT_CHANNELS * hw]);
            dst[LATENT_CHANNELS * hw..2 * LATENT_CHANNELS * hw].copy_from_slice(
                &masked_latent.data[ni * LATENT_CHANNELS * hw..(ni + 1) * LATENT_CHANNELS * hw],
            );
            dst[2 * LATENT_CHANNELS * hw..].copy_from_slice(mask);
        }

        // Timestep embedding shared by every residual block.
        let mut feats = vec![T::zero(); n * self.config.time_dim];
        for (ni, &ts) in timesteps.iter().enumerate() {
            let f: Vec<T> = timestep_features(ts, self.config.time_dim);
            feats[ni * self.config.time_dim..(ni + 1) * self.config.time_dim].copy_from_slice(&f);
        }
        let t1 = self.time_fc1.forward(ps, &feats, n, cache.as_deref_mut().map(|c| &mut c.time_fc1));
        let ta = silu_forward(&t1, cache.as_deref_mut().map(|c| &mut c.time_silu));
        let temb = self.time_fc2.forward(ps, &ta, n, cache.as_deref_mut().map(|c| &mut c.time_fc2));

        let mut feat = self.conv_in.forward(ps, &x, n, hw, cache.as_deref_mut().map(|c| &mut c.conv_in));
        let mut skips: Vec<Vec<T>> = Vec::with_capacity(stages.saturating_sub(1));

        // Encoder.
        for i in 0..stages {
            let (sh, sw) = (h >> i, w >> i);
            let stage = &self.enc[i];
            feat = stage.res.forward(
                ps,
                &feat,
                &temb,
                n,
                sh,
                sw,
                cache.as_deref_mut().map(|c| &mut c.enc[i].res),
            );
            for (bi, tb) in stage.tbs.iter().enumerate() {
                feat = tb.forward(
                    ps,
                    &feat,
                    text,
                    n,
                    (sh, sw),
                    hooks.as_deref_mut(),
                    cache.as_deref_mut().map(|c| &mut c.enc[i].tbs[bi]),
                );
            }
            if let Some(down) = &stage.down {
                skips.push(feat.clone());
                let pooled = avg_pool2(&feat, n * widths[i], sh, sw);
                feat = down.forward(
                    ps,
                    &pooled,
                    n,
                    (sh / 2) * (sw / 2),
                    cache.as_deref_mut().map(|c| c.enc[i].down.as_mut().unwrap()),
                );
            }
        }

        // Decoder.
        for i in (0..stages).rev() {
            let (sh, sw) = (h >> i, w >> i);
            let stage = &self.dec[i];
            if let (Some(up), Some(fuse)) = (&stage.up, &stage.fuse) {
                let upsampled = upsample_nearest2(&feat, n * widths[i + 1], sh / 2, sw / 2);
                let projected = up.forward(
                    ps,
                    &upsampled,
                    n,
                    sh * sw,
                    cache.as_deref_mut().map(|c| c.dec[i].up.as_mut().unwrap()),
                );
                let skip = skips.pop().expect("one skip per non-bottleneck stage");
                let width = widths[i];
                let mut concat = vec![T::zero(); n * 2 * width * sh * sw];
                for ni in 0..n {
                    let dst = &mut concat[ni * 2 * width * sh * sw..(ni + 1) * 2 * width * sh * sw];
                    dst[..width * sh * sw].copy_from_slice(
                        &projected[ni * width * sh * sw..(ni + 1) * width * sh * sw],
                    );
                    dst[width * sh * sw..]
                        .copy_from_slice(&skip[ni * width * sh * sw..(ni + 1) * width * sh * sw]);
                }
                feat = fuse.forward(
                    ps,
                    &concat,
                    n,
                    sh * sw,
                    cache.as_deref_mut().map(|c| c.dec[i].fuse.as_mut().unwrap()),
                );
            }
            feat = stage.res.forward(
                ps,
                &feat,
                &temb,
                n,
                sh,
                sw,
                cache.as_deref_mut().map(|c| &mut c.dec[i].res),
            );
            for (bi, tb) in stage.tbs.iter().enumerate() {
                feat = tb.forward(
                    ps,
                    &feat,
                    text,
                    n,
                    (sh, sw),
                    hooks.as_deref_mut(),
                    cache.as_deref_mut().map(|c| &mut c.dec[i].tbs[bi]),
                );
            }
        }

        // Output head.
        let normed = {
            let seq = nchw_to_nlc(&feat, n, widths[0], hw);
            let y = self.out_ln.forward(ps, &seq, cache.as_deref_mut().map(|c| &mut c.out_ln));
            nlc_to_nchw(&y, n, widths[0], hw)
        };
        let act = silu_forward(&normed, cache.as_deref_mut().map(|c| &mut c.out_silu));
        let eps =
            self.out_conv.forward(ps, &act, n, hw, cache.as_deref_mut().map(|c| &mut c.out_conv));
        if let Some(cc) = cache.as_deref_mut() {
            cc.n = n;
            cc.h = h;
            cc.w = w;
        }
        Latent { n, h, w, data: eps }
    }

    /// Accumulates parameter gradients for the cached forward pass given the
    /// gradient of the loss with respect to the predicted noise.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &DenoiserCache<T>,
        d_eps: &Latent<T>,
    ) {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let hw = h * w;
        let widths = &self.config.stage_widths;
        let stages = widths.len();
        debug_assert_eq!(d_eps.data.len(), n * LATENT_CHANNELS * hw);

        // Output head.
        let dact = self.out_conv.backward(ps, grads, &cache.out_conv, &d_eps.data);
        let dnormed = silu_backward(&cache.out_silu, &dact);
        let mut d = {
            let dseq = nchw_to_nlc(&dnormed, n, widths[0], hw);
            let dx = self.out_ln.backward(ps, grads, &cache.out_ln, &dseq);
            nlc_to_nchw(&dx, n, widths[0], hw)
        };

        let mut dtemb = vec![T::zero(); n * self.config.time_dim];
        let mut dskips: Vec<Option<Vec<T>>> = (0..stages).map(|_| None).collect();

        // Decoder, reverse execution order (stage 0 ran last).
        for i in 0..stages {
            let (sh, sw) = (h >> i, w >> i);
            let stage = &self.dec[i];
            let scache = &cache.dec[i];
            for (bi, tb) in stage.tbs.iter().enumerate().rev() {
                d = tb.backward(ps, grads, &scache.tbs[bi], &d);
            }
            let (dres, dt) = stage.res.backward(ps, grads, &scache.res, &d);
            d = dres;
            add_in_place(&mut dtemb, &dt);
            if let (Some(up), Some(fuse)) = (&stage.up, &stage.fuse) {
                let dconcat =
                    fuse.backward(ps, grads, scache.fuse.as_ref().unwrap(), &d);
                let width = widths[i];
                let mut dmain = vec![T::zero(); n * width * sh * sw];
                let mut dskip = vec![T::zero(); n * width * sh * sw];
                for ni in 0..n {
                    let src = &dconcat[ni * 2 * width * sh * sw..(ni + 1) * 2 * width * sh * sw];
                    dmain[ni * width * sh * sw..(ni + 1) * width * sh * sw]
                        .copy_from_slice(&src[..width * sh * sw]);
                    dskip[ni * width * sh * sw..(ni + 1) * width * sh * sw]
                        .copy_from_slice(&src[width * sh * sw..]);
                }
                dskips[i] = Some(dskip);
                let dup = up.backward(ps, grads, scache.up.as_ref().unwrap(), &dmain);
                d = upsample_nearest2_backward(&dup, n * widths[i + 1], sh / 2, sw / 2);
            }
        }

        // Encoder, reverse execution order (stage S-1 ran last).
        for i in (0..stages).rev() {
            let (sh, sw) = (h >> i, w >> i);
            let stage = &self.enc[i];
            let scache = &cache.enc[i];
            for (bi, tb) in stage.tbs.iter().enumerate().rev() {
                d = tb.backward(ps, grads, &scache.tbs[bi], &d);
            }
            let (dres, dt) = stage.res.backward(ps, grads, &scache.res, &d);
            d = dres;
            add_in_place(&mut dtemb, &dt);
            if i > 0 {
                // Undo the pool + down-projection that fed this stage, which
                // belongs to stage i-1, then merge the skip gradient.
                let prev = &self.enc[i - 1];
                let pcache = &cache.enc[i - 1];
                let ddown = prev.down.as_ref().unwrap().backward(
                    ps,
                    grads,
                    pcache.down.as_ref().unwrap(),
                    &d,
                );
                d = avg_pool2_backward(&ddown, n * widths[i - 1], sh, sw);
                if let Some(dskip) = dskips[i - 1].take() {
                    add_in_place(&mut d, &dskip);
                }
            }
        }
        let _ = self.conv_in.backward(ps, grads, &cache.conv_in, &d);

        // Timestep MLP.
        let dta = self.time_fc2.backward(ps, grads, &cache.time_fc2, &dtemb);
        let dt1 = silu_backward(&cache.time_silu, &dta);
        let _ = self.time_fc1.backward(ps, grads, &cache.time_fc1, &dt1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_latent(n: usize, h: usize, w: usize, seed: u64) -> Latent<f32> {
        let mut rng = DetRng::stream(seed, &[1]);
        let mut z = Latent::zeros(n, h, w);
        rng.fill_normal(&mut z.data);
        z
    }

    fn random_text(n: usize, l: usize, d: usize, seed: u64) -> TextBatch<f32> {
        let mut rng = DetRng::stream(seed, &[2]);
        let data = (0..n * l * d).map(|_| rng.next_normal_f32()).collect();
        TextBatch { n, l, d, data }
    }

    fn mask_for(h: usize, w: usize) -> alloc::vec::Vec<f32> {
        let mut m = alloc::vec![0.0f32; h * w];
        for r in h / 2..h {
            for c in w / 2..w {
                m[r * w + c] = 1.0;
            }
        }
        m
    }

    #[test]
    fn micro_config_is_under_five_thousand_params() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        assert!(den.param_count() <= 5000, "micro params = {}", den.param_count());
        assert_eq!(den.block_count(), 2);
    }

    #[test]
    fn toy_config_has_eight_blocks() {
        let den = Denoiser::new(DenoiserConfig::toy()).unwrap();
        assert_eq!(den.block_count(), 8);
    }

    #[test]
    fn forward_preserves_shape_at_multiple_sizes() {
        for (cfg, h, w) in [
            (DenoiserConfig::micro(), 8usize, 8usize),
            (DenoiserConfig::toy(), 16, 16),
        ] {
            let den = Denoiser::new(cfg).unwrap();
            let ps = den.init_params::<f32>(3);
            let z = random_latent(1, h, w, 5);
            let ml = random_latent(1, h, w, 6);
            let text = random_text(1, 4, den.config.text_dim, 7);
            let mask = mask_for(h, w);
            let eps = den.predict_noise(&ps, &z, 10, &text, &ml, &mask, None).unwrap();
            assert_eq!((eps.n, eps.h, eps.w), (1, h, w));
            assert_eq!(eps.data.len(), 4 * h * w);
            assert!(eps.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        let ps = den.init_params::<f32>(11);
        let z = random_latent(2, 8, 8, 12);
        let ml = random_latent(2, 8, 8, 13);
        let text = random_text(2, 3, den.config.text_dim, 14);
        let mask = mask_for(8, 8);
        let a = den.predict_noise(&ps, &z, 99, &text, &ml, &mask, None).unwrap();
        let b = den.predict_noise(&ps, &z, 99, &text, &ml, &mask, None).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_params_predict_zero_noise() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        let ps = den.zeroed_params::<f32>();
        let z = random_latent(1, 8, 8, 20);
        let ml = random_latent(1, 8, 8, 21);
        let text = random_text(1, 3, den.config.text_dim, 22);
        let mask = mask_for(8, 8);
        let eps = den.predict_noise(&ps, &z, 5, &text, &ml, &mask, None).unwrap();
        assert!(eps.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabled_hooks_are_bit_identical_to_no_hooks() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        let ps = den.init_params::<f32>(31);
        let z = random_latent(1, 8, 8, 32);
        let ml = random_latent(1, 8, 8, 33);
        let text = random_text(1, 4, den.config.text_dim, 34);
        let mask = mask_for(8, 8);
        let plain = den.predict_noise(&ps, &z, 40, &text, &ml, &mask, None).unwrap();
        let maps = den.region_maps(8, 8).unwrap();
        let surgery = SurgeryConfig {
            sac_enabled: false,
            cam_enabled: false,
            layer_range: (0, den.block_count() - 1),
            ..SurgeryConfig::default()
        };
        let mut hooks = HookContext::new(&surgery, 40, &maps);
        let hooked =
            den.predict_noise(&ps, &z, 40, &text, &ml, &mask, Some(&mut hooks)).unwrap();
        assert_eq!(plain.data, hooked.data);
    }

    #[test]
    fn enabled_surgery_changes_the_output() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        let ps = den.init_params::<f32>(41);
        let z = random_latent(1, 8, 8, 42);
        let ml = random_latent(1, 8, 8, 43);
        let text = random_text(1, 4, den.config.text_dim, 44);
        let mask = mask_for(8, 8);
        let plain = den.predict_noise(&ps, &z, 40, &text, &ml, &mask, None).unwrap();
        let maps = den.region_maps(8, 8).unwrap();
        let surgery = SurgeryConfig {
            layer_range: (0, den.block_count() - 1),
            ..SurgeryConfig::default()
        };
        let mut hooks = HookContext::new(&surgery, 40, &maps);
        let hooked =
            den.predict_noise(&ps, &z, 40, &text, &ml, &mask, Some(&mut hooks)).unwrap();
        assert_ne!(plain.data, hooked.data);
    }

    #[test]
    fn capture_records_requested_layer_scores() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        let ps = den.init_params::<f32>(51);
        let z = random_latent(1, 8, 8, 52);
        let ml = random_latent(1, 8, 8, 53);
        let text = random_text(1, 4, den.config.text_dim, 54);
        let mask = mask_for(8, 8);
        let maps = den.region_maps(8, 8).unwrap();
        let surgery = SurgeryConfig::disabled();
        let mut hooks = HookContext::new(&surgery, 7, &maps);
        hooks.capture = Some(CaptureSpec { layer: 1, kind: ScoreKind::SelfAttention });
        let _ = den.predict_noise(&ps, &z, 7, &text, &ml, &mask, Some(&mut hooks)).unwrap();
        assert_eq!(hooks.captured.len(), 1);
        let (layer, scores) = &hooks.captured[0];
        assert_eq!(*layer, 1);
        assert_eq!(scores.kind, ScoreKind::SelfAttention);
        assert_eq!(scores.heads, den.config.heads);
        assert_eq!(scores.data.len(), den.config.heads * 64 * 64);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        let ps = den.init_params::<f32>(61);
        let z = random_latent(1, 8, 8, 62);
        let ml = random_latent(1, 8, 4, 63);
        let text = random_text(1, 4, den.config.text_dim, 64);
        let mask = mask_for(8, 8);
        assert!(matches!(
            den.predict_noise(&ps, &z, 0, &text, &ml, &mask, None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let den = Denoiser::new(DenoiserConfig::micro()).unwrap();
        let ps = den.init_params::<f32>(71);
        let mut z = random_latent(1, 8, 8, 72);
        z.data[3] = f32::NAN;
        let ml = random_latent(1, 8, 8, 73);
        let text = random_text(1, 4, den.config.text_dim, 74);
        let mask = mask_for(8, 8);
        assert!(matches!(
            den.predict_noise(&ps, &z, 0, &text, &ml, &mask, None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_query_key_projections_give_uniform_attention() {
        // With Wq = Wk = 0 all scores vanish and softmax is uniform, so the
        // attention output is the mean value row projected through Wo.
        let mut layout = ParamLayout::default();
        let sa = SelfAttention::declare(&mut layout, "sa", 4, 2);
        let mut ps: ParamSet<f64> = layout.init(81);
        for r in [sa.wq.w, sa.wk.w] {
            for v in ps.data[r.offset..r.offset + r.len].iter_mut() {
                *v = 0.0;
            }
        }
        let hw = 4;
        let mut rng = DetRng::new(82);
        let x: alloc::vec::Vec<f64> = (0..hw * 4).map(|_| rng.next_normal_f64()).collect();
        let y = sa.forward(&ps, &x, 1, hw, (2, 2), 0, None, None);
        // Compute the expected output by hand: v = x Wv; mean over rows;
        // broadcast; o = mean_v Wo.
        let mut v = alloc::vec![0.0f64; hw * 4];
        matmul(&x, ps.get(sa.wv.w), hw, 4, 4, &mut v);
        let mut mean_v = [0.0f64; 4];
        for row in v.chunks(4) {
            for (m, &val) in mean_v.iter_mut().zip(row) {
                *m += val / hw as f64;
            }
        }
        let mut expected_row = [0.0f64; 4];
        matmul(&mean_v, ps.get(sa.wo.w), 1, 4, 4, &mut expected_row);
        for row in y.chunks(4) {
            for (a, b) in row.iter().zip(expected_row.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_token_text_gets_full_attention_weight() {
        // L = 1: softmax over one element is exactly 1, so the output equals
        // v broadcast through Wo for every position.
        let mut layout = ParamLayout::default();
        let ca = CrossAttention::declare(&mut layout, "ca", 4, 3, 2);
        let ps: ParamSet<f64> = layout.init(91);
        let mut rng = DetRng::new(92);
        let hw = 4;
        let x: alloc::vec::Vec<f64> = (0..hw * 4).map(|_| rng.next_normal_f64()).collect();
        let text = TextBatch::<f64> {
            n: 1,
            l: 1,
            d: 3,
            data: alloc::vec![0.3, -0.7, 1.1],
        };
        let y = ca.forward(&ps, &x, &text, 1, hw, (2, 2), 0, None, None);
        let mut v = alloc::vec![0.0f64; 4];
        matmul(&text.data, ps.get(ca.wv.w), 1, 3, 4, &mut v);
        let mut expected = alloc::vec![0.0f64; 4];
        matmul(&v, ps.get(ca.wo.w), 1, 4, 4, &mut expected);
        for row in y.chunks(4) {
            for (a, b) in row.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cam_zeroes_pre_residual_rows_and_preserves_bprime_bitwise() {
        let mut layout = ParamLayout::default();
        let ca = CrossAttention::declare(&mut layout, "ca", 8, 6, 2);
        let ps: ParamSet<f32> = layout.init(101);
        let mut rng = DetRng::new(102);
        let (h, w) = (4, 4);
        let hw = h * w;
        let x: alloc::vec::Vec<f32> = (0..hw * 8).map(|_| rng.next_normal_f32()).collect();
        let text = random_text(1, 5, 6, 103);
        let maps = {
            let mut m = BTreeMap::new();
            m.insert((h, w), region_indices(h, w).unwrap());
            m
        };
        let surgery = SurgeryConfig { layer_range: (0, 0), ..SurgeryConfig::default() };
        let mut hooks = HookContext::new(&surgery, 0, &maps);
        let masked = ca.forward(&ps, &x, &text, 1, hw, (h, w), 0, Some(&mut hooks), None);
        let unmasked = ca.forward(&ps, &x, &text, 1, hw, (h, w), 0, None, None);
        let map = &maps[&(h, w)];
        for pos in 0..hw {
            let row = &masked[pos * 8..(pos + 1) * 8];
            if map.quadrant(crate::grid::Quadrant::BottomRight).contains(&pos) {
                let plain = &unmasked[pos * 8..(pos + 1) * 8];
                for (a, b) in row.iter().zip(plain) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "row {pos} not zeroed");
            }
        }
    }
}
