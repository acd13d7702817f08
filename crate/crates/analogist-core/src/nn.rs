//! Hand-rolled neural network layers with explicit backward passes.
//!
//! Everything is generic over the float type: training and sampling run in
//! f32, gradient verification runs the same code in f64. Parameters live in
//! one flat buffer with named, shaped entries, which maps directly onto the
//! weight-file format (flat blob plus manifest) and keeps the optimizer and
//! finite-difference probing trivial.
//!
//! Parallel loops only ever split output slices disjointly and never reorder
//! a floating-point reduction, so results are bit-identical across thread
//! counts.

use alloc::{string::String, vec, vec::Vec};
use num_traits::Float;

use crate::rng::DetRng;

/// Float scalar usable by the layers.
pub trait Real: Float + Send + Sync + 'static {}
impl<T: Float + Send + Sync + 'static> Real for T {}

#[inline]
pub(crate) fn t<T: Real>(x: f64) -> T {
    T::from(x).unwrap()
}

/// Runs `f(row_index, row)` over consecutive `row_len` chunks, in parallel
/// when the `parallel` feature is enabled. Rows are disjoint, so the result
/// does not depend on the thread count.
#[inline]
pub(crate) fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(row_len > 0 && data.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Handle into the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

/// Declares parameters during model construction; later materialized into a
/// [`ParamSet`].
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamMeta>,
    total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamRef {
        let len: usize = shape.iter().product();
        let r = ParamRef { offset: self.total, len };
        self.entries.push(ParamMeta { name, shape: shape.to_vec(), offset: self.total, init });
        self.total += len;
        r
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Materializes parameters; each entry draws from its own seed stream so
    /// the result is independent of declaration bookkeeping.
    pub fn init<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut data = vec![T::zero(); self.total];
        for (i, entry) in self.entries.iter().enumerate() {
            let slice = &mut data[entry.offset..entry.offset + entry.shape.iter().product::<usize>()];
            match entry.init {
                Init::Zeros => {}
                Init::Ones => slice.iter_mut().for_each(|v| *v = T::one()),
                Init::Normal { std } => {
                    let mut rng = DetRng::stream(seed, &[0x70_61_72_61, i as u64]);
                    for v in slice.iter_mut() {
                        *v = t::<T>(rng.next_normal_f64() * std);
                    }
                }
            }
        }
        ParamSet { meta: self.entries.clone(), data }
    }

    pub fn zeroed<T: Real>(&self) -> ParamSet<T> {
        ParamSet { meta: self.entries.clone(), data: vec![T::zero(); self.total] }
    }
}

/// Flat parameter buffer plus naming metadata.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    pub meta: Vec<ParamMeta>,
    pub data: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    #[inline]
    pub fn get(&self, r: ParamRef) -> &[T] {
        &self.data[r.offset..r.offset + r.len]
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            meta: self.meta.clone(),
            data: self.data.iter().map(|&v| U::from(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn by_name(&self, name: &str) -> Option<(&ParamMeta, &[T])> {
        self.meta.iter().find(|m| m.name == name).map(|m| {
            let len: usize = m.shape.iter().product();
            (m, &self.data[m.offset..m.offset + len])
        })
    }
}

/// Gradient buffer parallel to a [`ParamSet`].
pub type Grads<T> = Vec<T>;

#[inline]
fn grad_slice<T>(grads: &mut Grads<T>, r: ParamRef) -> &mut [T] {
    &mut grads[r.offset..r.offset + r.len]
}

// ---------------------------------------------------------------------------
// Matmul kernels
// ---------------------------------------------------------------------------

/// out(m, n) = a(m, k) x b(k, n). Overwrites `out`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, |i, row| {
        row.iter_mut().for_each(|v| *v = T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &s) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + s * bv;
            }
        }
    });
}

/// out(m, n) += a(rows, m)^T x b(rows, n). Accumulates into `out`.
pub fn matmul_at_b_acc<T: Real>(
    a: &[T],
    b: &[T],
    rows: usize,
    m: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), rows * m);
    debug_assert_eq!(b.len(), rows * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, |i, row| {
        for r in 0..rows {
            let s = a[r * m + i];
            let b_row = &b[r * n..(r + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + s * bv;
            }
        }
    });
}

/// out(m, n) = a(m, k) x b(n, k)^T. Overwrites `out`.
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax in place over trailing dimension `cols`.
pub fn softmax_rows_in_place<T: Real>(data: &mut [T], cols: usize) {
    for_each_row(data, cols, |_, row| {
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    });
}

/// Backward of row-wise softmax: given probabilities `p` and upstream `dp`,
/// writes ds = p * (dp - sum(dp * p)) into `dp` in place.
pub fn softmax_rows_backward_in_place<T: Real>(p: &[T], dp: &mut [T], cols: usize) {
    debug_assert_eq!(p.len(), dp.len());
    for (p_row, dp_row) in p.chunks(cols).zip(dp.chunks_mut(cols)) {
        let mut dot = T::zero();
        for (&pv, &dv) in p_row.iter().zip(dp_row.iter()) {
            dot = dot + pv * dv;
        }
        for (&pv, dv) in p_row.iter().zip(dp_row.iter_mut()) {
            *dv = pv * (*dv - dot);
        }
    }
}

// ---------------------------------------------------------------------------
// Layout shuffles between (n, c, h*w) and (n, h*w, c)
// ---------------------------------------------------------------------------

pub fn nchw_to_nlc<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), n * c * hw);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let src = &x[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                out[(ni * hw + p) * c + ch] = v;
            }
        }
    }
    out
}

pub fn nlc_to_nchw<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), n * c * hw);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for p in 0..hw {
            let src = &x[(ni * hw + p) * c..(ni * hw + p + 1) * c];
            for (ch, &v) in src.iter().enumerate() {
                out[(ni * c + ch) * hw + p] = v;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer on (rows, din) activations; weight is (din, dout).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Default, Clone)]
pub struct LinearCache<T> {
    x: Vec<T>,
    rows: usize,
}

impl Linear {
    pub fn declare(
        layout: &mut ParamLayout,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / (din as f64).sqrt();
        let w = layout.add(alloc::format!("{name}.w"), &[din, dout], Init::Normal { std });
        let b = bias.then(|| layout.add(alloc::format!("{name}.b"), &[dout], Init::Zeros));
        Linear { w, b, din, dout }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        rows: usize,
        mut cache: Option<&mut LinearCache<T>>,
    ) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.din);
        let mut y = vec![T::zero(); rows * self.dout];
        matmul(x, ps.get(self.w), rows, self.din, self.dout, &mut y);
        if let Some(b) = self.b {
            let bias = ps.get(b);
            for_each_row(&mut y, self.dout, |_, row| {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            });
        }
        if let Some(c) = cache.as_deref_mut() {
            c.x = x.to_vec();
            c.rows = rows;
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &LinearCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let rows = cache.rows;
        debug_assert_eq!(dy.len(), rows * self.dout);
        matmul_at_b_acc(&cache.x, dy, rows, self.din, self.dout, grad_slice(grads, self.w));
        if let Some(b) = self.b {
            let db = grad_slice(grads, b);
            for row in dy.chunks(self.dout) {
                for (g, &d) in db.iter_mut().zip(row) {
                    *g = *g + d;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * self.din];
        matmul_a_bt(dy, ps.get(self.w), rows, self.dout, self.din, &mut dx);
        dx
    }
}

// ---------------------------------------------------------------------------
// 1x1 convolution on (n, c, h*w) activations
// ---------------------------------------------------------------------------

/// Pointwise convolution; weight is (cout, cin).
#[derive(Debug, Clone, Copy)]
pub struct Conv1x1 {
    pub w: ParamRef,
    pub b: ParamRef,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Default, Clone)]
pub struct Conv1x1Cache<T> {
    x: Vec<T>,
    n: usize,
    hw: usize,
}

impl Conv1x1 {
    pub fn declare(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let std = 1.0 / (cin as f64).sqrt();
        let w = layout.add(alloc::format!("{name}.w"), &[cout, cin], Init::Normal { std });
        let b = layout.add(alloc::format!("{name}.b"), &[cout], Init::Zeros);
        Conv1x1 { w, b, cin, cout }
    }

    /// Same shape but zero-initialized weights; used for the output head.
    pub fn declare_zeroed(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let w = layout.add(alloc::format!("{name}.w"), &[cout, cin], Init::Zeros);
        let b = layout.add(alloc::format!("{name}.b"), &[cout], Init::Zeros);
        Conv1x1 { w, b, cin, cout }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        n: usize,
        hw: usize,
        mut cache: Option<&mut Conv1x1Cache<T>>,
    ) -> Vec<T> {
        debug_assert_eq!(x.len(), n * self.cin * hw);
        let w = ps.get(self.w);
        let b = ps.get(self.b);
        let mut y = vec![T::zero(); n * self.cout * hw];
        for_each_row(&mut y, hw, |row_idx, row| {
            let (ni, co) = (row_idx / self.cout, row_idx % self.cout);
            let bias = b[co];
            row.iter_mut().for_each(|v| *v = bias);
            for ci in 0..self.cin {
                let s = w[co * self.cin + ci];
                let src = &x[(ni * self.cin + ci) * hw..(ni * self.cin + ci + 1) * hw];
                for (o, &xv) in row.iter_mut().zip(src) {
                    *o = *o + s * xv;
                }
            }
        });
        if let Some(c) = cache.as_deref_mut() {
            c.x = x.to_vec();
            c.n = n;
            c.hw = hw;
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &Conv1x1Cache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let (n, hw) = (cache.n, cache.hw);
        debug_assert_eq!(dy.len(), n * self.cout * hw);
        {
            let dw = grad_slice(grads, self.w);
            for_each_row(dw, self.cin, |co, dw_row| {
                for ni in 0..n {
                    let dy_row = &dy[(ni * self.cout + co) * hw..(ni * self.cout + co + 1) * hw];
                    for (ci, g) in dw_row.iter_mut().enumerate() {
                        let x_row = &cache.x[(ni * self.cin + ci) * hw..(ni * self.cin + ci + 1) * hw];
                        let mut acc = T::zero();
                        for (&d, &xv) in dy_row.iter().zip(x_row) {
                            acc = acc + d * xv;
                        }
                        *g = *g + acc;
                    }
                }
            });
        }
        {
            let db = grad_slice(grads, self.b);
            for ni in 0..n {
                for (co, g) in db.iter_mut().enumerate() {
                    let dy_row = &dy[(ni * self.cout + co) * hw..(ni * self.cout + co + 1) * hw];
                    let mut acc = T::zero();
                    for &d in dy_row {
                        acc = acc + d;
                    }
                    *g = *g + acc;
                }
            }
        }
        let w = ps.get(self.w);
        let mut dx = vec![T::zero(); n * self.cin * hw];
        for_each_row(&mut dx, hw, |row_idx, row| {
            let (ni, ci) = (row_idx / self.cin, row_idx % self.cin);
            for co in 0..self.cout {
                let s = w[co * self.cin + ci];
                let dy_row = &dy[(ni * self.cout + co) * hw..(ni * self.cout + co + 1) * hw];
                for (o, &d) in row.iter_mut().zip(dy_row) {
                    *o = *o + s * d;
                }
            }
        });
        dx
    }
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub w: ParamRef,
    pub b: ParamRef,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Default, Clone)]
pub struct Conv3x3Cache<T> {
    x: Vec<T>,
    n: usize,
    h: usize,
    w: usize,
}

impl Conv3x3 {
    pub fn declare(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let std = (2.0 / (cin as f64 * 9.0)).sqrt();
        let w = layout.add(alloc::format!("{name}.w"), &[cout, cin, 3, 3], Init::Normal { std });
        let b = layout.add(alloc::format!("{name}.b"), &[cout], Init::Zeros);
        Conv3x3 { w, b, cin, cout }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        n: usize,
        h: usize,
        w: usize,
        mut cache: Option<&mut Conv3x3Cache<T>>,
    ) -> Vec<T> {
        debug_assert_eq!(x.len(), n * self.cin * h * w);
        let wt = ps.get(self.w);
        let bias = ps.get(self.b);
        let hw = h * w;
        let mut y = vec![T::zero(); n * self.cout * hw];
        for_each_row(&mut y, hw, |row_idx, plane| {
            let (ni, co) = (row_idx / self.cout, row_idx % self.cout);
            plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..self.cin {
                let src = &x[(ni * self.cin + ci) * hw..(ni * self.cin + ci + 1) * hw];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = wt[((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        // Valid output rows for this tap: 0 <= y + ky - 1 < h.
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        for yy in y_lo..y_hi {
                            let sy = yy + ky - 1;
                            let dst = &mut plane[yy * w + x_lo..yy * w + x_hi];
                            let src_row = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                            for (o, &xv) in dst.iter_mut().zip(src_row) {
                                *o = *o + wv * xv;
                            }
                        }
                    }
                }
            }
        });
        if let Some(c) = cache.as_deref_mut() {
            c.x = x.to_vec();
            c.n = n;
            c.h = h;
            c.w = w;
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &Conv3x3Cache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let hw = h * w;
        debug_assert_eq!(dy.len(), n * self.cout * hw);
        let wt = ps.get(self.w);
        {
            // dW: parallel over output channel, sequential over everything else.
            let dw = grad_slice(grads, self.w);
            for_each_row(dw, self.cin * 9, |co, dw_plane| {
                for ni in 0..n {
                    let dy_plane = &dy[(ni * self.cout + co) * hw..(ni * self.cout + co + 1) * hw];
                    for ci in 0..self.cin {
                        let src =
                            &cache.x[(ni * self.cin + ci) * hw..(ni * self.cin + ci + 1) * hw];
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let y_lo = 1usize.saturating_sub(ky);
                                let y_hi = (h + 1 - ky).min(h);
                                let x_lo = 1usize.saturating_sub(kx);
                                let x_hi = (w + 1 - kx).min(w);
                                let mut acc = T::zero();
                                for yy in y_lo..y_hi {
                                    let sy = yy + ky - 1;
                                    let d_row = &dy_plane[yy * w + x_lo..yy * w + x_hi];
                                    let s_row =
                                        &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                                    for (&d, &s) in d_row.iter().zip(s_row) {
                                        acc = acc + d * s;
                                    }
                                }
                                dw_plane[(ci * 3 + ky) * 3 + kx] =
                                    dw_plane[(ci * 3 + ky) * 3 + kx] + acc;
                            }
                        }
                    }
                }
            });
        }
        {
            let db = grad_slice(grads, self.b);
            for ni in 0..n {
                for (co, g) in db.iter_mut().enumerate() {
                    let dy_plane = &dy[(ni * self.cout + co) * hw..(ni * self.cout + co + 1) * hw];
                    let mut acc = T::zero();
                    for &d in dy_plane {
                        acc = acc + d;
                    }
                    *g = *g + acc;
                }
            }
        }
        let mut dx = vec![T::zero(); n * self.cin * hw];
        for_each_row(&mut dx, hw, |row_idx, plane| {
            let (ni, ci) = (row_idx / self.cin, row_idx % self.cin);
            for co in 0..self.cout {
                let dy_plane = &dy[(ni * self.cout + co) * hw..(ni * self.cout + co + 1) * hw];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = wt[((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        for yy in y_lo..y_hi {
                            let sy = yy + ky - 1;
                            let dst = &mut plane[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                            let d_row = &dy_plane[yy * w + x_lo..yy * w + x_hi];
                            for (o, &d) in dst.iter_mut().zip(d_row) {
                                *o = *o + wv * d;
                            }
                        }
                    }
                }
            }
        });
        dx
    }
}

// ---------------------------------------------------------------------------
// Layer normalization over the channel dimension of (rows, c) activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub dim: usize,
}

#[derive(Debug, Default, Clone)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        let gamma = layout.add(alloc::format!("{name}.g"), &[dim], Init::Ones);
        let beta = layout.add(alloc::format!("{name}.b"), &[dim], Init::Zeros);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &[T],
        mut cache: Option<&mut LayerNormCache<T>>,
    ) -> Vec<T> {
        let dim = self.dim;
        debug_assert_eq!(x.len() % dim, 0);
        let rows = x.len() / dim;
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = cache.is_some().then(|| vec![T::zero(); x.len()]);
        let mut rstds = cache.is_some().then(|| vec![T::zero(); rows]);
        let inv_dim = T::one() / t::<T>(dim as f64);
        let eps = t::<T>(LN_EPS);
        for r in 0..rows {
            let x_row = &x[r * dim..(r + 1) * dim];
            let mut mean = T::zero();
            for &v in x_row {
                mean = mean + v;
            }
            mean = mean * inv_dim;
            let mut var = T::zero();
            for &v in x_row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_dim;
            let rstd = T::one() / (var + eps).sqrt();
            let y_row = &mut y[r * dim..(r + 1) * dim];
            for (i, (&v, o)) in x_row.iter().zip(y_row.iter_mut()).enumerate() {
                let xh = (v - mean) * rstd;
                *o = gamma[i] * xh + beta[i];
                if let Some(buf) = xhat.as_mut() {
                    buf[r * dim + i] = xh;
                }
            }
            if let Some(buf) = rstds.as_mut() {
                buf[r] = rstd;
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.xhat = xhat.unwrap();
            c.rstd = rstds.unwrap();
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        grads: &mut Grads<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let dim = self.dim;
        let rows = cache.rstd.len();
        debug_assert_eq!(dy.len(), rows * dim);
        let gamma = ps.get(self.gamma);
        {
            let dgamma = grad_slice(grads, self.gamma);
            for r in 0..rows {
                for i in 0..dim {
                    dgamma[i] = dgamma[i] + dy[r * dim + i] * cache.xhat[r * dim + i];
                }
            }
        }
        {
            let dbeta = grad_slice(grads, self.beta);
            for r in 0..rows {
                for i in 0..dim {
                    dbeta[i] = dbeta[i] + dy[r * dim + i];
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        let inv_dim = T::one() / t::<T>(dim as f64);
        for r in 0..rows {
            let dy_row = &dy[r * dim..(r + 1) * dim];
            let xh_row = &cache.xhat[r * dim..(r + 1) * dim];
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for i in 0..dim {
                let dxh = dy_row[i] * gamma[i];
                mean_dxhat = mean_dxhat + dxh;
                mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh_row[i];
            }
            mean_dxhat = mean_dxhat * inv_dim;
            mean_dxhat_xhat = mean_dxhat_xhat * inv_dim;
            let rstd = cache.rstd[r];
            let dx_row = &mut dx[r * dim..(r + 1) * dim];
            for i in 0..dim {
                let dxh = dy_row[i] * gamma[i];
                dx_row[i] = rstd * (dxh - mean_dxhat - xh_row[i] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// SiLU activation
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
pub struct SiluCache<T> {
    x: Vec<T>,
}

pub fn silu_forward<T: Real>(x: &[T], mut cache: Option<&mut SiluCache<T>>) -> Vec<T> {
    let y = x
        .iter()
        .map(|&v| {
            let sig = T::one() / (T::one() + (-v).exp());
            v * sig
        })
        .collect();
    if let Some(c) = cache.as_deref_mut() {
        c.x = x.to_vec();
    }
    y
}

pub fn silu_backward<T: Real>(cache: &SiluCache<T>, dy: &[T]) -> Vec<T> {
    cache
        .x
        .iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let sig = T::one() / (T::one() + (-v).exp());
            d * sig * (T::one() + v * (T::one() - sig))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 2x2 average pooling and nearest-neighbor upsampling on (n, c, h, w)
// ---------------------------------------------------------------------------

pub fn avg_pool2<T: Real>(x: &[T], n_planes: usize, h: usize, w: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), n_planes * h * w);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = t::<T>(0.25);
    let mut y = vec![T::zero(); n_planes * oh * ow];
    for p in 0..n_planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                let s = src[2 * r * w + 2 * c]
                    + src[2 * r * w + 2 * c + 1]
                    + src[(2 * r + 1) * w + 2 * c]
                    + src[(2 * r + 1) * w + 2 * c + 1];
                dst[r * ow + c] = s * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], n_planes: usize, oh: usize, ow: usize) -> Vec<T> {
    let (h, w) = (oh * 2, ow * 2);
    let quarter = t::<T>(0.25);
    let mut dx = vec![T::zero(); n_planes * h * w];
    for p in 0..n_planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..oh {
            for c in 0..ow {
                let g = src[r * ow + c] * quarter;
                dst[2 * r * w + 2 * c] = g;
                dst[2 * r * w + 2 * c + 1] = g;
                dst[(2 * r + 1) * w + 2 * c] = g;
                dst[(2 * r + 1) * w + 2 * c + 1] = g;
            }
        }
    }
    dx
}

pub fn upsample_nearest2<T: Real>(x: &[T], n_planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h * 2, w * 2);
    let mut y = vec![T::zero(); n_planes * oh * ow];
    for p in 0..n_planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for r in 0..h {
            for c in 0..w {
                let v = src[r * w + c];
                dst[2 * r * ow + 2 * c] = v;
                dst[2 * r * ow + 2 * c + 1] = v;
                dst[(2 * r + 1) * ow + 2 * c] = v;
                dst[(2 * r + 1) * ow + 2 * c + 1] = v;
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward<T: Real>(
    dy: &[T],
    n_planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    // h, w are the *input* (pre-upsample) dimensions.
    let (oh, ow) = (h * 2, w * 2);
    debug_assert_eq!(dy.len(), n_planes * oh * ow);
    let mut dx = vec![T::zero(); n_planes * h * w];
    for p in 0..n_planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = src[2 * r * ow + 2 * c]
                    + src[2 * r * ow + 2 * c + 1]
                    + src[(2 * r + 1) * ow + 2 * c]
                    + src[(2 * r + 1) * ow + 2 * c + 1];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep features
// ---------------------------------------------------------------------------

/// Classic transformer sinusoidal features of an integer timestep.
pub fn timestep_features<T: Real>(timestep: usize, dim: usize) -> Vec<T> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * (10_000.0f64).ln()).exp();
        let arg = timestep as f64 * freq;
        out[i] = t::<T>(arg.sin());
        out[i + half] = t::<T>(arg.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check<F: FnMut(&[f64]) -> f64>(
        params: &mut [f64],
        analytic: &[f64],
        mut loss: F,
        tol: f64,
    ) {
        let h = 1e-5;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let lp = loss(params);
            params[i] = orig - h;
            let lm = loss(params);
            params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            let rel = (fd - analytic[i]).abs() / denom;
            assert!(rel < tol, "param {i}: analytic {} vs fd {fd}", analytic[i]);
        }
    }

    fn sum_loss(y: &[f64]) -> f64 {
        // L = sum(y^2) / 2 so dL/dy = y.
        y.iter().map(|v| v * v).sum::<f64>() / 2.0
    }

    #[test]
    fn matmul_matches_naive() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0f32; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree_with_naive() {
        let mut rng = crate::rng::DetRng::new(5);
        let (m, k, n, rows) = (3, 4, 5, 6);
        let a: Vec<f64> = (0..rows * m).map(|_| rng.next_normal_f64()).collect();
        let b: Vec<f64> = (0..rows * n).map(|_| rng.next_normal_f64()).collect();
        let mut out = vec![0.0; m * n];
        matmul_at_b_acc(&a, &b, rows, m, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let naive: f64 = (0..rows).map(|r| a[r * m + i] * b[r * n + j]).sum();
                assert!((out[i * n + j] - naive).abs() < 1e-12);
            }
        }
        let c: Vec<f64> = (0..m * k).map(|_| rng.next_normal_f64()).collect();
        let d: Vec<f64> = (0..n * k).map(|_| rng.next_normal_f64()).collect();
        let mut out2 = vec![0.0; m * n];
        matmul_a_bt(&c, &d, m, k, n, &mut out2);
        for i in 0..m {
            for j in 0..n {
                let naive: f64 = (0..k).map(|x| c[i * k + x] * d[j * k + x]).sum();
                assert!((out2[i * n + j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches_fd() {
        let mut data = vec![0.3f64, -1.0, 2.0, 0.0, 0.1, 0.2, -0.4, 1.5];
        let orig = data.clone();
        softmax_rows_in_place(&mut data, 4);
        for row in data.chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // FD check of the softmax jacobian through a quadratic loss.
        let mut x = orig.clone();
        let loss = |x: &[f64]| {
            let mut p = x.to_vec();
            softmax_rows_in_place(&mut p, 4);
            sum_loss(&p)
        };
        let mut dp = data.clone(); // dL/dp = p for this loss
        softmax_rows_backward_in_place(&data, &mut dp, 4);
        fd_check(&mut x, &dp.clone(), loss, 1e-6);
    }

    #[test]
    fn transposes_invert_each_other() {
        let mut rng = crate::rng::DetRng::new(8);
        let (n, c, hw) = (2, 3, 4);
        let x: Vec<f32> = (0..n * c * hw).map(|_| rng.next_f32()).collect();
        let y = nchw_to_nlc(&x, n, c, hw);
        let back = nlc_to_nchw(&y, n, c, hw);
        assert_eq!(x, back);
    }

    #[test]
    fn linear_gradients_match_fd() {
        let mut layout = ParamLayout::default();
        let lin = Linear::declare(&mut layout, "l", 3, 2, true);
        let ps: ParamSet<f64> = layout.init(1);
        let x = vec![0.4, -0.2, 0.9, 0.0, 1.0, -1.0];
        // Analytic gradients.
        let mut cache = LinearCache::default();
        let y = lin.forward(&ps, &x, 2, Some(&mut cache));
        let mut grads = vec![0.0; ps.data.len()];
        let dx = lin.backward(&ps, &mut grads, &cache, &y.clone());
        // FD over parameters.
        let mut pdata = ps.data.clone();
        let meta = ps.meta.clone();
        fd_check(
            &mut pdata,
            &grads,
            |p| {
                let ps2 = ParamSet { meta: meta.clone(), data: p.to_vec() };
                sum_loss(&lin.forward(&ps2, &x, 2, None))
            },
            1e-6,
        );
        // FD over inputs.
        let mut xv = x.clone();
        fd_check(
            &mut xv,
            &dx,
            |xi| sum_loss(&lin.forward(&ps, xi, 2, None)),
            1e-6,
        );
    }

    #[test]
    fn conv1x1_gradients_match_fd() {
        let mut layout = ParamLayout::default();
        let conv = Conv1x1::declare(&mut layout, "c", 3, 2, );
        let ps: ParamSet<f64> = layout.init(2);
        let (n, hw) = (2, 4);
        let mut rng = crate::rng::DetRng::new(3);
        let x: Vec<f64> = (0..n * 3 * hw).map(|_| rng.next_normal_f64()).collect();
        let mut cache = Conv1x1Cache::default();
        let y = conv.forward(&ps, &x, n, hw, Some(&mut cache));
        let mut grads = vec![0.0; ps.data.len()];
        let dx = conv.backward(&ps, &mut grads, &cache, &y.clone());
        let mut pdata = ps.data.clone();
        let meta = ps.meta.clone();
        fd_check(
            &mut pdata,
            &grads,
            |p| {
                let ps2 = ParamSet { meta: meta.clone(), data: p.to_vec() };
                sum_loss(&conv.forward(&ps2, &x, n, hw, None))
            },
            1e-6,
        );
        let mut xv = x.clone();
        fd_check(&mut xv, &dx, |xi| sum_loss(&conv.forward(&ps, xi, n, hw, None)), 1e-6);
    }

    #[test]
    fn conv3x3_gradients_match_fd() {
        let mut layout = ParamLayout::default();
        let conv = Conv3x3::declare(&mut layout, "c", 2, 3);
        let ps: ParamSet<f64> = layout.init(4);
        let (n, h, w) = (1, 4, 5);
        let mut rng = crate::rng::DetRng::new(9);
        let x: Vec<f64> = (0..n * 2 * h * w).map(|_| rng.next_normal_f64()).collect();
        let mut cache = Conv3x3Cache::default();
        let y = conv.forward(&ps, &x, n, h, w, Some(&mut cache));
        let mut grads = vec![0.0; ps.data.len()];
        let dx = conv.backward(&ps, &mut grads, &cache, &y.clone());
        let mut pdata = ps.data.clone();
        let meta = ps.meta.clone();
        fd_check(
            &mut pdata,
            &grads,
            |p| {
                let ps2 = ParamSet { meta: meta.clone(), data: p.to_vec() };
                sum_loss(&conv.forward(&ps2, &x, n, h, w, None))
            },
            1e-6,
        );
        let mut xv = x.clone();
        fd_check(&mut xv, &dx, |xi| sum_loss(&conv.forward(&ps, xi, n, h, w, None)), 1e-6);
    }

    #[test]
    fn layernorm_gradients_match_fd() {
        let mut layout = ParamLayout::default();
        let ln = LayerNorm::declare(&mut layout, "ln", 4);
        let mut ps: ParamSet<f64> = layout.init(5);
        // Perturb gamma/beta so gradients are nontrivial.
        let mut rng = crate::rng::DetRng::new(6);
        for v in ps.data.iter_mut() {
            *v = *v + 0.3 * rng.next_normal_f64();
        }
        let x: Vec<f64> = (0..8).map(|_| rng.next_normal_f64()).collect();
        let mut cache = LayerNormCache::default();
        let y = ln.forward(&ps, &x, Some(&mut cache));
        let mut grads = vec![0.0; ps.data.len()];
        let dx = ln.backward(&ps, &mut grads, &cache, &y.clone());
        let mut pdata = ps.data.clone();
        let meta = ps.meta.clone();
        fd_check(
            &mut pdata,
            &grads,
            |p| {
                let ps2 = ParamSet { meta: meta.clone(), data: p.to_vec() };
                sum_loss(&ln.forward(&ps2, &x, None))
            },
            1e-5,
        );
        let mut xv = x.clone();
        fd_check(&mut xv, &dx, |xi| sum_loss(&ln.forward(&ps, xi, None)), 1e-5);
    }

    #[test]
    fn silu_backward_matches_fd() {
        let x = vec![-2.0f64, -0.5, 0.0, 0.7, 3.0];
        let mut cache = SiluCache::default();
        let y = silu_forward(&x, Some(&mut cache));
        let dx = silu_backward(&cache, &y.clone());
        let mut xv = x.clone();
        fd_check(&mut xv, &dx, |xi| sum_loss(&silu_forward(xi, None)), 1e-6);
    }

    #[test]
    fn pool_and_upsample_backwards_are_adjoint() {
        // <pool(x), y> == <x, pool_backward(y)> characterizes the transpose.
        let mut rng = crate::rng::DetRng::new(10);
        let (p, h, w) = (3, 4, 6);
        let x: Vec<f64> = (0..p * h * w).map(|_| rng.next_normal_f64()).collect();
        let y: Vec<f64> = (0..p * (h / 2) * (w / 2)).map(|_| rng.next_normal_f64()).collect();
        let px = avg_pool2(&x, p, h, w);
        let bty = avg_pool2_backward(&y, p, h / 2, w / 2);
        let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&bty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let yu: Vec<f64> = (0..p * h * w * 4).map(|_| rng.next_normal_f64()).collect();
        let ux = upsample_nearest2(&x, p, h, w);
        let bt = upsample_nearest2_backward(&yu, p, h, w);
        let lhs2: f64 = ux.iter().zip(&yu).map(|(a, b)| a * b).sum();
        let rhs2: f64 = x.iter().zip(&bt).map(|(a, b)| a * b).sum();
        assert!((lhs2 - rhs2).abs() < 1e-10);
    }

    #[test]
    fn timestep_features_are_bounded_and_distinct() {
        let a: Vec<f64> = timestep_features(10, 64);
        let b: Vec<f64> = timestep_features(11, 64);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
