//! Gradient estimation through the quantized accumulation graph.
//!
//! The quantized forward pass is a chain of non-differentiable quantizers,
//! so gradients are estimated with straight-through masks: each summand of
//! each output scalar either passes its exact product-rule gradient (mask 1)
//! or is dropped (mask 0). Masks are recovered during the backward pass by
//! deterministically re-executing the forward accumulation — nothing is
//! recorded at forward time, which keeps the memory cost at one bit per
//! multiply-accumulate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmaq::{
    accumulate_chunked_traced, gemm_exact, AccumTrace, FmaqConfig, FmaqKernel, TraceOptions,
};
use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("vector length mismatch: x has {0} elements, w has {1}")]
    LengthMismatch(usize, usize),
    #[error(
        "shape mismatch: A {a_rows}x{a_cols}, B {b_rows}x{b_cols}, upstream {u_rows}x{u_cols}"
    )]
    ShapeMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
        u_rows: usize,
        u_cols: usize,
    },
}

/// Which straight-through estimator masks gradients.
///
/// `ImmediateOf` drops a summand when its own accumulation step saturated;
/// `ImmediateDiff` drops it when the step moved the partial sum by less than
/// `eps2` of the product (with `eps1` as a floor on the denominator);
/// `RecursiveOf` composes the overflow indicators of every step downstream
/// of the summand, so one saturation wipes out everything accumulated up to
/// that point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteKind {
    Identity,
    RecursiveOf,
    ImmediateOf,
    ImmediateDiff { eps1: f64, eps2: f64 },
}

impl SteKind {
    /// `ImmediateDiff` with the default thresholds for a datapath: `eps1` is
    /// the smallest positive product-format value, `eps2` is one half.
    pub fn immediate_diff_default(cfg: &FmaqConfig) -> Self {
        let opts = TraceOptions::for_config(cfg);
        SteKind::ImmediateDiff { eps1: opts.eps1, eps2: opts.eps2 }
    }

    fn trace_options(&self, cfg: &FmaqConfig) -> TraceOptions {
        match self {
            SteKind::ImmediateDiff { eps1, eps2 } => TraceOptions::new(*eps1, *eps2),
            _ => TraceOptions::for_config(cfg),
        }
    }
}

/// Per-summand gradient mask bits for one output scalar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SteMask(pub Vec<bool>);

impl SteMask {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Derive the mask bits for one accumulation from its event trace.
pub fn masks_from_trace(trace: &AccumTrace, kind: &SteKind) -> SteMask {
    let n = trace.len();
    let bits = match kind {
        SteKind::Identity => vec![true; n],
        SteKind::ImmediateOf => trace.acc_of.iter().map(|&of| !of).collect(),
        SteKind::ImmediateDiff { .. } => trace.diff_bit.clone(),
        SteKind::RecursiveOf => recursive_bits(trace),
    };
    SteMask(bits)
}

/// Recursive overflow rule on the chunked tree: within a chunk, the last
/// overflowing step zeroes itself and everything before it in that chunk;
/// an overflow while folding chunk `l` into the spine zeroes all of chunks
/// `0..=l`.
fn recursive_bits(trace: &AccumTrace) -> Vec<bool> {
    let n = trace.len();
    let chunk = trace.chunk_size;
    let mut bits = vec![true; n];
    let spine_last = trace.spine_of.iter().rposition(|&b| b);
    let mut start = 0;
    let mut j = 0;
    while start < n {
        let end = (start + chunk).min(n);
        if spine_last.is_some_and(|l| j <= l) {
            bits[start..end].fill(false);
        } else if let Some(p) = trace.acc_of[start..end].iter().rposition(|&b| b) {
            bits[start..start + p + 1].fill(false);
        }
        start = end;
        j += 1;
    }
    bits
}

/// Mask bits for one accumulation, computed by re-executing it with tracing.
pub fn compute_masks(
    xs: &[f64],
    ws: &[f64],
    cfg: &FmaqConfig,
    kind: &SteKind,
) -> Result<SteMask, GradError> {
    if xs.len() != ws.len() {
        return Err(GradError::LengthMismatch(xs.len(), ws.len()));
    }
    if matches!(kind, SteKind::Identity) {
        return Ok(SteMask(vec![true; xs.len()]));
    }
    let opts = kind.trace_options(cfg);
    let (_, trace) = accumulate_chunked_traced(xs, ws, cfg, &opts)
        .expect("lengths checked above");
    Ok(masks_from_trace(&trace, kind))
}

/// Realized per-summand multipliers `alpha_i = (FMAq(x_i, w_i, S_i) - S_i)
/// / (x_i * w_i)`, with zero products mapping to zero.
pub fn alpha_values(xs: &[f64], ws: &[f64], cfg: &FmaqConfig) -> Result<Vec<f64>, GradError> {
    if xs.len() != ws.len() {
        return Err(GradError::LengthMismatch(xs.len(), ws.len()));
    }
    let opts = TraceOptions::for_config(cfg);
    let (_, trace) = accumulate_chunked_traced(xs, ws, cfg, &opts)
        .expect("lengths checked above");
    Ok(trace.alpha)
}

/// Bit-packed mask bits for every (output scalar, summand) pair of a GEMM.
///
/// Scalars are indexed row-major over the K x L output; each scalar owns a
/// padded run of `ceil(N/64)` words so parallel writers never share a word.
pub struct MaskGrid {
    rows: usize,
    cols: usize,
    inner: usize,
    stride: usize,
    words: Vec<u64>,
}

impl MaskGrid {
    fn new(rows: usize, cols: usize, inner: usize) -> Self {
        let stride = inner.div_ceil(64).max(1);
        Self { rows, cols, inner, stride, words: vec![0; rows * cols * stride] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn inner(&self) -> usize {
        self.inner
    }

    #[inline]
    pub fn bit(&self, k: usize, l: usize, i: usize) -> bool {
        debug_assert!(k < self.rows && l < self.cols && i < self.inner);
        let base = (k * self.cols + l) * self.stride;
        self.words[base + i / 64] >> (i % 64) & 1 != 0
    }

    #[inline]
    fn scalar_words(&self, k: usize, l: usize) -> &[u64] {
        let base = (k * self.cols + l) * self.stride;
        &self.words[base..base + self.stride]
    }

    /// Number of zero masks in the whole grid.
    pub fn zeros(&self) -> usize {
        let ones: u32 = self.words.iter().map(|w| w.count_ones()).sum();
        self.rows * self.cols * self.inner - ones as usize
    }
}

/// Recompute the mask grid of a forward GEMM `A (K x N) x B (N x L)`.
///
/// Re-execution follows the forward schedule exactly: same chunking, same
/// index order, per output scalar.
pub fn gemm_mask_grid(
    a: &Matrix,
    b: &Matrix,
    cfg: &FmaqConfig,
    kind: &SteKind,
) -> Result<MaskGrid, GradError> {
    let (k_dim, n, l_dim) = (a.rows(), a.cols(), b.cols());
    if n != b.rows() {
        return Err(GradError::ShapeMismatch {
            a_rows: a.rows(),
            a_cols: a.cols(),
            b_rows: b.rows(),
            b_cols: b.cols(),
            u_rows: k_dim,
            u_cols: l_dim,
        });
    }
    let mut grid = MaskGrid::new(k_dim, l_dim, n);
    if matches!(kind, SteKind::Identity) {
        fill_ones(&mut grid);
        return Ok(grid);
    }
    let kernel = cfg.kernel();
    let bt = b.transpose();
    let stride = grid.stride;
    let work = k_dim * l_dim * n;
    let scalar_job = |scalar: usize, words: &mut [u64]| {
        let (k, l) = (scalar / l_dim, scalar % l_dim);
        scalar_mask_words(&kernel, a.row(k), bt.row(l), kind, words);
    };
    if work >= 1 << 14 {
        grid.words
            .par_chunks_mut(stride)
            .enumerate()
            .for_each(|(scalar, words)| scalar_job(scalar, words));
    } else {
        for (scalar, words) in grid.words.chunks_mut(stride).enumerate() {
            scalar_job(scalar, words);
        }
    }
    Ok(grid)
}

fn fill_ones(grid: &mut MaskGrid) {
    let (n, stride) = (grid.inner, grid.stride);
    for words in grid.words.chunks_mut(stride) {
        for (w, word) in words.iter_mut().enumerate() {
            let lo = w * 64;
            let bits = n.saturating_sub(lo).min(64);
            *word = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        }
    }
}

/// Mask bits of one output scalar, written straight into its packed words.
///
/// This walks the same chunked schedule as the forward kernel; equivalence
/// with the trace-derived masks is pinned by tests.
fn scalar_mask_words(
    kernel: &FmaqKernel,
    xs: &[f32],
    ws: &[f32],
    kind: &SteKind,
    words: &mut [u64],
) {
    let n = xs.len();
    let acc_r_of = kernel.qacc.r_of();
    words.fill(0);
    match kind {
        SteKind::Identity => unreachable!("identity handled by caller"),
        SteKind::ImmediateOf => {
            let mut spine = 0.0;
            let mut first = true;
            let mut base = 0;
            while base < n {
                let end = (base + kernel.chunk).min(n);
                let mut c = 0.0;
                for i in base..end {
                    let pq = kernel.qprod.apply(xs[i] as f64 * ws[i] as f64);
                    let raw = pq + c;
                    if raw.abs() < acc_r_of {
                        words[i / 64] |= 1u64 << (i % 64);
                    }
                    c = kernel.qacc.apply(raw);
                }
                if first {
                    spine = c;
                    first = false;
                } else {
                    spine = kernel.qacc.apply(spine + c);
                }
                base = end;
            }
        }
        SteKind::ImmediateDiff { eps1, eps2 } => {
            let mut spine = 0.0;
            let mut first = true;
            let mut base = 0;
            while base < n {
                let end = (base + kernel.chunk).min(n);
                let mut c = 0.0;
                for i in base..end {
                    let p = xs[i] as f64 * ws[i] as f64;
                    let z = kernel.qacc.apply(kernel.qprod.apply(p) + c);
                    if (z - c).abs() / (p.abs() + eps1) > *eps2 {
                        words[i / 64] |= 1u64 << (i % 64);
                    }
                    c = z;
                }
                if first {
                    spine = c;
                    first = false;
                } else {
                    spine = kernel.qacc.apply(spine + c);
                }
                base = end;
            }
        }
        SteKind::RecursiveOf => {
            // First mark the surviving suffix of each chunk, then let a
            // trailing spine overflow erase whole chunk prefixes.
            let mut spine = 0.0;
            let mut first = true;
            let mut base = 0;
            let mut spine_last: Option<usize> = None;
            let mut j = 0;
            while base < n {
                let end = (base + kernel.chunk).min(n);
                let mut c = 0.0;
                let mut last_of: Option<usize> = None;
                for i in base..end {
                    let raw = kernel.qprod.apply(xs[i] as f64 * ws[i] as f64) + c;
                    if raw.abs() >= acc_r_of {
                        last_of = Some(i);
                    }
                    c = kernel.qacc.apply(raw);
                }
                let from = last_of.map_or(base, |i| i + 1);
                for i in from..end {
                    words[i / 64] |= 1u64 << (i % 64);
                }
                if first {
                    spine = c;
                    first = false;
                } else {
                    let raw = spine + c;
                    if raw.abs() >= acc_r_of {
                        spine_last = Some(j);
                    }
                    spine = kernel.qacc.apply(raw);
                }
                base = end;
                j += 1;
            }
            if let Some(l) = spine_last {
                let end_bit = ((l + 1) * kernel.chunk).min(n);
                for i in 0..end_bit {
                    words[i / 64] &= !(1u64 << (i % 64));
                }
            }
        }
    }
}

/// Masked GEMM backward: gradients of `upstream x d(A B)` with the chosen
/// estimator's mask bit applied per (output scalar, summand) pair.
///
/// `grad_A[k,i] = sum_l upstream[k,l] * B[i,l] * m(k,l,i)` and
/// `grad_B[i,l] = sum_k upstream[k,l] * A[k,i] * m(k,l,i)`; `Identity` is
/// the exact unmasked backward and skips mask recomputation entirely.
pub fn gemm_backward(
    a: &Matrix,
    b: &Matrix,
    upstream: &Matrix,
    cfg: &FmaqConfig,
    kind: &SteKind,
) -> Result<(Matrix, Matrix), GradError> {
    let (k_dim, n, l_dim) = (a.rows(), a.cols(), b.cols());
    if n != b.rows() || upstream.rows() != k_dim || upstream.cols() != l_dim {
        return Err(GradError::ShapeMismatch {
            a_rows: a.rows(),
            a_cols: a.cols(),
            b_rows: b.rows(),
            b_cols: b.cols(),
            u_rows: upstream.rows(),
            u_cols: upstream.cols(),
        });
    }
    if matches!(kind, SteKind::Identity) {
        let grad_a = gemm_exact(upstream, &b.transpose()).expect("shapes checked");
        let grad_b = gemm_exact(&a.transpose(), upstream).expect("shapes checked");
        return Ok((grad_a, grad_b));
    }
    let grid = gemm_mask_grid(a, b, cfg, kind)?;
    let bt = b.transpose();

    // grad_A rows are independent; sum over l in ascending order to match
    // the exact backward bit for bit when every mask is set.
    let mut grad_a = Matrix::zeros(k_dim, n);
    let a_row_job = |k: usize, dst: &mut [f32]| {
        let mut acc = vec![0.0f64; n];
        for l in 0..l_dim {
            let coeff = upstream.get(k, l) as f64;
            let col = bt.row(l);
            let words = grid.scalar_words(k, l);
            for (i, slot) in acc.iter_mut().enumerate() {
                if words[i / 64] >> (i % 64) & 1 != 0 {
                    *slot += coeff * col[i] as f64;
                }
            }
        }
        for (slot, v) in dst.iter_mut().zip(acc) {
            *slot = v as f32;
        }
    };
    // grad_B computed transposed (one row per l) for disjoint parallel
    // writes, then flipped back.
    let mut grad_bt = Matrix::zeros(l_dim, n);
    let b_row_job = |l: usize, dst: &mut [f32]| {
        let mut acc = vec![0.0f64; n];
        for k in 0..k_dim {
            let coeff = upstream.get(k, l) as f64;
            let row = a.row(k);
            let words = grid.scalar_words(k, l);
            for (i, slot) in acc.iter_mut().enumerate() {
                if words[i / 64] >> (i % 64) & 1 != 0 {
                    *slot += coeff * row[i] as f64;
                }
            }
        }
        for (slot, v) in dst.iter_mut().zip(acc) {
            *slot = v as f32;
        }
    };
    if k_dim * l_dim * n >= 1 << 14 {
        grad_a
            .data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(k, dst)| a_row_job(k, dst));
        grad_bt
            .data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(l, dst)| b_row_job(l, dst));
    } else {
        for (k, dst) in grad_a.data_mut().chunks_mut(n).enumerate() {
            a_row_job(k, dst);
        }
        for (l, dst) in grad_bt.data_mut().chunks_mut(n).enumerate() {
            b_row_job(l, dst);
        }
    }
    Ok((grad_a, grad_bt.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmaq::accumulate_chunked;
    use crate::qformats::FloatFormat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn narrow_cfg() -> FmaqConfig {
        let prod = FloatFormat::new(7, 4, 12).unwrap();
        let acc = FloatFormat::new(7, 4, 10).unwrap();
        FmaqConfig::new(prod, acc).unwrap()
    }

    #[test]
    fn identity_masks_are_all_ones() {
        let cfg = narrow_cfg();
        let xs = vec![0.5, -0.25, 1.0];
        let ws = vec![1.0, 2.0, -0.5];
        let m = compute_masks(&xs, &ws, &cfg, &SteKind::Identity).unwrap();
        assert_eq!(m.bits(), &[true, true, true]);
    }

    #[test]
    fn crafted_overflow_masks() {
        // Product and accumulator share M7E4 b10, so both saturate at
        // 63.75. Steps: 32, then +32 overflows (64 >= 63.75), then -8 stays
        // in range. The recursive rule wipes everything at or before the
        // overflow; the immediate rule only drops the overflowing step.
        let fmt = FloatFormat::new(7, 4, 10).unwrap();
        let cfg = FmaqConfig::new(fmt, fmt).unwrap();
        let xs = vec![32.0, 32.0, -8.0];
        let ws = vec![1.0, 1.0, 1.0];
        let rec = compute_masks(&xs, &ws, &cfg, &SteKind::RecursiveOf).unwrap();
        assert_eq!(rec.bits(), &[false, false, true]);
        let imm = compute_masks(&xs, &ws, &cfg, &SteKind::ImmediateOf).unwrap();
        assert_eq!(imm.bits(), &[true, false, true]);
    }

    #[test]
    fn full_swamp_zeroes_diff_mask() {
        // Accumulator M4: ulp at e=3 is 0.5, so 8 + 0.25 truncates straight
        // back to 8 — the second product registers nothing.
        let prod = FloatFormat::new(7, 4, 12).unwrap();
        let acc = FloatFormat::new(4, 4, 8).unwrap();
        let cfg = FmaqConfig::new(prod, acc).unwrap();
        let xs = vec![8.0, 0.25];
        let ws = vec![1.0, 1.0];
        let y = accumulate_chunked(&xs, &ws, &cfg).unwrap();
        assert_eq!(y, 8.0, "second summand must swamp entirely");
        let kind = SteKind::immediate_diff_default(&cfg);
        let m = compute_masks(&xs, &ws, &cfg, &kind).unwrap();
        assert_eq!(m.bits(), &[true, false]);
    }

    #[test]
    fn alpha_examples() {
        let cfg = narrow_cfg();
        // Zero product, clean product, fully swamped product.
        let prod = FloatFormat::new(7, 4, 12).unwrap();
        let acc = FloatFormat::new(4, 4, 8).unwrap();
        let cfg2 = FmaqConfig::new(prod, acc).unwrap();
        let alphas = alpha_values(&[1.0, 8.0, 0.25], &[0.0, 1.0, 1.0], &cfg2).unwrap();
        assert_eq!(alphas[0], 0.0);
        assert_eq!(alphas[1], 1.0);
        assert_eq!(alphas[2], 0.0);
        // No events at all: every alpha is exactly 1.
        let alphas = alpha_values(&[0.5, 1.5, -2.0], &[1.0, 1.0, 1.0], &cfg).unwrap();
        assert!(alphas.iter().all(|&a| a == 1.0), "{alphas:?}");
    }

    #[test]
    fn packed_grid_matches_trace_masks() {
        let cfg = FmaqConfig::with_options(
            FloatFormat::new(4, 3, 6).unwrap(),
            FloatFormat::new(4, 3, 4).unwrap(),
            4,
            true,
            0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kinds = [
            SteKind::ImmediateOf,
            SteKind::RecursiveOf,
            SteKind::immediate_diff_default(&cfg),
        ];
        for _ in 0..50 {
            let (k, n, l) = (3, 11, 2);
            let a = Matrix::from_vec(
                k,
                n,
                (0..k * n).map(|_| (rng.gen::<f32>() * 4.0 - 2.0)).collect(),
            );
            let b = Matrix::from_vec(
                n,
                l,
                (0..n * l).map(|_| (rng.gen::<f32>() * 4.0 - 2.0)).collect(),
            );
            for kind in &kinds {
                let grid = gemm_mask_grid(&a, &b, &cfg, kind).unwrap();
                for kk in 0..k {
                    for ll in 0..l {
                        let xs: Vec<f64> = a.row(kk).iter().map(|&v| v as f64).collect();
                        let ws: Vec<f64> = (0..n).map(|i| b.get(i, ll) as f64).collect();
                        let want = compute_masks(&xs, &ws, &cfg, kind).unwrap();
                        for i in 0..n {
                            assert_eq!(
                                grid.bit(kk, ll, i),
                                want.bits()[i],
                                "kind {kind:?} scalar ({kk},{ll}) summand {i}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_backward_is_exact_matmul_backward() {
        let cfg = narrow_cfg();
        let a = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let b = Matrix::from_vec(3, 2, vec![0.5, 1.0, -1.0, 2.0, 0.25, -0.5]);
        let up = Matrix::from_vec(2, 2, vec![1.0, 0.5, -1.0, 2.0]);
        let (ga, gb) = gemm_backward(&a, &b, &up, &cfg, &SteKind::Identity).unwrap();
        // grad_A[k][i] = sum_l up[k][l] * b[i][l]
        for k in 0..2 {
            for i in 0..3 {
                let want: f64 = (0..2)
                    .map(|l| up.get(k, l) as f64 * b.get(i, l) as f64)
                    .sum();
                assert_eq!(ga.get(k, i), want as f32);
            }
        }
        for i in 0..3 {
            for l in 0..2 {
                let want: f64 = (0..2)
                    .map(|k| up.get(k, l) as f64 * a.get(k, i) as f64)
                    .sum();
                assert_eq!(gb.get(i, l), want as f32);
            }
        }
    }

    #[test]
    fn all_ones_masks_equal_identity_backward() {
        // A wide accumulator records no overflow, underflow, or full-swamp
        // events on these inputs, so every estimator must coincide with the
        // identity gradients bit for bit.
        let prod = FloatFormat::new(23, 8, 127).unwrap();
        let acc = FloatFormat::new(40, 8, 127).unwrap();
        let cfg = FmaqConfig::new(prod, acc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_vec(3, 5, (0..15).map(|_| rng.gen::<f32>() - 0.5).collect());
        let b = Matrix::from_vec(5, 4, (0..20).map(|_| rng.gen::<f32>() - 0.5).collect());
        let up = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen::<f32>() - 0.5).collect());
        let (ga0, gb0) = gemm_backward(&a, &b, &up, &cfg, &SteKind::Identity).unwrap();
        for kind in [
            SteKind::RecursiveOf,
            SteKind::ImmediateOf,
            SteKind::immediate_diff_default(&cfg),
        ] {
            let (ga, gb) = gemm_backward(&a, &b, &up, &cfg, &kind).unwrap();
            assert_eq!(ga, ga0, "{kind:?}");
            assert_eq!(gb, gb0, "{kind:?}");
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = narrow_cfg();
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let up = Matrix::zeros(2, 2);
        assert!(matches!(
            gemm_backward(&a, &b, &up, &cfg, &SteKind::Identity),
            Err(GradError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            compute_masks(&[1.0], &[1.0, 2.0], &cfg, &SteKind::ImmediateOf),
            Err(GradError::LengthMismatch(1, 2))
        ));
    }
}
