//! The quantized fused multiply-add and the chunked GEMM built on top of it.
//!
//! A dot product is evaluated as a chain of FMAq steps,
//! `S_{i+1} = Q_acc(Q_prod(x_i * w_i) + S_i)`, where both quantizers truncate
//! (floor on magnitude) into narrow float formats. Long accumulations are
//! split into fixed-size chunks: each chunk is reduced sequentially from
//! zero, and the chunk sums are then folded left-to-right along a spine with
//! `Q_acc` after every addition. The schedule is a pure function of element
//! index, so results are bit-identical across runs and thread counts.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Matrix, Tensor4};
use crate::qformats::{pow2, FloatFormat, FloatQuantizer, FormatError, QuantOpts};

#[derive(Debug, Error, PartialEq)]
pub enum FmaqError {
    #[error("vector length mismatch: x has {0} elements, w has {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}x{1} times {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("convolution shape error: {0}")]
    ConvShape(String),
    #[error("event tracing is not supported for convolution")]
    TraceUnsupported,
}

#[derive(Debug, Error, PartialEq)]
pub enum FmaqConfigError {
    #[error("chunk size must be a nonzero power of two, got {0}")]
    BadChunkSize(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("accumulator mantissa {mantissa}+{extra} extra bits exceeds the carrier")]
    AccMantissaTooWide { mantissa: u32, extra: u32 },
}

/// How a GEMM is evaluated: exact binary64 accumulation or the quantized
/// FMAq datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GemmMode {
    Exact,
    Fmaq,
}

/// Configuration of one FMAq datapath: product and accumulator formats,
/// chunking, and the underflow toggle.
///
/// Rounding inside the datapath is always truncation; `acc_extra_mantissa`
/// widens only the accumulator's mantissa (used to isolate swamping from
/// range effects in ablations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmaqConfig {
    pub prod_fmt: FloatFormat,
    pub acc_fmt: FloatFormat,
    pub chunk_size: usize,
    pub uf_enabled: bool,
    pub acc_extra_mantissa: u32,
}

pub const DEFAULT_CHUNK_SIZE: usize = 16;

impl FmaqConfig {
    /// Datapath with the default chunk size of 16, underflow enabled.
    pub fn new(prod_fmt: FloatFormat, acc_fmt: FloatFormat) -> Result<Self, FmaqConfigError> {
        Self::with_options(prod_fmt, acc_fmt, DEFAULT_CHUNK_SIZE, true, 0)
    }

    pub fn with_options(
        prod_fmt: FloatFormat,
        acc_fmt: FloatFormat,
        chunk_size: usize,
        uf_enabled: bool,
        acc_extra_mantissa: u32,
    ) -> Result<Self, FmaqConfigError> {
        if chunk_size == 0 || !chunk_size.is_power_of_two() {
            return Err(FmaqConfigError::BadChunkSize(chunk_size));
        }
        if acc_fmt.mantissa + acc_extra_mantissa > crate::qformats::MAX_MANTISSA_BITS {
            return Err(FmaqConfigError::AccMantissaTooWide {
                mantissa: acc_fmt.mantissa,
                extra: acc_extra_mantissa,
            });
        }
        Ok(Self { prod_fmt, acc_fmt, chunk_size, uf_enabled, acc_extra_mantissa })
    }

    /// Derive the accumulator format from the product format via the bias
    /// rule `b_acc = b_prod - log2(chunk_size)/2` (halves round down), which
    /// centers the accumulator's range on the expected magnitude growth of
    /// a chunked sum. Chunk 16 drops the bias by 2.
    pub fn from_bias_rule(
        prod_fmt: FloatFormat,
        acc_mantissa: u32,
        acc_exponent: u32,
        chunk_size: usize,
    ) -> Result<Self, FmaqConfigError> {
        if chunk_size == 0 || !chunk_size.is_power_of_two() {
            return Err(FmaqConfigError::BadChunkSize(chunk_size));
        }
        let drop = (chunk_size.trailing_zeros() / 2) as i32;
        let acc_fmt = FloatFormat::new(acc_mantissa, acc_exponent, prod_fmt.bias - drop)?;
        Self::with_options(prod_fmt, acc_fmt, chunk_size, true, 0)
    }

    pub(crate) fn kernel(&self) -> FmaqKernel {
        FmaqKernel::new(self)
    }
}

/// Precompiled quantizers for one config; the hot inner loop of everything.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FmaqKernel {
    pub qprod: FloatQuantizer,
    pub qacc: FloatQuantizer,
    pub chunk: usize,
}

impl FmaqKernel {
    pub fn new(cfg: &FmaqConfig) -> Self {
        let popts = QuantOpts { uf_enabled: cfg.uf_enabled, extra_mantissa: 0 };
        let aopts = QuantOpts { uf_enabled: cfg.uf_enabled, extra_mantissa: cfg.acc_extra_mantissa };
        Self {
            qprod: FloatQuantizer::truncating(cfg.prod_fmt, popts),
            qacc: FloatQuantizer::truncating(cfg.acc_fmt, aopts),
            chunk: cfg.chunk_size,
        }
    }

    #[inline(always)]
    pub fn step(&self, x: f64, w: f64, s: f64) -> f64 {
        self.qacc.apply(self.qprod.apply(x * w) + s)
    }

    /// Chunked reduction over two f64 slices.
    pub fn accumulate(&self, xs: &[f64], ws: &[f64]) -> f64 {
        let mut spine = 0.0;
        let mut first = true;
        for (cx, cw) in xs.chunks(self.chunk).zip(ws.chunks(self.chunk)) {
            let mut c = 0.0;
            for (&x, &w) in cx.iter().zip(cw) {
                c = self.step(x, w, c);
            }
            if first {
                spine = c;
                first = false;
            } else {
                spine = self.qacc.apply(spine + c);
            }
        }
        spine
    }

    /// Chunked reduction over two f32 slices (lifted exactly to f64).
    pub fn accumulate_f32(&self, xs: &[f32], ws: &[f32]) -> f64 {
        let mut spine = 0.0;
        let mut first = true;
        for (cx, cw) in xs.chunks(self.chunk).zip(ws.chunks(self.chunk)) {
            let mut c = 0.0;
            for (&x, &w) in cx.iter().zip(cw) {
                c = self.step(x as f64, w as f64, c);
            }
            if first {
                spine = c;
                first = false;
            } else {
                spine = self.qacc.apply(spine + c);
            }
        }
        spine
    }
}

/// One quantized fused multiply-add: `Q_acc(Q_prod(x * w) + s)`.
///
/// `s` is expected to be representable in the accumulator format already
/// (it is in any chained use); the result always is.
pub fn fmaq(x: f64, w: f64, s: f64, cfg: &FmaqConfig) -> f64 {
    cfg.kernel().step(x, w, s)
}

/// Thresholds for the product-difference trace bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    /// Additive floor on the product magnitude in the denominator.
    pub eps1: f64,
    /// Fraction of the product that must have registered in the sum.
    pub eps2: f64,
}

impl TraceOptions {
    pub fn new(eps1: f64, eps2: f64) -> Self {
        Self { eps1, eps2 }
    }

    /// Defaults: `eps1` is the smallest positive value of the product
    /// format, `eps2` is one half.
    pub fn for_config(cfg: &FmaqConfig) -> Self {
        Self { eps1: pow2(-cfg.prod_fmt.bias), eps2: 0.5 }
    }
}

/// Per-step event record of one chunked accumulation.
///
/// Indices are flat summand positions. `spine_of[j]` records an accumulator
/// overflow while folding chunk `j` into the spine (`spine_of[0]` is always
/// false: the first chunk seeds the spine without an addition).
#[derive(Debug, Clone, PartialEq)]
pub struct AccumTrace {
    /// Product underflowed to zero at this step.
    pub prod_uf: Vec<bool>,
    /// The unquantized `Q_prod(x*w) + S` hit the accumulator's overflow
    /// threshold at this step.
    pub acc_of: Vec<bool>,
    /// The step moved the partial sum by at least `eps2` of the product.
    pub diff_bit: Vec<bool>,
    /// Realized multiplier: `(FMAq(x,w,S) - S) / (x*w)`, zero for zero
    /// products.
    pub alpha: Vec<f64>,
    /// Accumulator overflow during spine aggregation, one flag per chunk.
    pub spine_of: Vec<bool>,
    /// Largest flat index whose gradient the recursive overflow rule zeroes.
    pub last_overflow_index: Option<usize>,
    pub chunk_size: usize,
}

impl AccumTrace {
    fn with_capacity(n: usize, chunk: usize) -> Self {
        let chunks = n.div_ceil(chunk).max(1);
        Self {
            prod_uf: Vec::with_capacity(n),
            acc_of: Vec::with_capacity(n),
            diff_bit: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            spine_of: vec![false; chunks],
            last_overflow_index: None,
            chunk_size: chunk,
        }
    }

    pub fn len(&self) -> usize {
        self.acc_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc_of.is_empty()
    }

    fn finish(&mut self) {
        let mut last: Option<usize> = None;
        // The latest spine overflow while folding chunk l zeroes every
        // summand of chunks 0..=l.
        if let Some(l) = self.spine_of.iter().rposition(|&b| b) {
            let end = ((l + 1) * self.chunk_size).min(self.len());
            if end > 0 {
                last = Some(end - 1);
            }
        }
        // An overflow at a summand's own step zeroes that summand and the
        // earlier part of its chunk, so the step index itself is the bound.
        if let Some(i) = self.acc_of.iter().rposition(|&b| b) {
            last = Some(last.map_or(i, |e| e.max(i)));
        }
        self.last_overflow_index = last;
    }
}

/// Chunked quantized dot product of two equal-length vectors.
pub fn accumulate_chunked(xs: &[f64], ws: &[f64], cfg: &FmaqConfig) -> Result<f64, FmaqError> {
    if xs.len() != ws.len() {
        return Err(FmaqError::LengthMismatch(xs.len(), ws.len()));
    }
    Ok(cfg.kernel().accumulate(xs, ws))
}

/// Chunked quantized dot product with a full per-step event trace.
pub fn accumulate_chunked_traced(
    xs: &[f64],
    ws: &[f64],
    cfg: &FmaqConfig,
    opts: &TraceOptions,
) -> Result<(f64, AccumTrace), FmaqError> {
    if xs.len() != ws.len() {
        return Err(FmaqError::LengthMismatch(xs.len(), ws.len()));
    }
    let kernel = cfg.kernel();
    let mut trace = AccumTrace::with_capacity(xs.len(), kernel.chunk);
    let value = accumulate_traced_impl(
        &kernel,
        xs.len(),
        |i| (xs[i], ws[i]),
        opts,
        &mut trace,
    );
    Ok((value, trace))
}

/// Shared traced reduction; `fetch` returns the (x, w) pair for a flat index.
pub(crate) fn accumulate_traced_impl(
    kernel: &FmaqKernel,
    n: usize,
    fetch: impl Fn(usize) -> (f64, f64),
    opts: &TraceOptions,
    trace: &mut AccumTrace,
) -> f64 {
    let acc_r_of = kernel.qacc.r_of();
    let prod_r_uf = kernel.qprod.r_uf();
    let prod_uf_on = kernel.qprod.flushes_underflow();
    let mut spine = 0.0;
    let mut first = true;
    let mut base = 0;
    while base < n || first {
        let end = (base + kernel.chunk).min(n);
        let mut c = 0.0;
        for i in base..end {
            let (x, w) = fetch(i);
            let p = x * w;
            let pq = kernel.qprod.apply(p);
            let raw = pq + c;
            let z = kernel.qacc.apply(raw);
            trace.prod_uf.push(prod_uf_on && p != 0.0 && p.abs() < prod_r_uf);
            trace.acc_of.push(raw.abs() >= acc_r_of);
            trace.diff_bit.push((z - c).abs() / (p.abs() + opts.eps1) > opts.eps2);
            trace.alpha.push(if p == 0.0 { 0.0 } else { (z - c) / p });
            c = z;
        }
        if first {
            spine = c;
            first = false;
        } else {
            let raw = spine + c;
            spine = kernel.qacc.apply(raw);
            trace.spine_of[base / kernel.chunk] = raw.abs() >= acc_r_of;
        }
        base = end;
        if n == 0 {
            break;
        }
    }
    trace.finish();
    spine
}

/// Quantized matrix product `A (K x N) times B (N x L)`.
///
/// Each output scalar is an independent chunked accumulation over the inner
/// dimension, in index order; rows are computed in parallel when large.
pub fn gemm_forward(a: &Matrix, b: &Matrix, cfg: &FmaqConfig) -> Result<Matrix, FmaqError> {
    if a.cols() != b.rows() {
        return Err(FmaqError::ShapeMismatch(a.rows(), a.cols(), b.rows(), b.cols()));
    }
    let kernel = cfg.kernel();
    let bt = b.transpose();
    let l = b.cols();
    let mut out = Matrix::zeros(a.rows(), l);
    let rows: Vec<&[f32]> = (0..a.rows()).map(|k| a.row(k)).collect();
    let do_row = |row: &[f32], dst: &mut [f32]| {
        for (c, slot) in dst.iter_mut().enumerate() {
            *slot = kernel.accumulate_f32(row, bt.row(c)) as f32;
        }
    };
    if a.rows() * l * a.cols() >= 1 << 14 {
        out.data_mut()
            .par_chunks_mut(l)
            .zip(rows.par_iter())
            .for_each(|(dst, row)| do_row(row, dst));
    } else {
        for (dst, row) in out.data_mut().chunks_mut(l).zip(rows.iter()) {
            do_row(row, dst);
        }
    }
    Ok(out)
}

/// Quantized matrix product with per-output-scalar traces (row-major order).
pub fn gemm_forward_traced(
    a: &Matrix,
    b: &Matrix,
    cfg: &FmaqConfig,
    opts: &TraceOptions,
) -> Result<(Matrix, Vec<AccumTrace>), FmaqError> {
    if a.cols() != b.rows() {
        return Err(FmaqError::ShapeMismatch(a.rows(), a.cols(), b.rows(), b.cols()));
    }
    let kernel = cfg.kernel();
    let bt = b.transpose();
    let n = a.cols();
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let mut traces = Vec::with_capacity(a.rows() * b.cols());
    for k in 0..a.rows() {
        let row = a.row(k);
        for c in 0..b.cols() {
            let col = bt.row(c);
            let mut trace = AccumTrace::with_capacity(n, kernel.chunk);
            let v = accumulate_traced_impl(
                &kernel,
                n,
                |i| (row[i] as f64, col[i] as f64),
                opts,
                &mut trace,
            );
            out.set(k, c, v as f32);
            traces.push(trace);
        }
    }
    Ok((out, traces))
}

/// Exact binary64 matrix product (sequential accumulation), the reference
/// datapath for `GemmMode::Exact`.
pub fn gemm_exact(a: &Matrix, b: &Matrix) -> Result<Matrix, FmaqError> {
    if a.cols() != b.rows() {
        return Err(FmaqError::ShapeMismatch(a.rows(), a.cols(), b.rows(), b.cols()));
    }
    let bt = b.transpose();
    let l = b.cols();
    let mut out = Matrix::zeros(a.rows(), l);
    let rows: Vec<&[f32]> = (0..a.rows()).map(|k| a.row(k)).collect();
    let do_row = |row: &[f32], dst: &mut [f32]| {
        for (c, slot) in dst.iter_mut().enumerate() {
            let col = bt.row(c);
            let mut acc = 0.0f64;
            for (&x, &w) in row.iter().zip(col) {
                acc += x as f64 * w as f64;
            }
            *slot = acc as f32;
        }
    };
    if a.rows() * l * a.cols() >= 1 << 14 {
        out.data_mut()
            .par_chunks_mut(l)
            .zip(rows.par_iter())
            .for_each(|(dst, row)| do_row(row, dst));
    } else {
        for (dst, row) in out.data_mut().chunks_mut(l).zip(rows.iter()) {
            do_row(row, dst);
        }
    }
    Ok(out)
}

/// Stride and padding of a 2-d convolution (symmetric per axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: (1, 1), padding: (0, 0) }
    }
}

/// Quantized 2-d convolution, evaluated through the im2col lowering so that
/// every output scalar is one chunked accumulation of length
/// `in_channels * kernel_h * kernel_w`.
///
/// Event tracing is not supported for convolution: weight sharing makes the
/// per-pair trace storage infeasible, so `trace` must be `None`.
pub fn conv2d_forward(
    input: &Tensor4,
    kernel: &Tensor4,
    params: Conv2dParams,
    cfg: &FmaqConfig,
    trace: Option<&TraceOptions>,
) -> Result<Tensor4, FmaqError> {
    if trace.is_some() {
        return Err(FmaqError::TraceUnsupported);
    }
    let [n, c_in, h, w] = input.dims();
    let [c_out, kc, kh, kw] = kernel.dims();
    if kc != c_in {
        return Err(FmaqError::ConvShape(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;
    if sh == 0 || sw == 0 {
        return Err(FmaqError::ConvShape("stride must be nonzero".into()));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(FmaqError::ConvShape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let inner = c_in * kh * kw;

    // Kernel as a matrix with one column per output channel, row index
    // running over (channel, ky, kx) — the accumulation order.
    let mut kmat = Matrix::zeros(inner, c_out);
    for oc in 0..c_out {
        let mut i = 0;
        for ic in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    kmat.set(i, oc, kernel.get(oc, ic, ky, kx));
                    i += 1;
                }
            }
        }
    }

    let mut out = Tensor4::zeros([n, c_out, oh, ow]);
    for img in 0..n {
        // im2col: one row per output pixel.
        let mut cols = Matrix::zeros(oh * ow, inner);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = cols.row_mut(oy * ow + ox);
                let mut i = 0;
                for ic in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            row[i] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                            {
                                input.get(img, ic, iy as usize, ix as usize)
                            } else {
                                0.0
                            };
                            i += 1;
                        }
                    }
                }
            }
        }
        let prod = gemm_forward(&cols, &kmat, cfg)?;
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.set(img, oc, oy, ox, prod.get(oy * ow + ox, oc));
                }
            }
        }
    }
    Ok(out)
}

/// Dump per-scalar traces of a GEMM as CSV, one line per (output, summand).
pub fn write_trace_csv<W: Write>(
    traces: &[AccumTrace],
    out_cols: usize,
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "out_row,out_col,i,prod_uf,diff_bit,alpha,last_of_index")?;
    for (scalar, trace) in traces.iter().enumerate() {
        let (r, c) = (scalar / out_cols, scalar % out_cols);
        let last = trace
            .last_overflow_index
            .map_or(String::new(), |i| i.to_string());
        for i in 0..trace.len() {
            writeln!(
                w,
                "{r},{c},{i},{},{},{},{last}",
                trace.prod_uf[i] as u8,
                trace.diff_bit[i] as u8,
                trace.alpha[i],
            )?;
        }
    }
    Ok(())
}
