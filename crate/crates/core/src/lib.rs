//! Bit-exact simulation of deep-learning arithmetic with low bit-width
//! accumulators.
//!
//! The crate models a fused multiply-add unit whose product and accumulator
//! registers use narrow custom floating-point formats, the chunked dot
//! products built from it, masked straight-through gradients for training
//! through that datapath, and a gate-count model for the hardware cost of
//! the corresponding FMA circuits.
//!
//! All simulated values live in `f64` carriers chosen so that every
//! representable value of the narrow formats is exact in the carrier; see
//! [`qformats`] for the format restrictions that guarantee this.

pub mod data;
pub mod fmaq;
pub mod gates;
pub mod grad;
pub mod matrix;
pub mod nn;
pub mod qformats;
pub mod rng;

pub use fmaq::{
    accumulate_chunked, fmaq, gemm_forward, AccumTrace, FmaqConfig, GemmMode, TraceOptions,
};
pub use gates::{gate_breakdown, gate_ratio_report, GateBreakdown, GateParams};
pub use grad::{alpha_values, compute_masks, gemm_backward, MaskGrid, SteKind};
pub use matrix::Matrix;
pub use qformats::{
    classify, classify_with, quantize_fixed, quantize_float, EventKind, FixedFormat, FloatFormat,
    FloatQuantizer, QuantEvent, QuantOpts, RoundMode,
};
