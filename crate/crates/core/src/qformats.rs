//! Bit-exact scalar quantizers for custom fixed-point and floating-point
//! formats, plus the per-value event classifier.
//!
//! Every simulated value is carried in an `f64`. Formats are restricted so
//! that each representable value of the simulated format is exactly
//! representable in the carrier (mantissa width <= 51 bits, exponent range
//! inside the carrier's normal range), which makes the simulation bit-exact:
//! quantization is literally a mask over the carrier's mantissa bits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widest simulated mantissa (excluding the implicit leading bit) that the
/// 64-bit carrier can hold exactly with at least one droppable bit.
pub const MAX_MANTISSA_BITS: u32 = 51;

const CARRIER_MANT_BITS: u32 = 52;
const CARRIER_EXP_MASK: u64 = 0x7ff;

/// 2^e as an exact `f64`. Valid for `e` in the carrier's normal range.
#[inline]
pub fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e), "pow2 exponent {e} out of range");
    f64::from_bits(((e + 1023) as u64) << CARRIER_MANT_BITS)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("mantissa width {0} exceeds the carrier limit of {MAX_MANTISSA_BITS} bits")]
    MantissaTooWide(u32),
    #[error("exponent width must be at least 2, got {0}")]
    ExponentTooNarrow(u32),
    #[error("format range [2^{min_exp}, 2^{max_exp}] does not fit the 64-bit carrier")]
    RangeOutsideCarrier { min_exp: i64, max_exp: i64 },
    #[error("fixed-point width must be in 2..=53, got {0}")]
    BadFixedWidth(u32),
    #[error("fixed-point bias {0} out of supported range -900..=900")]
    BadFixedBias(i32),
}

/// Rounding rule applied when a value is snapped to a format's grid.
///
/// `Truncate` floors the magnitude by masking mantissa bits and is the only
/// mode used inside the quantized-FMA datapath; `Nearest` and `Stochastic`
/// exist for weight/activation quantization and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundMode {
    Truncate,
    Nearest,
    Stochastic,
}

/// Fixed-point format: `B` total bits and exponent bias `b`.
///
/// Representable values are the integer multiples of `2^-b` inside
/// `[-2^(B-b-1), 2^-b * (2^(B-1) - 1)]`, with saturation at the ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedFormat {
    pub bits: u32,
    pub bias: i32,
}

impl FixedFormat {
    pub fn new(bits: u32, bias: i32) -> Result<Self, FormatError> {
        if !(2..=53).contains(&bits) {
            return Err(FormatError::BadFixedWidth(bits));
        }
        if !(-900..=900).contains(&bias) {
            return Err(FormatError::BadFixedBias(bias));
        }
        Ok(Self { bits, bias })
    }

    /// Lower saturation bound `-2^(B-b-1)`.
    pub fn r_min(&self) -> f64 {
        -pow2(self.bits as i32 - self.bias - 1)
    }

    /// Upper saturation bound `2^-b * (2^(B-1) - 1)`.
    pub fn r_max(&self) -> f64 {
        (pow2(self.bits as i32 - 1) - 1.0) * pow2(-self.bias)
    }

    /// Quantization step `2^-b`.
    pub fn step(&self) -> f64 {
        pow2(-self.bias)
    }
}

/// Floating-point format: `M` mantissa bits, `E` exponent bits, bias `b`.
///
/// Nonzero representable magnitudes are `2^e * (1 + m * 2^-M)` for integer
/// `m` in `[0, 2^M)` and `e` in `[-b, 2^E - b - 1]`. No subnormals: anything
/// below `r_uf() = 2^-b` underflows to zero (when underflow is enabled), and
/// anything at or above `r_of()` saturates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatFormat {
    pub mantissa: u32,
    pub exponent: u32,
    pub bias: i32,
}

impl FloatFormat {
    pub fn new(mantissa: u32, exponent: u32, bias: i32) -> Result<Self, FormatError> {
        if mantissa > MAX_MANTISSA_BITS {
            return Err(FormatError::MantissaTooWide(mantissa));
        }
        if exponent < 2 {
            return Err(FormatError::ExponentTooNarrow(exponent));
        }
        let fmt = Self { mantissa, exponent, bias };
        let max_exp = (1i64 << exponent) - bias as i64 - 1;
        let min_exp = -(bias as i64);
        if max_exp > 1023 || min_exp < -1022 || exponent > 11 {
            return Err(FormatError::RangeOutsideCarrier { min_exp, max_exp });
        }
        Ok(fmt)
    }

    /// The conventional bias `2^(E-1)` for a given exponent width.
    pub fn default_bias(exponent: u32) -> i32 {
        1 << (exponent - 1)
    }

    /// Same format with the conventional bias.
    pub fn with_default_bias(mantissa: u32, exponent: u32) -> Result<Self, FormatError> {
        Self::new(mantissa, exponent, Self::default_bias(exponent))
    }

    /// Largest exponent `2^E - b - 1`.
    pub fn max_exp(&self) -> i32 {
        (1i32 << self.exponent) - self.bias - 1
    }

    /// Overflow threshold `2^(2^E - b - 1) * (2 - 2^-M)`; also the largest
    /// representable magnitude (saturation value).
    pub fn r_of(&self) -> f64 {
        self.r_of_with_extra(0)
    }

    /// Overflow threshold with the mantissa widened by `extra` bits.
    pub fn r_of_with_extra(&self, extra: u32) -> f64 {
        let m_eff = self.mantissa + extra;
        debug_assert!(m_eff <= MAX_MANTISSA_BITS);
        pow2(self.max_exp()) * (2.0 - pow2(-(m_eff as i32)))
    }

    /// Underflow threshold `2^-b` (smallest representable magnitude).
    pub fn r_uf(&self) -> f64 {
        pow2(-self.bias)
    }

    /// Format identifier in the `M<m>E<e>b<bias>` notation.
    pub fn name(&self) -> String {
        format!("M{}E{}b{}", self.mantissa, self.exponent, self.bias)
    }
}

/// Options common to all float quantization calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantOpts {
    /// When set, magnitudes below `r_uf` are flushed to +0. When cleared the
    /// underflow branch is skipped entirely and mantissa rounding applies at
    /// the value's own exponent.
    pub uf_enabled: bool,
    /// Additional mantissa bits appended to the format for this call.
    pub extra_mantissa: u32,
}

impl Default for QuantOpts {
    fn default() -> Self {
        Self { uf_enabled: true, extra_mantissa: 0 }
    }
}

/// A float quantizer with its thresholds and bit masks precomputed.
///
/// `apply` is the hot path of the whole simulator; it compiles down to two
/// compares and one mask on the carrier bits.
#[derive(Debug, Clone, Copy)]
pub struct FloatQuantizer {
    fmt: FloatFormat,
    mode: RoundMode,
    opts: QuantOpts,
    r_of: f64,
    r_uf: f64,
    /// Fast-path lower magnitude bound: `r_uf` when flushing underflow,
    /// otherwise the carrier's smallest normal.
    min_fast: f64,
    drop: u32,
    keep_mask: u64,
    flush_uf: bool,
}

impl FloatQuantizer {
    pub fn new(fmt: FloatFormat, mode: RoundMode, opts: QuantOpts) -> Self {
        let m_eff = fmt.mantissa + opts.extra_mantissa;
        assert!(
            m_eff <= MAX_MANTISSA_BITS,
            "effective mantissa {m_eff} exceeds carrier limit"
        );
        let drop = CARRIER_MANT_BITS - m_eff;
        let r_uf = fmt.r_uf();
        Self {
            fmt,
            mode,
            opts,
            r_of: fmt.r_of_with_extra(opts.extra_mantissa),
            r_uf,
            min_fast: if opts.uf_enabled { r_uf } else { f64::MIN_POSITIVE },
            drop,
            keep_mask: !((1u64 << drop) - 1),
            flush_uf: opts.uf_enabled,
        }
    }

    pub fn truncating(fmt: FloatFormat, opts: QuantOpts) -> Self {
        Self::new(fmt, RoundMode::Truncate, opts)
    }

    pub fn format(&self) -> FloatFormat {
        self.fmt
    }

    pub fn r_of(&self) -> f64 {
        self.r_of
    }

    pub fn r_uf(&self) -> f64 {
        self.r_uf
    }

    /// Whether magnitudes below `r_uf` flush to zero.
    pub fn flushes_underflow(&self) -> bool {
        self.flush_uf
    }

    /// Quantize with a deterministic mode. Panics in `Stochastic` mode;
    /// stochastic rounding needs the caller's random stream (`apply_rng`).
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        debug_assert!(x.is_finite());
        let a = x.abs();
        if a >= self.r_of {
            return self.r_of.copysign(x);
        }
        if a < self.min_fast {
            return self.small_magnitude(x);
        }
        match self.mode {
            RoundMode::Truncate => f64::from_bits(x.to_bits() & self.keep_mask),
            RoundMode::Nearest => self.round_nearest(x, a),
            RoundMode::Stochastic => panic!("stochastic rounding requires apply_rng"),
        }
    }

    /// Quantize with any mode, drawing from `rng` in `Stochastic` mode.
    #[inline]
    pub fn apply_rng<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        if self.mode != RoundMode::Stochastic {
            return self.apply(x);
        }
        debug_assert!(x.is_finite());
        let a = x.abs();
        if a >= self.r_of {
            return self.r_of.copysign(x);
        }
        if a < self.min_fast {
            return self.small_magnitude_rng(x, rng);
        }
        self.round_stochastic(x, a, rng)
    }

    #[inline]
    fn round_nearest(&self, x: f64, a: f64) -> f64 {
        // Adding half an ulp to the magnitude bits and truncating rounds
        // half away from zero; a mantissa carry renormalizes into the next
        // exponent on its own and may then hit saturation.
        let half = 1u64 << (self.drop - 1);
        let q = f64::from_bits((a.to_bits() + half) & self.keep_mask);
        if q >= self.r_of {
            self.r_of.copysign(x)
        } else {
            q.copysign(x)
        }
    }

    #[inline]
    fn round_stochastic<R: Rng + ?Sized>(&self, x: f64, a: f64, rng: &mut R) -> f64 {
        let bits = a.to_bits();
        let frac = bits & !self.keep_mask;
        let mut floor_bits = bits & self.keep_mask;
        if frac != 0 {
            let u = rng.gen_range(0..(1u64 << self.drop));
            if u < frac {
                floor_bits += 1u64 << self.drop;
            }
        }
        let q = f64::from_bits(floor_bits);
        if q >= self.r_of {
            self.r_of.copysign(x)
        } else {
            q.copysign(x)
        }
    }

    /// Magnitudes below `min_fast`: the underflow flush, zero, and (with
    /// underflow disabled) carrier-subnormal inputs that the plain mask
    /// could not truncate exactly.
    fn small_magnitude(&self, x: f64) -> f64 {
        if self.flush_uf || x == 0.0 {
            return 0.0;
        }
        // Rescale by a power of two (exact), quantize, and scale back. The
        // result only clears or carries mantissa bits, so the way back down
        // is exact as well.
        let scaled = self.scale_small(x);
        match self.mode {
            RoundMode::Truncate => f64::from_bits(scaled.to_bits() & self.keep_mask) * pow2(-660),
            RoundMode::Nearest => {
                let half = 1u64 << (self.drop - 1);
                f64::from_bits((scaled.to_bits() + half) & self.keep_mask) * pow2(-660)
            }
            RoundMode::Stochastic => unreachable!("handled by small_magnitude_rng"),
        }
    }

    fn small_magnitude_rng<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        if self.flush_uf || x == 0.0 {
            return 0.0;
        }
        let scaled = self.scale_small(x);
        let bits = scaled.to_bits();
        let frac = bits & !self.keep_mask;
        let mut floor_bits = bits & self.keep_mask;
        if frac != 0 && rng.gen_range(0..(1u64 << self.drop)) < frac {
            floor_bits += 1u64 << self.drop;
        }
        f64::from_bits(floor_bits) * pow2(-660)
    }

    fn scale_small(&self, x: f64) -> f64 {
        debug_assert!(!self.flush_uf && x != 0.0);
        x * pow2(660)
    }
}

/// Floating-point quantization of `x` (deterministic modes).
pub fn quantize_float(x: f64, fmt: &FloatFormat, mode: RoundMode, opts: QuantOpts) -> f64 {
    FloatQuantizer::new(*fmt, mode, opts).apply(x)
}

/// Floating-point quantization with stochastic rounding supported.
pub fn quantize_float_rng<R: Rng + ?Sized>(
    x: f64,
    fmt: &FloatFormat,
    mode: RoundMode,
    opts: QuantOpts,
    rng: &mut R,
) -> f64 {
    FloatQuantizer::new(*fmt, mode, opts).apply_rng(x, rng)
}

/// Fixed-point quantization of `x` (deterministic modes).
pub fn quantize_fixed(x: f64, fmt: &FixedFormat, mode: RoundMode) -> f64 {
    debug_assert!(x.is_finite());
    assert!(mode != RoundMode::Stochastic, "stochastic rounding requires quantize_fixed_rng");
    let r_min = fmt.r_min();
    let r_max = fmt.r_max();
    if x <= r_min {
        return r_min;
    }
    if x >= r_max {
        return r_max;
    }
    // x * 2^b is exact: |x * 2^b| < 2^(B-1) <= 2^52.
    let y = x * pow2(fmt.bias);
    let r = match mode {
        RoundMode::Truncate => y.trunc(),
        RoundMode::Nearest => y.round(),
        RoundMode::Stochastic => unreachable!(),
    };
    r * pow2(-fmt.bias)
}

/// Fixed-point quantization with stochastic rounding supported.
pub fn quantize_fixed_rng<R: Rng + ?Sized>(
    x: f64,
    fmt: &FixedFormat,
    mode: RoundMode,
    rng: &mut R,
) -> f64 {
    if mode != RoundMode::Stochastic {
        return quantize_fixed(x, fmt, mode);
    }
    debug_assert!(x.is_finite());
    let r_min = fmt.r_min();
    let r_max = fmt.r_max();
    if x <= r_min {
        return r_min;
    }
    if x >= r_max {
        return r_max;
    }
    let y = x * pow2(fmt.bias);
    let floor = y.floor();
    let frac = y - floor;
    let r = if frac > 0.0 && rng.gen::<f64>() < frac { floor + 1.0 } else { floor };
    r * pow2(-fmt.bias)
}

/// What a single float quantization did to a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Exact,
    Underflow,
    Overflow,
    Swamp,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Exact => "Exact",
            EventKind::Underflow => "Underflow",
            EventKind::Overflow => "Overflow",
            EventKind::Swamp => "Swamp",
        }
    }
}

/// Classification of one quantization: the event kind plus the realized
/// absolute and relative errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantEvent {
    pub kind: EventKind,
    pub absolute_error: f64,
    pub relative_error: f64,
}

/// Classify quantizing `x` under the FMA-internal convention
/// (truncation, underflow enabled, no extra mantissa).
pub fn classify(x: f64, fmt: &FloatFormat) -> QuantEvent {
    classify_with(x, fmt, RoundMode::Truncate, QuantOpts::default())
}

/// Classify quantizing `x` with explicit mode and options.
///
/// `kind` is `Exact` iff the quantized value equals `x`; otherwise overflow
/// and underflow are decided by the range thresholds and everything else is
/// mantissa swamping.
pub fn classify_with(x: f64, fmt: &FloatFormat, mode: RoundMode, opts: QuantOpts) -> QuantEvent {
    let q = quantize_float(x, fmt, mode, opts);
    let kind = if q == x {
        EventKind::Exact
    } else if x.abs() >= fmt.r_of_with_extra(opts.extra_mantissa) {
        EventKind::Overflow
    } else if opts.uf_enabled && x.abs() < fmt.r_uf() {
        EventKind::Underflow
    } else {
        EventKind::Swamp
    };
    let absolute_error = (q - x).abs();
    let relative_error = if x == 0.0 { 0.0 } else { absolute_error / x.abs() };
    QuantEvent { kind, absolute_error, relative_error }
}
