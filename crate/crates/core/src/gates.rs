//! Analytical gate-count model of the quantized FMA datapath.
//!
//! Eleven combinational blocks are costed from closed-form formulas in
//! terms of the weight/activation format (m, e), the internal product and
//! accumulator format (M, E), and per-gate cost constants. Flip-flops and
//! routing are out of scope. Absolute totals are a rough lower bound on a
//! real design; the model's purpose is the *ratio* between design points,
//! which is what reports are built from.

use serde::{Deserialize, Serialize};

/// Cost constants per elementary gate (AND2/OR2/MUX2 and half/full adder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCosts {
    pub c_and: u64,
    pub c_or: u64,
    pub c_mux: u64,
    pub c_ha: u64,
    pub c_fa: u64,
}

impl Default for GateCosts {
    fn default() -> Self {
        Self { c_and: 1, c_or: 1, c_mux: 3, c_ha: 3, c_fa: 7 }
    }
}

/// One FMA design point: W/A bits (m, e), internal bits (M, E), gate costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateParams {
    /// Weight/activation mantissa bits.
    pub m: u32,
    /// Weight/activation exponent bits.
    pub e: u32,
    /// Internal (product/accumulator) mantissa bits.
    pub mm: u32,
    /// Internal exponent bits.
    pub ee: u32,
    pub costs: GateCosts,
}

impl GateParams {
    pub fn new(m: u32, e: u32, mm: u32, ee: u32) -> Self {
        assert!(
            m >= 1 && e >= 1 && mm >= 1 && ee >= 1,
            "all format widths must be at least 1 bit"
        );
        Self { m, e, mm, ee, costs: GateCosts::default() }
    }

    /// Canvas width: the fixed-point span in which two aligned (M+1)-bit
    /// two's-complement mantissas can interact during addition.
    pub fn canvas(&self) -> u32 {
        2 * self.mm + 1
    }

    /// Bits of shift distance: bounded by the canvas width and by the
    /// exponent field.
    pub fn shift_bits(&self) -> u32 {
        let f = self.canvas();
        let ceil_log2 = 32 - (f - 1).leading_zeros();
        ceil_log2.min(self.ee)
    }

    /// Largest useful shift distance: canvas width capped by the exponent
    /// range.
    pub fn k_max(&self) -> u32 {
        let two_e = 1u64 << self.ee.min(32);
        (self.canvas() as u64).min(two_e) as u32
    }
}

/// Gate counts for each datapath block, plus the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateBreakdown {
    pub exponent_adder: u64,
    pub exponent_differ: u64,
    pub exponent_max: u64,
    pub mantissa_mul: u64,
    pub sort_exponent: u64,
    pub first_shift: u64,
    pub mantissa_adder: u64,
    pub leading_zero_detector: u64,
    pub second_shift: u64,
    pub exponent_rebase: u64,
    pub final_incrementor: u64,
    pub total: u64,
}

impl GateBreakdown {
    pub const COMPONENT_NAMES: [&'static str; 11] = [
        "Exponent Adder",
        "Exponent Differ",
        "Exponent Max",
        "Mantissa MUL",
        "Sort Exponent",
        "1st Shift",
        "Mantissa Adder",
        "Leading Zero Detector",
        "2nd Shift",
        "Exponent Rebase",
        "Final Incrementor",
    ];

    pub fn components(&self) -> [u64; 11] {
        [
            self.exponent_adder,
            self.exponent_differ,
            self.exponent_max,
            self.mantissa_mul,
            self.sort_exponent,
            self.first_shift,
            self.mantissa_adder,
            self.leading_zero_detector,
            self.second_shift,
            self.exponent_rebase,
            self.final_incrementor,
        ]
    }
}

/// Evaluate the per-block gate-count formulas for one design point.
pub fn gate_breakdown(p: &GateParams) -> GateBreakdown {
    let GateCosts { c_and, c_or, c_mux, c_ha, c_fa } = p.costs;
    let (m, e, mm, ee) = (p.m as u64, p.e as u64, p.mm as u64, p.ee as u64);
    let f = p.canvas() as u64;
    let shift = p.shift_bits() as u64;
    let k_max = p.k_max() as u64;

    let exponent_adder = (e - 1) * c_fa + c_ha;
    let exponent_differ = (ee.min(e + 1) - 1) * c_fa + c_ha * (1 + ee.abs_diff(e + 1));
    let exponent_max = ee * c_mux;
    let mantissa_mul = (m + 3) * (m + 3) * c_and + (m + 2) * (m + 2) * c_fa + (m + 2) * c_ha;
    let sort_exponent = (mm + 1) * c_mux;
    let first_shift = (f - 1) * shift * c_mux;
    let mantissa_adder = mm * c_fa + c_ha;
    let leading_zero_detector = f * (c_and + c_or) + shift * shift * c_or;
    // A barrel shifter narrowing F bits back to M+1 shares structure with
    // the mux tree; the adder-vs-AND rebate can exceed the mux cost for
    // very narrow formats, so the count is floored at zero.
    let second_shift =
        ((mm + 1) * shift * c_mux).saturating_sub(k_max * c_fa.saturating_sub(c_and));
    let exponent_rebase = (ee - 1) * c_fa + c_ha;
    let final_incrementor = (mm + 1) * c_ha;

    let components = [
        exponent_adder,
        exponent_differ,
        exponent_max,
        mantissa_mul,
        sort_exponent,
        first_shift,
        mantissa_adder,
        leading_zero_detector,
        second_shift,
        exponent_rebase,
        final_incrementor,
    ];
    GateBreakdown {
        exponent_adder,
        exponent_differ,
        exponent_max,
        mantissa_mul,
        sort_exponent,
        first_shift,
        mantissa_adder,
        leading_zero_detector,
        second_shift,
        exponent_rebase,
        final_incrementor,
        total: components.iter().sum(),
    }
}

/// One row of a design-point comparison report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateReportRow {
    pub m: u32,
    pub e: u32,
    pub mm: u32,
    pub ee: u32,
    pub canvas: u32,
    pub shift_bits: u32,
    pub total: u64,
    /// Percentage of the first (reference) row's total.
    pub ratio: f64,
}

/// Compare design points against the first entry (the 100% reference).
///
/// Returns an empty table for an empty input.
pub fn gate_ratio_report(design_points: &[GateParams]) -> Vec<GateReportRow> {
    let Some(first) = design_points.first() else {
        return Vec::new();
    };
    let reference = gate_breakdown(first).total as f64;
    design_points
        .iter()
        .map(|p| {
            let b = gate_breakdown(p);
            GateReportRow {
                m: p.m,
                e: p.e,
                mm: p.mm,
                ee: p.ee,
                canvas: p.canvas(),
                shift_bits: p.shift_bits(),
                total: b.total,
                ratio: 100.0 * b.total as f64 / reference,
            }
        })
        .collect()
}

/// Render a report as CSV.
pub fn report_to_csv(rows: &[GateReportRow]) -> String {
    let mut out = String::from("m,e,M,E,F,shift_bits,total,ratio_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.2}\n",
            r.m, r.e, r.mm, r.ee, r.canvas, r.shift_bits, r.total, r.ratio
        ));
    }
    out
}
