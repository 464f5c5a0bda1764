//! Analytic parameter and multiply accounting.
//!
//! Parameter counts are exact integers; multiply counts assume stride 1 and
//! "same" padding, so a convolution costs `params * H * W` multiplications on
//! an `H x W` map. Average pooling is counted as one multiply per output
//! value (the `1/window` scale), the SE block as its two matrix-vector
//! products plus the final per-channel rescale, and the fully-connected
//! output as one multiply per weight. Additions are not counted.
//!
//! [`verify_against_reference`] checks a report against the published reference
//! tables for the three presets, with parameter counts matched exactly and
//! multiply counts matched at the precision the reference prints.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, LayerKind, SePlacement};
use crate::se::SeConfig;

/// Exact nonnegative rational, kept reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Ratio {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// `(params, multiplies)` of a standard convolution.
pub fn cost_standard_conv(
    c_in: usize,
    c_out: usize,
    kernel_h: usize,
    kernel_w: usize,
    h: usize,
    w: usize,
) -> (u64, u64) {
    let params = (c_in * kernel_h * kernel_w * c_out) as u64;
    (params, params * (h * w) as u64)
}

/// `(params, multiplies)` of a depthwise convolution.
pub fn cost_depthwise(
    channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    h: usize,
    w: usize,
) -> (u64, u64) {
    let params = (kernel_h * kernel_w * channels) as u64;
    (params, params * (h * w) as u64)
}

/// `(params, multiplies)` of a pointwise (1x1) convolution.
pub fn cost_pointwise(c_in: usize, c_out: usize, h: usize, w: usize) -> (u64, u64) {
    let params = (c_in * c_out) as u64;
    (params, params * (h * w) as u64)
}

/// Cost of a depthwise-separable layer relative to the standard convolution
/// it replaces, for `C_in = C_out`: exactly `1/C_out + 1/D_K^2`.
pub fn ds_vs_standard_ratio(c_out: usize, d_k: usize) -> Ratio {
    let dk2 = (d_k * d_k) as u64;
    let c = c_out as u64;
    // 1/c + 1/dk2 = (dk2 + c) / (c * dk2)
    Ratio::new(dk2 + c, c * dk2)
}

/// One line of a cost report. `h` and `w` are the spatial dims the layer
/// operates on (after any earlier pooling).
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub label: String,
    pub params: u64,
    pub multiplies: u64,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub name: String,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_multiplies: u64,
}

impl CostReport {
    /// Aligned text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let rows: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    if r.params == 0 {
                        "-".into()
                    } else {
                        r.params.to_string()
                    },
                    r.multiplies.to_string(),
                    r.h.to_string(),
                    r.w.to_string(),
                ]
            })
            .chain(std::iter::once([
                "Total".to_string(),
                self.total_params.to_string(),
                self.total_multiplies.to_string(),
                String::new(),
                String::new(),
            ]))
            .collect();
        let header = ["layer", "params", "multiplies", "H", "W"];
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let fmt_row = |cells: &[String; 5], widths: &[usize]| {
            let mut line = String::new();
            for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                if i == 0 {
                    line.push_str(&format!("{cell:<w$}"));
                } else {
                    line.push_str(&format!("{cell:>w$}"));
                }
            }
            line.push('\n');
            line
        };
        let header_cells: [String; 5] = header.map(String::from);
        out.push_str(&fmt_row(&header_cells, &widths));
        for row in &rows {
            out.push_str(&fmt_row(row, &widths));
        }
        out
    }

    /// CSV with columns `layer,params,multiplies,H,W` plus a totals line.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("layer,params,multiplies,H,W\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.label, r.params, r.multiplies, r.h, r.w
            ));
        }
        out.push_str(&format!(
            "Total,{},{},,\n",
            self.total_params, self.total_multiplies
        ));
        out
    }
}

/// Per-layer and total parameter/multiply counts for an architecture,
/// tracking spatial dims through the pooling layers.
pub fn analyze(spec: &ArchitectureSpec) -> Result<CostReport> {
    spec.validate()?;
    let [mut channels, mut h, mut w] = spec.input_shape;
    let mut rows = Vec::new();
    let se_extra = |c: usize| {
        let cfg = SeConfig::new(c);
        (cfg.param_count(), cfg.multiply_count())
    };

    for layer in &spec.layers {
        match layer.kind {
            LayerKind::StandardConv => {
                let (mut p_total, mut m_total) = (0u64, 0u64);
                let (h0, w0) = (h, w);
                for _ in 0..layer.repeat {
                    let (p, m) = cost_standard_conv(
                        channels,
                        layer.channels,
                        layer.kernel_h,
                        layer.kernel_w,
                        h,
                        w,
                    );
                    p_total += p;
                    m_total += m;
                    channels = layer.channels;
                }
                rows.push(CostRow {
                    label: if layer.repeat == 1 {
                        "Conv".into()
                    } else {
                        format!("Conv x{}", layer.repeat)
                    },
                    params: p_total,
                    multiplies: m_total,
                    h: h0,
                    w: w0,
                });
            }
            LayerKind::Se => {
                let cfg = SeConfig::new(channels);
                rows.push(CostRow {
                    label: "SE".into(),
                    params: cfg.param_count(),
                    multiplies: cfg.multiply_count(),
                    h,
                    w,
                });
            }
            LayerKind::AvgPool => {
                let mut m_total = 0u64;
                for _ in 0..layer.repeat {
                    h /= layer.kernel_h;
                    w /= layer.kernel_w;
                    m_total += (channels * h * w) as u64;
                }
                rows.push(CostRow {
                    label: format!("Avg-Pool {}x{}", layer.kernel_h, layer.kernel_w),
                    params: 0,
                    multiplies: m_total,
                    h,
                    w,
                });
            }
            LayerKind::ResidualGroup | LayerKind::DsConv => {
                let ds_layers = if layer.kind == LayerKind::ResidualGroup {
                    2 * layer.repeat
                } else {
                    layer.repeat
                };
                let (dp, dm) = cost_depthwise(channels, layer.kernel_h, layer.kernel_w, h, w);
                let (pp, pm) = cost_pointwise(channels, layer.channels, h, w);
                let mut per_layer_params = dp + pp;
                let mut per_layer_mults = dm + pm;
                if spec.se_in_ds != SePlacement::Off {
                    let (sp, sm) = se_extra(channels);
                    per_layer_params += sp;
                    per_layer_mults += sm;
                }
                let label = match layer.kind {
                    LayerKind::ResidualGroup => format!("Res x{}", layer.repeat),
                    _ if layer.repeat > 1 => format!("DS-Conv x{}", layer.repeat),
                    _ => "DS-Conv".into(),
                };
                rows.push(CostRow {
                    label,
                    params: per_layer_params * ds_layers as u64,
                    multiplies: per_layer_mults * ds_layers as u64,
                    h,
                    w,
                });
                channels = layer.channels;
            }
            LayerKind::GlobalAvgPool => {
                rows.push(CostRow {
                    label: "Avg-Pool".into(),
                    params: 0,
                    multiplies: channels as u64,
                    h,
                    w,
                });
                (h, w) = (1, 1);
            }
            LayerKind::SoftmaxFc => {
                let params = (channels * layer.channels) as u64;
                rows.push(CostRow {
                    label: "Softmax".into(),
                    params,
                    multiplies: params,
                    h,
                    w,
                });
            }
        }
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_multiplies = rows.iter().map(|r| r.multiplies).sum();
    Ok(CostReport {
        name: spec.name.clone(),
        rows,
        total_params,
        total_multiplies,
    })
}

// ---------------------------------------------------------------------------
// golden reference tables
// ---------------------------------------------------------------------------

/// A count as printed in the reference tables: either an exact integer or a
/// rounded value such as "2.3M" / "65.4K".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Printed {
    pub value: u64,
    /// Half of the printed unit-in-the-last-place; 0 for exact integers.
    pub half_ulp: u64,
    pub text: &'static str,
}

const fn exact(v: u64, text: &'static str) -> Printed {
    Printed {
        value: v,
        half_ulp: 0,
        text,
    }
}

const fn approx(v: u64, half_ulp: u64, text: &'static str) -> Printed {
    Printed {
        value: v,
        half_ulp,
        text,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GoldenRow {
    pub label: &'static str,
    /// `None` for layers without weights.
    pub params: Option<Printed>,
    pub multiplies: Printed,
    /// Exact parameter count implied by the cost formulas (zero tolerance).
    pub params_exact: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct GoldenTable {
    pub id: u8,
    pub preset: &'static str,
    pub rows: &'static [GoldenRow],
    pub total_params: Printed,
    pub total_params_exact: u64,
    pub total_multiplies: Printed,
}

const fn row(
    label: &'static str,
    params: Option<Printed>,
    params_exact: u64,
    multiplies: Printed,
) -> GoldenRow {
    GoldenRow {
        label,
        params,
        multiplies,
        params_exact,
    }
}

/// Reference table for DS-ResNet18.
pub const TABLE_1: GoldenTable = GoldenTable {
    id: 1,
    preset: "DS-ResNet18",
    rows: &[
        row("Conv", Some(exact(576, "576")), 576, approx(2_300_000, 50_000, "2.3M")),
        row("SE", Some(exact(512, "512")), 512, exact(576, "576")),
        row(
            "Res x7",
            Some(approx(65_400, 50, "65.4K")),
            65_408,
            approx(264_000_000, 500_000, "264M"),
        ),
        row(
            "DS-Conv",
            Some(exact(4672, "4672")),
            4672,
            approx(18_900_000, 50_000, "18.9M"),
        ),
        row("Avg-Pool", None, 0, exact(64, "64")),
        row("Softmax", Some(exact(768, "768")), 768, exact(768, "768")),
    ],
    total_params: approx(72_000, 500, "72K"),
    total_params_exact: 71_936,
    total_multiplies: approx(285_000_000, 500_000, "285M"),
};

/// Reference table for DS-ResNet14.
pub const TABLE_2: GoldenTable = GoldenTable {
    id: 2,
    preset: "DS-ResNet14",
    rows: &[
        row("Conv", Some(exact(288, "288")), 288, approx(1_200_000, 50_000, "1.2M")),
        row("SE", Some(exact(128, "128")), 128, exact(160, "160")),
        row("Avg-Pool 2x2", None, 0, approx(32_000, 500, "32K")),
        row(
            "Res x5",
            Some(approx(13_100, 50, "13.1K")),
            13_120,
            approx(13_100_000, 50_000, "13.1M"),
        ),
        row(
            "DS-Conv",
            Some(exact(1312, "1312")),
            1312,
            approx(1_300_000, 50_000, "1.3M"),
        ),
        row("Avg-Pool", None, 0, exact(32, "32")),
        row("Softmax", Some(exact(384, "384")), 384, exact(384, "384")),
    ],
    total_params: approx(15_200, 50, "15.2K"),
    total_params_exact: 15_232,
    total_multiplies: approx(15_700_000, 50_000, "15.7M"),
};

/// Reference table for DS-ResNet10.
pub const TABLE_3: GoldenTable = GoldenTable {
    id: 3,
    preset: "DS-ResNet10",
    rows: &[
        row("Conv", Some(exact(288, "288")), 288, approx(1_200_000, 50_000, "1.2M")),
        row("SE", Some(exact(128, "128")), 128, exact(160, "160")),
        row("Avg-Pool 4x2", None, 0, approx(16_000, 500, "16K")),
        row(
            "DS-Conv x7",
            Some(approx(9_200, 50, "9.2K")),
            9184,
            approx(4_600_000, 50_000, "4.6M"),
        ),
        row("Avg-Pool", None, 0, exact(32, "32")),
        row("Softmax", Some(exact(384, "384")), 384, exact(384, "384")),
    ],
    total_params: approx(10_000, 500, "10K"),
    total_params_exact: 9_984,
    total_multiplies: approx(5_800_000, 50_000, "5.8M"),
};

pub fn golden_table(id: u8) -> Result<&'static GoldenTable> {
    match id {
        1 => Ok(&TABLE_1),
        2 => Ok(&TABLE_2),
        3 => Ok(&TABLE_3),
        other => Err(Error::Config(format!(
            "no reference table {other} (valid: 1, 2, 3)"
        ))),
    }
}

/// Result of comparing one value of one report row against the reference.
#[derive(Debug, Clone)]
pub struct RowCheck {
    pub row: String,
    pub field: &'static str,
    pub expected: String,
    pub computed: u64,
    pub delta: i64,
    pub pass: bool,
}

impl fmt::Display for RowCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} {:<10} computed {:>11}  expected {:>7}  {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.row,
            self.field,
            self.computed,
            self.expected,
            if self.pass {
                String::new()
            } else {
                format!("(delta {})", self.delta)
            }
        )
    }
}

/// Checks a report against a reference table.
///
/// Parameter counts must match the exact integers; multiply counts must
/// round to what the table prints (within half a printed unit). The totals
/// rows get a full printed unit because the reference totals were themselves
/// summed from rounded entries.
pub fn verify_against_reference(report: &CostReport, table_id: u8) -> Result<Vec<RowCheck>> {
    let table = golden_table(table_id)?;
    if report.rows.len() != table.rows.len() {
        return Err(Error::Config(format!(
            "report has {} rows but reference table {} has {}",
            report.rows.len(),
            table_id,
            table.rows.len()
        )));
    }
    let mut checks = Vec::new();
    for (got, want) in report.rows.iter().zip(table.rows) {
        checks.push(RowCheck {
            row: want.label.to_string(),
            field: "params",
            expected: want
                .params
                .map(|p| p.text.to_string())
                .unwrap_or_else(|| "-".into()),
            computed: got.params,
            delta: got.params as i64 - want.params_exact as i64,
            pass: got.params == want.params_exact,
        });
        let m = want.multiplies;
        checks.push(RowCheck {
            row: want.label.to_string(),
            field: "multiplies",
            expected: m.text.to_string(),
            computed: got.multiplies,
            delta: got.multiplies as i64 - m.value as i64,
            pass: (got.multiplies as i64 - m.value as i64).unsigned_abs() <= m.half_ulp,
        });
    }
    checks.push(RowCheck {
        row: "Total".into(),
        field: "params",
        expected: table.total_params.text.to_string(),
        computed: report.total_params,
        delta: report.total_params as i64 - table.total_params_exact as i64,
        pass: report.total_params == table.total_params_exact,
    });
    let tm = table.total_multiplies;
    checks.push(RowCheck {
        row: "Total".into(),
        field: "multiplies",
        expected: tm.text.to_string(),
        computed: report.total_multiplies,
        delta: report.total_multiplies as i64 - tm.value as i64,
        pass: (report.total_multiplies as i64 - tm.value as i64).unsigned_abs() <= 2 * tm.half_ulp,
    });
    Ok(checks)
}
