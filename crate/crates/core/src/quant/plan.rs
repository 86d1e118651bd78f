use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::params::QParams;

/// One quantization parameter set attached to a layer operand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    /// `input`, `weight`, `weight[<channel>]` or `output`.
    pub role: String,
    pub scale: f32,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

impl ParamEntry {
    pub fn new(role: impl Into<String>, q: &QParams) -> Self {
        ParamEntry {
            role: role.into(),
            scale: q.scale,
            zero_point: q.zero_point,
            qmin: q.qmin,
            qmax: q.qmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub quantize: bool,
    pub granularity: String,
    pub symmetric: bool,
    pub params: Vec<ParamEntry>,
    /// Weights use the 7-bit main part plus a sparse i32 residual.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub outliers: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub layers: Vec<LayerPlan>,
}

impl QuantPlan {
    pub fn quantized_layers(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().filter(|l| l.quantize).map(|l| l.name.as_str())
    }

    pub fn is_quantized(&self, layer: &str) -> bool {
        self.layers.iter().any(|l| l.quantize && l.name == layer)
    }

    /// Same plan with `fallback` layers switched to f32.
    pub fn with_fallback(&self, fallback: &[String]) -> QuantPlan {
        let mut p = self.clone();
        for l in &mut p.layers {
            if fallback.contains(&l.name) {
                l.quantize = false;
            }
        }
        p
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<plan>".into(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerError {
    pub layer: String,
    /// `‖y_q - y‖ / ‖y‖` over the layer output.
    pub l2_rel: f64,
    pub sqnr_db: f64,
}

impl LayerError {
    /// Compares `approx` against `reference`, both accumulated in f64.
    pub fn measure(layer: impl Into<String>, reference: &[f32], approx: &[f32]) -> Self {
        let signal: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
        let noise: f64 = reference
            .iter()
            .zip(approx)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let l2_rel = if signal > 0.0 {
            (noise / signal).sqrt()
        } else if noise == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let sqnr_db = if noise == 0.0 {
            f64::INFINITY
        } else if signal == 0.0 {
            f64::NEG_INFINITY
        } else {
            10.0 * (signal / noise).log10()
        };
        LayerError {
            layer: layer.into(),
            l2_rel,
            sqnr_db,
        }
    }
}

/// Per-layer errors (each layer quantized alone) plus the error of the
/// whole plan at the graph outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub layers: Vec<LayerError>,
    pub end_to_end: LayerError,
}

/// Layers whose error exceeds `threshold` stay in f32, in report order.
pub fn selective_plan(report: &ErrorReport, threshold: f64) -> Vec<String> {
    report
        .layers
        .iter()
        .filter(|l| !(l.l2_rel <= threshold))
        .map(|l| l.layer.clone())
        .collect()
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6e}")
    }
}

/// CSV `layer,l2_rel,sqnr_db`; the last row, named `end_to_end`, is the
/// full-plan error at the graph outputs.
pub fn write_report_csv<W: Write>(report: &ErrorReport, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let err = |e: csv::Error| Error::InvalidArgument(format!("writing CSV: {e}"));
    w.write_record(["layer", "l2_rel", "sqnr_db"]).map_err(err)?;
    for l in report.layers.iter().chain(std::iter::once(&report.end_to_end)) {
        w.write_record([l.layer.clone(), fmt_metric(l.l2_rel), fmt_metric(l.sqnr_db)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
