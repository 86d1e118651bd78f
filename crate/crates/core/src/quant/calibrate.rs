//! Calibration, plan construction, error profiling and selective fallback.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::interp::Interpreter;
use crate::ir::{DType, Graph, OpType, Tensor};
use crate::quant::affine::{minmax_params, QGranularity};
use crate::quant::narrow::{consumer_window, net_aware_narrow, NarrowResult, Range};
use crate::quant::params::{choose_qparams_l2, choose_qparams_minmax, Histogram, QDtype, QParams, DEFAULT_BINS};
use crate::quant::plan::{selective_plan, ErrorReport, LayerError, LayerPlan, ParamEntry, QuantPlan};

/// One set of graph inputs.
pub type Batch = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantOptions {
    pub bins: usize,
    /// Pick activation ranges by L2 error instead of min/max.
    pub l2_ranges: bool,
    pub narrow: bool,
    /// `per_channel` (default) or `per_tensor` weights.
    pub per_channel: bool,
    pub symmetric_weights: bool,
    /// FC layers quantized with the outlier split.
    pub outlier_layers: Vec<String>,
    /// Quantile of |w| mapped to the edge of the 7-bit window in outlier layers.
    pub outlier_quantile: f64,
    /// Also plan row-wise quantization for embedding tables.
    pub embeddings: bool,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            bins: DEFAULT_BINS,
            l2_ranges: true,
            narrow: true,
            per_channel: true,
            symmetric_weights: true,
            outlier_layers: Vec::new(),
            outlier_quantile: 0.99,
            embeddings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Observed min/max of every float activation.
    pub observed: BTreeMap<String, Range>,
    /// Selected ranges before narrowing.
    pub selected: BTreeMap<String, Range>,
    pub narrowed: NarrowResult,
}

impl Calibration {
    pub fn range(&self, tensor: &str) -> Option<Range> {
        self.narrowed.ranges.get(tensor).copied()
    }
}

fn float_activations(g: &Graph) -> Vec<String> {
    g.tensors()
        .iter()
        .filter(|s| !g.is_weight(&s.name) && matches!(s.dtype, DType::F32 | DType::F16))
        .map(|s| s.name.clone())
        .collect()
}

/// Collects activation statistics over `batches` (processed in order),
/// selects a range per tensor and narrows the ranges using graph structure.
pub fn calibrate(g: &Graph, batches: &[Batch], opts: &QuantOptions) -> Result<Calibration> {
    if batches.is_empty() {
        return Err(Error::Quant("calibration set is empty".into()));
    }
    let interp = Interpreter::new(g)?;
    let names = float_activations(interp.graph());
    let mut observed: BTreeMap<String, Range> = BTreeMap::new();
    let runs = batches
        .iter()
        .map(|b| interp.run(b, &mut []).map(|r| r.values))
        .collect::<Result<Vec<_>>>()?;
    for values in &runs {
        for n in &names {
            if let Some(t) = values.get(n) {
                let v = t.to_f32_vec();
                let lo = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
                let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                if !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Numeric(format!("activation `{n}` is not finite")));
                }
                let e = observed.entry(n.clone()).or_insert((lo, hi));
                *e = (e.0.min(lo), e.1.max(hi));
            }
        }
    }
    let mut selected = BTreeMap::new();
    for (n, &(lo, hi)) in &observed {
        let range = if opts.l2_ranges {
            let mut counts = vec![0u64; opts.bins];
            for values in &runs {
                let h = Histogram::from_values_in(&values[n].to_f32_vec(), opts.bins, lo, hi)?;
                for (c, &x) in counts.iter_mut().zip(h.counts()) {
                    *c += x;
                }
            }
            let h = Histogram::from_counts(lo, hi, counts)?;
            choose_qparams_l2(&h, QDtype::U8, false)?.range()
        } else {
            (lo.min(0.0), hi.max(0.0))
        };
        selected.insert(n.clone(), range);
    }
    let narrowed = if opts.narrow {
        net_aware_narrow(interp.graph(), &selected)?
    } else {
        NarrowResult {
            ranges: selected.clone(),
            passes: 0,
        }
    };
    Ok(Calibration {
        observed,
        selected,
        narrowed,
    })
}

fn quantile_abs(v: &[f32], q: f64) -> f64 {
    let mut a: Vec<f64> = v.iter().map(|x| x.abs() as f64).collect();
    a.sort_by(f64::total_cmp);
    let idx = ((a.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    a[idx]
}

/// Plan quantizing every FC and Conv layer (and embedding tables when
/// requested) with parameters derived from `calib`.
pub fn build_plan(g: &Graph, calib: &Calibration, opts: &QuantOptions) -> Result<QuantPlan> {
    let mut layers = Vec::new();
    for node in g.nodes() {
        match node.op {
            OpType::FC | OpType::Conv => {}
            OpType::SparseLengthsSum if opts.embeddings => {
                layers.push(LayerPlan {
                    name: node.name.clone(),
                    quantize: true,
                    granularity: QGranularity::PerRow.name().into(),
                    symmetric: false,
                    params: Vec::new(),
                    outliers: false,
                });
                continue;
            }
            _ => continue,
        }
        let range = |t: &str| {
            calib
                .range(t)
                .ok_or_else(|| Error::Quant(format!("no calibrated range for `{t}`")))
        };
        let (ilo, ihi) = range(&node.inputs[0])?;
        let (olo, ohi) = range(&node.outputs[0])?;
        let input = choose_qparams_minmax(ilo, ihi, QDtype::U8, false)?;
        let output = choose_qparams_minmax(olo, ohi, QDtype::U8, false)?;
        let w = g
            .weight_data(&node.inputs[1])
            .ok_or_else(|| Error::exec(&node.name, "missing weight data"))?;
        let wf = w.to_f32_vec();
        let outliers = node.op == OpType::FC && opts.outlier_layers.contains(&node.name);
        let gran = if opts.per_channel {
            QGranularity::PerChannel { axis: 0 }
        } else {
            QGranularity::PerTensor
        };
        let weight: Vec<QParams> = if outliers {
            let per = wf.len() / w.dims()[0];
            let slices: Vec<&[f32]> = if opts.per_channel { wf.chunks(per).collect() } else { vec![&wf[..]] };
            slices
                .iter()
                .map(|s| {
                    let a = quantile_abs(s, opts.outlier_quantile) * 127.0 / 63.0;
                    choose_qparams_minmax(-a, a, QDtype::I8, true)
                })
                .collect::<Result<_>>()?
        } else {
            minmax_params(&wf, w.dims(), gran, QDtype::I8, opts.symmetric_weights)?
        };
        let mut params = vec![ParamEntry::new("input", &input)];
        if opts.per_channel {
            params.extend(weight.iter().enumerate().map(|(c, q)| ParamEntry::new(format!("weight[{c}]"), q)));
        } else {
            params.push(ParamEntry::new("weight", &weight[0]));
        }
        params.push(ParamEntry::new("output", &output));
        layers.push(LayerPlan {
            name: node.name.clone(),
            quantize: true,
            granularity: gran.name().into(),
            symmetric: opts.symmetric_weights || outliers,
            params,
            outliers,
        });
    }
    Ok(QuantPlan { layers })
}

fn reference_runs(g: &Graph, batches: &[Batch]) -> Result<(Interpreter, Vec<BTreeMap<String, Tensor>>)> {
    let interp = Interpreter::new(g)?;
    let values = batches
        .iter()
        .map(|b| interp.run(b, &mut []).map(|r| r.values))
        .collect::<Result<Vec<_>>>()?;
    Ok((interp, values))
}

/// Error of the full plan at the graph outputs, over all batches.
pub fn end_to_end_error(g: &Graph, batches: &[Batch], plan: &QuantPlan) -> Result<LayerError> {
    if batches.is_empty() {
        return Err(Error::Quant("calibration set is empty".into()));
    }
    let (reference, _) = reference_runs(g, &[])?;
    let cand = Interpreter::with_plan(g, plan)?;
    let (mut r, mut q) = (Vec::new(), Vec::new());
    for b in batches {
        let a = reference.run(b, &mut [])?.outputs;
        let c = cand.run(b, &mut [])?.outputs;
        for (name, t) in &a {
            r.extend(t.to_f32_vec());
            q.extend(c[name].to_f32_vec());
        }
    }
    Ok(LayerError::measure("end_to_end", &r, &q))
}

/// Per-layer error with only that layer quantized (its inputs are the f32
/// reference values), plus the error of the whole plan at the outputs.
/// Layer outputs are compared after clamping both sides to the consumer
/// window, so values no consumer can distinguish do not count as error.
pub fn profile_quant_error(g: &Graph, batches: &[Batch], plan: &QuantPlan) -> Result<ErrorReport> {
    if batches.is_empty() {
        return Err(Error::Quant("calibration set is empty".into()));
    }
    let (_, refs) = reference_runs(g, batches)?;
    let cand = Interpreter::with_plan(g, plan)?;
    let mut layers = Vec::new();
    for name in plan.quantized_layers() {
        let idx = g.node_index(name).expect("plan validated against graph");
        let out = &g.nodes()[idx].outputs[0];
        let (lo, hi) = consumer_window(g, out);
        let clamp = |v: f32| (v as f64).clamp(lo, hi) as f32;
        let (mut r, mut q) = (Vec::new(), Vec::new());
        for values in &refs {
            r.extend(values[out].to_f32_vec().into_iter().map(clamp));
            q.extend(cand.exec_node(idx, values)?[0].to_f32_vec().into_iter().map(clamp));
        }
        layers.push(LayerError::measure(name, &r, &q));
    }
    Ok(ErrorReport {
        layers,
        end_to_end: end_to_end_error(g, batches, plan)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutcome {
    pub calibration: Calibration,
    /// Every eligible layer quantized.
    pub candidate: QuantPlan,
    /// Candidate with the fallback layers kept in f32.
    pub plan: QuantPlan,
    pub fallback: Vec<String>,
    /// Per-layer errors of the candidate; end-to-end error of the final plan.
    pub report: ErrorReport,
}

/// Calibration, narrowing, per-layer profiling and selective fallback.
pub fn quantize_model(g: &Graph, batches: &[Batch], threshold: f64, opts: &QuantOptions) -> Result<QuantizeOutcome> {
    let calibration = calibrate(g, batches, opts)?;
    let candidate = build_plan(g, &calibration, opts)?;
    let profiled = profile_quant_error(g, batches, &candidate)?;
    let fallback = selective_plan(&profiled, threshold);
    let plan = candidate.with_fallback(&fallback);
    let report = ErrorReport {
        layers: profiled.layers,
        end_to_end: end_to_end_error(g, batches, &plan)?,
    };
    Ok(QuantizeOutcome {
        calibration,
        candidate,
        plan,
        fallback,
        report,
    })
}
