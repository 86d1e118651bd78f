use std::collections::BTreeMap;
use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::cost::{OpCost, Role, TensorTraffic};
use crate::error::{Error, Result};
use crate::interp::predict;
use crate::ir::{Node, OpType};
use crate::roofline::{AcceleratorConfig, Bound};

/// Everything known about one executed op.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObserverRecord {
    pub node: String,
    pub op: OpType,
    pub wall_s: f64,
    pub flops: u64,
    pub weight_bytes: u64,
    pub act_bytes: u64,
    /// FLOP/s actually achieved (0 for ops without FLOPs).
    pub attained_flops: f64,
    pub predicted_s: f64,
    pub predicted_bound: Bound,
    pub input_dims: Vec<Vec<usize>>,
    pub output_dims: Vec<Vec<usize>>,
    /// Dtypes of inputs then outputs.
    pub dtypes: Vec<String>,
}

/// Hooks invoked at the start and end of every operator.
pub trait Observer {
    fn on_start(&mut self, _node: &Node) {}
    fn on_end(&mut self, record: &ObserverRecord);
}

/// Keeps every record in execution order.
#[derive(Debug, Default)]
pub struct RecordCollector {
    pub records: Vec<ObserverRecord>,
}

impl Observer for RecordCollector {
    fn on_end(&mut self, record: &ObserverRecord) {
        self.records.push(record.clone());
    }
}

/// Streams one JSON object per record, newline-terminated.
pub struct JsonLinesObserver<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> JsonLinesObserver<W> {
    pub fn new(out: W) -> Self {
        JsonLinesObserver { out, error: None }
    }

    /// Returns the writer, or the first write error encountered.
    pub fn finish(mut self) -> Result<W> {
        if let Some(e) = self.error.take() {
            return Err(Error::io("<records>", e));
        }
        self.out.flush().map_err(|e| Error::io("<records>", e))?;
        Ok(self.out)
    }
}

impl<W: Write> Observer for JsonLinesObserver<W> {
    fn on_end(&mut self, record: &ObserverRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpShare {
    pub op: OpType,
    pub total_s: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionReport {
    pub records: Vec<ObserverRecord>,
    pub total_s: f64,
    pub total_flops: u64,
    /// Per op type, largest total time first.
    pub by_op: Vec<OpShare>,
}

impl ExecutionReport {
    pub fn from_records(records: Vec<ObserverRecord>) -> Self {
        let total_s: f64 = records.iter().map(|r| r.wall_s).sum();
        let mut per: BTreeMap<OpType, f64> = BTreeMap::new();
        for r in &records {
            *per.entry(r.op).or_default() += r.wall_s;
        }
        let n = per.len() as f64;
        let mut by_op: Vec<OpShare> = per
            .into_iter()
            .map(|(op, t)| OpShare {
                op,
                total_s: t,
                share: if total_s > 0.0 { t / total_s } else { 1.0 / n },
            })
            .collect();
        by_op.sort_by(|a, b| b.total_s.total_cmp(&a.total_s).then(a.op.name().cmp(b.op.name())));
        ExecutionReport {
            total_flops: records.iter().map(|r| r.flops).sum(),
            records,
            total_s,
            by_op,
        }
    }

    /// CSV `op_type,total_s,share`.
    pub fn write_aggregate_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let err = |e: csv::Error| Error::InvalidArgument(format!("writing CSV: {e}"));
        w.write_record(["op_type", "total_s", "share"]).map_err(err)?;
        for s in &self.by_op {
            w.write_record([s.op.name().to_string(), format!("{:e}", s.total_s), format!("{:.6}", s.share)])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Median cost of taking two timestamps around an empty operation. Reported
/// next to measurements rather than subtracted from them.
pub fn measure_noop_overhead(samples: usize) -> f64 {
    let mut t: Vec<f64> = (0..samples.max(1))
        .map(|_| {
            let s = Instant::now();
            black_box(());
            s.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deviation {
    pub node: String,
    pub op: OpType,
    pub measured_s: f64,
    pub predicted_s: f64,
    /// `measured / predicted`.
    pub ratio: f64,
    /// Ratio outside the accepted band.
    pub flagged: bool,
}

/// Measured time against the roofline prediction for `host`, per record.
/// `band` is the accepted `(low, high)` range of ratios.
pub fn compare_predicted_measured(
    report: &ExecutionReport,
    host: &AcceleratorConfig,
    band: (f64, f64),
) -> Result<Vec<Deviation>> {
    host.validate()?;
    if report.records.is_empty() {
        return Err(Error::InvalidArgument("report has no records".into()));
    }
    Ok(report
        .records
        .iter()
        .map(|r| {
            let c = OpCost {
                flops: r.flops,
                weight_bytes: r.weight_bytes,
                act_in_bytes: r.act_bytes,
                act_out_bytes: 0,
                traffic: vec![TensorTraffic {
                    tensor: String::new(),
                    role: Role::ActIn,
                    elems: 0,
                    bytes: r.weight_bytes + r.act_bytes,
                }],
            };
            let predicted_s = predict(&c, host).time_s();
            let ratio = if predicted_s > 0.0 {
                r.wall_s / predicted_s
            } else if r.wall_s == 0.0 {
                1.0
            } else {
                f64::MAX
            };
            Deviation {
                node: r.node.clone(),
                op: r.op,
                measured_s: r.wall_s,
                predicted_s,
                ratio,
                flagged: ratio < band.0 || ratio > band.1,
            }
        })
        .collect())
}

