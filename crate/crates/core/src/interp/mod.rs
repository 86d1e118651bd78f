//! Reference graph executor with per-operator observers.
//!
//! Nodes run one at a time in topological order. Each execution produces an
//! [`ObserverRecord`] combining the measured wall time with the cost model
//! and a roofline prediction for a user-described host.

mod observer;
mod ops;
mod prepared;

use std::collections::BTreeMap;
use std::time::Instant;

pub use observer::{
    compare_predicted_measured, measure_noop_overhead, Deviation, ExecutionReport, JsonLinesObserver,
    Observer, ObserverRecord, OpShare, RecordCollector,
};
pub use prepared::QuantLayerInfo;

use crate::cost::{graph_costs, ElemBytes, OpCost};
use crate::error::{Error, Result};
use crate::ir::{infer_shapes, Graph, Node, OpType, Tensor};
use crate::quant::QuantPlan;
use crate::roofline::{AcceleratorConfig, Bound, LayerTiming};
use prepared::Prepared;

/// Host description used for per-op predictions when none is supplied:
/// 100 GFLOP/s, 20 GB/s DRAM, 32 MiB cache at 200 GB/s.
pub const DEFAULT_HOST: AcceleratorConfig = AcceleratorConfig {
    peak_flops: 100e9,
    dram_bw: 20e9,
    onchip_capacity: 33_554_432.0,
    onchip_bw: 200e9,
};

/// Predicted roofline time and bound of one op on `host`: operands are
/// on-chip when the op's whole traffic fits the on-chip capacity.
pub fn predict(c: &OpCost, host: &AcceleratorConfig) -> LayerTiming {
    let bytes = c.total_bytes() as f64;
    if bytes <= host.onchip_capacity {
        LayerTiming::from_parts(c.flops as f64, 0.0, bytes, host)
    } else {
        LayerTiming::from_parts(c.flops as f64, bytes, 0.0, host)
    }
}

pub struct Interpreter {
    graph: Graph,
    order: Vec<usize>,
    costs: Vec<OpCost>,
    prepared: Vec<Option<Prepared>>,
    host: AcceleratorConfig,
}

/// Outputs and (optionally) every intermediate value of one run.
pub struct RunResult {
    pub outputs: BTreeMap<String, Tensor>,
    pub values: BTreeMap<String, Tensor>,
    pub report: ExecutionReport,
}

impl Interpreter {
    /// f32 backend. Weights are packed once here.
    pub fn new(g: &Graph) -> Result<Self> {
        Self::build(g, None)
    }

    /// Quantized backend: layers the plan marks as quantized run through the
    /// integer kernels; everything else runs in f32.
    pub fn with_plan(g: &Graph, plan: &QuantPlan) -> Result<Self> {
        Self::build(g, Some(plan))
    }

    fn build(g: &Graph, plan: Option<&QuantPlan>) -> Result<Self> {
        let graph = infer_shapes(g)?;
        let order = graph.topo_order()?;
        let costs = graph_costs(&graph, &ElemBytes::declared())?;
        if let Some(plan) = plan {
            for l in plan.quantized_layers() {
                match graph.node(l).map(|n| n.op) {
                    Some(OpType::FC | OpType::Conv | OpType::SparseLengthsSum) => {}
                    Some(op) => {
                        return Err(Error::InvalidArgument(format!(
                            "plan/graph mismatch: {op} node `{l}` cannot be quantized"
                        )))
                    }
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "plan/graph mismatch: no node named `{l}`"
                        )))
                    }
                }
            }
        }
        let prepared = graph
            .nodes()
            .iter()
            .map(|n| {
                let layer = plan.and_then(|p| p.layers.iter().find(|l| l.quantize && l.name == n.name));
                Prepared::new(n, &graph, layer)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Interpreter {
            graph,
            order,
            costs,
            prepared,
            host: DEFAULT_HOST,
        })
    }

    pub fn set_host(&mut self, host: AcceleratorConfig) -> Result<()> {
        host.validate()?;
        self.host = host;
        Ok(())
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn costs(&self) -> &[OpCost] {
        &self.costs
    }

    /// Quantization details of a prepared layer, if it runs quantized.
    pub fn quant_info(&self, node: &str) -> Option<QuantLayerInfo> {
        let i = self.graph.node_index(node)?;
        self.prepared[i].as_ref().and_then(|p| p.quant_info())
    }

    fn operand<'a>(
        &'a self,
        node: &Node,
        name: &str,
        values: &'a BTreeMap<String, Tensor>,
    ) -> Result<&'a Tensor> {
        if let Some(t) = values.get(name) {
            return Ok(t);
        }
        if self.graph.is_weight(name) {
            return self
                .graph
                .weight_data(name)
                .ok_or_else(|| Error::exec(&node.name, format!("missing weight data for `{name}`")));
        }
        Err(Error::exec(&node.name, format!("input `{name}` has no value")))
    }

    /// Executes node `index` on values taken from `values` (weights come
    /// from the graph).
    pub fn exec_node(&self, index: usize, values: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>> {
        let node = &self.graph.nodes()[index];
        let ins = node
            .inputs
            .iter()
            .map(|t| self.operand(node, t, values))
            .collect::<Result<Vec<_>>>()?;
        let out_dims: Vec<Vec<usize>> = node
            .outputs
            .iter()
            .map(|t| self.graph.spec_for(&node.name, t).map(|s| s.dims.clone()))
            .collect::<Result<_>>()?;
        if let Some(p) = &self.prepared[index] {
            return Ok(vec![p.run(node, &ins, &out_dims[0])?]);
        }
        let one = |t: Result<Tensor>| t.map(|t| vec![t]);
        match node.op {
            OpType::Relu => one(ops::relu(node, ins[0])),
            OpType::Clip => one(ops::clip(node, ins[0])),
            OpType::Add => one(ops::broadcast_binary(node, ins[0], ins[1], &out_dims[0], |a, b| a + b)),
            OpType::Mul => one(ops::broadcast_binary(node, ins[0], ins[1], &out_dims[0], |a, b| a * b)),
            OpType::Sum => one(ops::sum(node, &ins)),
            OpType::SpatialBN => one(ops::spatial_bn(node, &ins)),
            OpType::Softmax => one(ops::softmax(node, ins[0])),
            OpType::Concat => one(ops::concat(node, &ins, &out_dims[0])),
            OpType::Split => ops::split(node, ins[0], &out_dims),
            OpType::Flatten => one(ins[0].clone().reshape(out_dims[0].clone())),
            OpType::BatchMatMul => one(ops::batch_matmul(node, ins[0], ins[1], &out_dims[0])),
            OpType::BatchGather => one(ops::batch_gather(node, ins[0], ins[1], &out_dims[0])),
            OpType::FC | OpType::Conv | OpType::SparseLengthsSum => {
                Err(Error::exec(&node.name, "layer was not prepared"))
            }
        }
    }

    fn check_inputs(&self, inputs: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.graph.inputs() {
            let t = inputs
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing graph input `{name}`")))?;
            let spec = self.graph.tensor(name).expect("declared input");
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "input `{name}` has dims {:?}, graph declares {:?}",
                    t.dims(),
                    spec.dims
                )));
            }
        }
        Ok(())
    }

    /// Runs the graph. Observers are told about every op before and after
    /// it executes; they cannot change any value.
    pub fn run(&self, inputs: &BTreeMap<String, Tensor>, observers: &mut [&mut dyn Observer]) -> Result<RunResult> {
        self.check_inputs(inputs)?;
        let mut values: BTreeMap<String, Tensor> = inputs.clone();
        let mut records = Vec::with_capacity(self.order.len());
        for &ni in &self.order {
            let node = &self.graph.nodes()[ni];
            for o in observers.iter_mut() {
                o.on_start(node);
            }
            let start = Instant::now();
            let outs = self.exec_node(ni, &values)?;
            let wall_s = start.elapsed().as_secs_f64();
            let record = self.record(ni, wall_s);
            for o in observers.iter_mut() {
                o.on_end(&record);
            }
            records.push(record);
            for (name, t) in node.outputs.iter().zip(outs) {
                values.insert(name.clone(), t);
            }
        }
        let outputs = self
            .graph
            .outputs()
            .iter()
            .map(|n| {
                values
                    .get(n)
                    .cloned()
                    .map(|t| (n.clone(), t))
                    .ok_or_else(|| Error::InvalidArgument(format!("graph output `{n}` was never produced")))
            })
            .collect::<Result<_>>()?;
        Ok(RunResult {
            outputs,
            values,
            report: ExecutionReport::from_records(records),
        })
    }

    fn record(&self, ni: usize, wall_s: f64) -> ObserverRecord {
        let node = &self.graph.nodes()[ni];
        let c = &self.costs[ni];
        let spec = |t: &String| self.graph.tensor(t).expect("declared tensor");
        let predicted = predict(c, &self.host);
        ObserverRecord {
            node: node.name.clone(),
            op: node.op,
            wall_s,
            flops: c.flops,
            weight_bytes: c.weight_bytes,
            act_bytes: c.act_bytes(),
            attained_flops: if c.flops > 0 && wall_s > 0.0 { c.flops as f64 / wall_s } else { 0.0 },
            predicted_s: predicted.time_s(),
            predicted_bound: predicted.bound,
            input_dims: node.inputs.iter().map(|t| spec(t).dims.clone()).collect(),
            output_dims: node.outputs.iter().map(|t| spec(t).dims.clone()).collect(),
            dtypes: node
                .inputs
                .iter()
                .chain(&node.outputs)
                .map(|t| spec(t).dtype.name().to_string())
                .collect(),
        }
    }
}

impl ObserverRecord {
    pub fn is_compute_bound(&self) -> bool {
        self.predicted_bound == Bound::Compute
    }
}
