//! Roofline simulation of a hypothetical accelerator with a greedy on-chip
//! memory allocator.
//!
//! Weights are pinned on-chip for the whole run in first-use order while
//! they fit (a weight that does not fit is skipped and later, smaller ones
//! are still tried). Activations are placed transiently in topological
//! order when they fit next to the current live set and are released after
//! their last consumer. Each layer costs the maximum of its compute,
//! off-chip and on-chip transfer times; layers run serially.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{graph_costs, ElemBytes, OpCost, Role};
use crate::error::{Error, Result};
use crate::ir::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorConfig {
    /// FLOP/s.
    pub peak_flops: f64,
    /// Off-chip bandwidth, bytes/s.
    pub dram_bw: f64,
    /// On-chip memory size in bytes (may be 0).
    pub onchip_capacity: f64,
    /// On-chip bandwidth, bytes/s.
    pub onchip_bw: f64,
}

impl AcceleratorConfig {
    pub fn new(peak_flops: f64, dram_bw: f64, onchip_capacity: f64, onchip_bw: f64) -> Result<Self> {
        let c = AcceleratorConfig {
            peak_flops,
            dram_bw,
            onchip_capacity,
            onchip_bw,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && !v.is_nan();
        if !pos(self.peak_flops) || !pos(self.dram_bw) || !pos(self.onchip_bw) {
            return Err(Error::InvalidArgument(
                "peak_flops, dram_bw and onchip_bw must be positive".into(),
            ));
        }
        if !(self.onchip_capacity >= 0.0) {
            return Err(Error::InvalidArgument("onchip_capacity must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    OnchipPinned,
    OnchipTransient,
    Offchip,
}

impl Placement {
    pub fn is_onchip(self) -> bool {
        self != Placement::Offchip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidencyPlan {
    pub placements: BTreeMap<String, Placement>,
    pub pinned_bytes: u64,
    pub peak_onchip_bytes: u64,
}

impl ResidencyPlan {
    pub fn placement(&self, tensor: &str) -> Placement {
        self.placements.get(tensor).copied().unwrap_or(Placement::Offchip)
    }
}

fn fits(used: u64, size: u64, capacity: f64) -> bool {
    (used + size) as f64 <= capacity
}

/// Tensor footprint in bytes under `eb` (full tensor, even when a layer
/// only touches part of it).
fn footprint(g: &Graph, name: &str, eb: &ElemBytes, weight: bool) -> u64 {
    g.tensor(name)
        .map(|s| s.numel() * eb.size(s, if weight { Role::Weight } else { Role::ActIn }))
        .unwrap_or(0)
}

struct Lifetimes {
    order: Vec<usize>,
    /// Position in `order` after which each activation can be released.
    last_use: HashMap<String, usize>,
}

fn lifetimes(g: &Graph) -> Result<Lifetimes> {
    let order = g.topo_order()?;
    let mut last_use = HashMap::new();
    for (pos, &ni) in order.iter().enumerate() {
        for t in &g.nodes()[ni].inputs {
            last_use.insert(t.clone(), pos);
        }
    }
    Ok(Lifetimes { order, last_use })
}

/// Decides where every tensor lives. Deterministic for a given graph.
pub fn allocate_onchip(g: &Graph, cfg: &AcceleratorConfig, eb: &ElemBytes) -> Result<ResidencyPlan> {
    let lt = lifetimes(g)?;
    let mut placements = BTreeMap::new();
    for spec in g.tensors() {
        placements.insert(spec.name.clone(), Placement::Offchip);
    }

    // Weights: first use in topological order, then any unused ones.
    let mut seen = HashSet::new();
    let mut weight_order = Vec::new();
    for &ni in &lt.order {
        for t in &g.nodes()[ni].inputs {
            if g.is_weight(t) && seen.insert(t.as_str()) {
                weight_order.push(t.as_str());
            }
        }
    }
    for w in g.weights() {
        if seen.insert(w.as_str()) {
            weight_order.push(w.as_str());
        }
    }
    let mut pinned = 0u64;
    for w in weight_order {
        let size = footprint(g, w, eb, true);
        if fits(pinned, size, cfg.onchip_capacity) {
            pinned += size;
            placements.insert(w.to_string(), Placement::OnchipPinned);
        }
    }

    let outputs: HashSet<&str> = g.outputs().iter().map(String::as_str).collect();
    let mut live = 0u64;
    let mut peak = pinned;
    let mut resident: Vec<(String, u64)> = Vec::new();
    let place = |name: &str, live: &mut u64, resident: &mut Vec<(String, u64)>, placements: &mut BTreeMap<String, Placement>| {
        let size = footprint(g, name, eb, false);
        if fits(pinned + *live, size, cfg.onchip_capacity) {
            *live += size;
            resident.push((name.to_string(), size));
            placements.insert(name.to_string(), Placement::OnchipTransient);
        }
    };
    for inp in g.inputs() {
        place(inp, &mut live, &mut resident, &mut placements);
    }
    peak = peak.max(pinned + live);
    for (pos, &ni) in lt.order.iter().enumerate() {
        for out in &g.nodes()[ni].outputs {
            place(out, &mut live, &mut resident, &mut placements);
        }
        peak = peak.max(pinned + live);
        resident.retain(|(name, size)| {
            let done = !outputs.contains(name.as_str())
                && lt.last_use.get(name).map_or(true, |&last| last <= pos);
            if done {
                live -= size;
            }
            !done
        });
    }
    Ok(ResidencyPlan {
        placements,
        pinned_bytes: pinned,
        peak_onchip_bytes: peak,
    })
}

/// Replays a plan and returns the largest on-chip occupancy it implies.
/// Used to check that no point in the schedule exceeds the capacity.
pub fn replay_peak(g: &Graph, plan: &ResidencyPlan, eb: &ElemBytes) -> Result<u64> {
    let lt = lifetimes(g)?;
    let outputs: HashSet<&str> = g.outputs().iter().map(String::as_str).collect();
    let pinned: u64 = g
        .weights()
        .iter()
        .filter(|w| plan.placement(w) == Placement::OnchipPinned)
        .map(|w| footprint(g, w, eb, true))
        .sum();
    let transient = |t: &str| plan.placement(t) == Placement::OnchipTransient;
    let mut live: u64 = g.inputs().iter().filter(|t| transient(t)).map(|t| footprint(g, t, eb, false)).sum();
    let mut peak = pinned + live;
    let mut resident: Vec<&str> = g.inputs().iter().map(String::as_str).filter(|t| transient(t)).collect();
    for (pos, &ni) in lt.order.iter().enumerate() {
        for out in &g.nodes()[ni].outputs {
            if transient(out) {
                live += footprint(g, out, eb, false);
                resident.push(out);
            }
        }
        peak = peak.max(pinned + live);
        resident.retain(|name| {
            let done = !outputs.contains(name) && lt.last_use.get(*name).map_or(true, |&l| l <= pos);
            if done {
                live -= footprint(g, name, eb, false);
            }
            !done
        });
    }
    Ok(peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Dram,
    Onchip,
}

impl Bound {
    pub fn name(self) -> &'static str {
        match self {
            Bound::Compute => "compute",
            Bound::Dram => "dram",
            Bound::Onchip => "onchip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerTiming {
    pub compute_s: f64,
    pub offchip_s: f64,
    pub onchip_s: f64,
    pub bound: Bound,
}

impl LayerTiming {
    /// Roofline time for explicit FLOP and byte counts. Ties resolve in the
    /// order compute, dram, onchip.
    pub fn from_parts(flops: f64, offchip_bytes: f64, onchip_bytes: f64, cfg: &AcceleratorConfig) -> Self {
        let compute_s = flops / cfg.peak_flops;
        let offchip_s = offchip_bytes / cfg.dram_bw;
        let onchip_s = if onchip_bytes == 0.0 { 0.0 } else { onchip_bytes / cfg.onchip_bw };
        let bound = if compute_s >= offchip_s && compute_s >= onchip_s {
            Bound::Compute
        } else if offchip_s >= onchip_s {
            Bound::Dram
        } else {
            Bound::Onchip
        };
        LayerTiming {
            compute_s,
            offchip_s,
            onchip_s,
            bound,
        }
    }

    pub fn time_s(&self) -> f64 {
        self.compute_s.max(self.offchip_s).max(self.onchip_s)
    }
}

/// Times one layer. Every operand access is charged to the memory the
/// tensor lives in; a tensor read by several layers is charged by each.
pub fn layer_time(c: &OpCost, plan: &ResidencyPlan, cfg: &AcceleratorConfig) -> LayerTiming {
    let (mut off, mut on) = (0u64, 0u64);
    for t in &c.traffic {
        if plan.placement(&t.tensor).is_onchip() {
            on += t.bytes;
        } else {
            off += t.bytes;
        }
    }
    LayerTiming::from_parts(c.flops as f64, off as f64, on as f64, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPerf {
    pub node: String,
    pub flops: u64,
    pub timing: LayerTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelPerf {
    pub total_s: f64,
    pub effective_flops: f64,
    pub layers: Vec<LayerPerf>,
    pub plan: ResidencyPlan,
}

impl ModelPerf {
    /// Number of layers bound by compute, DRAM and on-chip bandwidth.
    pub fn bound_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for l in &self.layers {
            h[l.timing.bound as usize] += 1;
        }
        h
    }
}

/// Simulates one inference on a shape-inferred graph.
pub fn simulate(g: &Graph, cfg: &AcceleratorConfig, eb: &ElemBytes) -> Result<ModelPerf> {
    let costs = graph_costs(g, eb)?;
    simulate_with_costs(g, &costs, cfg, eb)
}

pub fn simulate_with_costs(
    g: &Graph,
    costs: &[OpCost],
    cfg: &AcceleratorConfig,
    eb: &ElemBytes,
) -> Result<ModelPerf> {
    cfg.validate()?;
    let plan = allocate_onchip(g, cfg, eb)?;
    let mut layers = Vec::with_capacity(costs.len());
    for ni in g.topo_order()? {
        let c = &costs[ni];
        layers.push(LayerPerf {
            node: g.nodes()[ni].name.clone(),
            flops: c.flops,
            timing: layer_time(c, &plan, cfg),
        });
    }
    let total_s: f64 = layers.iter().map(|l| l.timing.time_s()).sum();
    let flops: u64 = layers.iter().map(|l| l.flops).sum();
    let effective_flops = if total_s > 0.0 {
        (flops as f64 / total_s).min(cfg.peak_flops)
    } else {
        0.0
    };
    Ok(ModelPerf {
        total_s,
        effective_flops,
        layers,
        plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub capacity_bytes: f64,
    pub onchip_bw: f64,
    pub total_s: f64,
    pub effective_flops: f64,
    pub bound_histogram: [usize; 3],
}

/// Simulates every `(capacity, onchip_bw)` pair. Rows are ordered by
/// capacity, then bandwidth, whatever the thread count.
pub fn capacity_sweep(
    g: &Graph,
    cfg: &AcceleratorConfig,
    eb: &ElemBytes,
    capacities: &[f64],
    onchip_bws: &[f64],
) -> Result<Vec<SweepPoint>> {
    if capacities.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("capacities must be sorted ascending".into()));
    }
    let costs = graph_costs(g, eb)?;
    let grid: Vec<(f64, f64)> = capacities
        .iter()
        .flat_map(|&c| onchip_bws.iter().map(move |&b| (c, b)))
        .collect();
    grid.par_iter()
        .map(|&(capacity, bw)| {
            let point_cfg = AcceleratorConfig {
                onchip_capacity: capacity,
                onchip_bw: bw,
                ..*cfg
            };
            let perf = simulate_with_costs(g, &costs, &point_cfg, eb)?;
            Ok(SweepPoint {
                capacity_bytes: capacity,
                onchip_bw: bw,
                total_s: perf.total_s,
                effective_flops: perf.effective_flops,
                bound_histogram: perf.bound_histogram(),
            })
        })
        .collect()
}

/// CSV: `capacity_bytes,onchip_bw,total_s,effective_tops,bound_histogram`,
/// the histogram written as `compute:N;dram:N;onchip:N`.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let err = |e: csv::Error| Error::InvalidArgument(format!("writing CSV: {e}"));
    w.write_record(["capacity_bytes", "onchip_bw", "total_s", "effective_tops", "bound_histogram"])
        .map_err(err)?;
    for p in points {
        let [c, d, o] = p.bound_histogram;
        w.write_record([
            format!("{}", p.capacity_bytes),
            format!("{:e}", p.onchip_bw),
            format!("{:e}", p.total_s),
            format!("{:.6}", p.effective_flops / 1e12),
            format!("compute:{c};dram:{d};onchip:{o}"),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{infer_shapes, DType, Node, OpType, TensorSpec};

    const MB: f64 = 1_000_000.0;

    fn cfg(capacity: f64) -> AcceleratorConfig {
        AcceleratorConfig::new(100e12, 100e9, capacity, 1e12).unwrap()
    }

    /// x[1,K1] -> fc1 (3 MB weight) -> fc2 (2 MB weight), f32.
    fn two_fc() -> Graph {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![1, 750], DType::F32))
            .add_weight(TensorSpec::new("w1", vec![1000, 750], DType::F32), None)
            .add_weight(TensorSpec::new("w2", vec![500, 1000], DType::F32), None)
            .add_tensor(TensorSpec::new("h", vec![], DType::F32))
            .add_tensor(TensorSpec::new("y", vec![], DType::F32))
            .add_node(Node::new("fc1", OpType::FC, ["x", "w1"], ["h"]))
            .add_node(Node::new("fc2", OpType::FC, ["h", "w2"], ["y"]))
            .mark_output("y");
        infer_shapes(&g).unwrap()
    }

    #[test]
    fn zero_capacity_is_all_offchip() {
        let g = two_fc();
        let plan = allocate_onchip(&g, &cfg(0.0), &ElemBytes::declared()).unwrap();
        assert!(plan.placements.values().all(|&p| p == Placement::Offchip));
        assert_eq!(plan.peak_onchip_bytes, 0);
    }

    #[test]
    fn greedy_trace_pins_first_weight() {
        let g = two_fc();
        let plan = allocate_onchip(&g, &cfg(4.0 * MB), &ElemBytes::declared()).unwrap();
        assert_eq!(plan.placement("w1"), Placement::OnchipPinned);
        assert_eq!(plan.placement("w2"), Placement::Offchip);
        assert_eq!(plan.pinned_bytes, 3_000_000);
        for t in ["x", "h", "y"] {
            assert_eq!(plan.placement(t), Placement::OnchipTransient, "{t}");
        }
        assert!(plan.peak_onchip_bytes as f64 <= 4.0 * MB);
    }

    #[test]
    fn ample_capacity_places_everything() {
        let g = two_fc();
        let plan = allocate_onchip(&g, &cfg(1e9), &ElemBytes::declared()).unwrap();
        assert!(plan.placements.values().all(|p| p.is_onchip()));
    }

    #[test]
    fn timing_arithmetic() {
        let c = cfg(0.0);
        let t = LayerTiming::from_parts(2e9, 0.0, 1e6, &c);
        assert!((t.compute_s - 20e-6).abs() < 1e-18);
        assert!((t.onchip_s - 1e-6).abs() < 1e-18);
        assert_eq!(t.bound, Bound::Compute);
        let t = LayerTiming::from_parts(2e6, 4e6, 0.0, &c);
        assert!((t.offchip_s - 40e-6).abs() < 1e-18);
        assert_eq!(t.bound, Bound::Dram);
    }

    #[test]
    fn sweep_rows_are_ordered() {
        let g = two_fc();
        let pts = capacity_sweep(&g, &cfg(0.0), &ElemBytes::declared(), &[0.0, 4.0 * MB, 1e9], &[1e12, 1e13])
            .unwrap();
        let keys: Vec<_> = pts.iter().map(|p| (p.capacity_bytes, p.onchip_bw)).collect();
        assert_eq!(
            keys,
            vec![(0.0, 1e12), (0.0, 1e13), (4.0 * MB, 1e12), (4.0 * MB, 1e13), (1e9, 1e12), (1e9, 1e13)]
        );
        assert!(capacity_sweep(&g, &cfg(0.0), &ElemBytes::declared(), &[2.0, 1.0], &[1e12]).is_err());
    }
}
