//! Range narrowing from graph structure: a tensor read only by Relu never
//! needs its negative part, a tensor read only by Clip needs nothing outside
//! the clip window, and the outputs of Relu/Clip inherit those bounds.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::Result;
use crate::ir::{Graph, OpType};

pub type Range = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct NarrowResult {
    pub ranges: BTreeMap<String, Range>,
    /// Sweeps that changed at least one range.
    pub passes: usize,
}

fn full() -> Range {
    (f64::NEG_INFINITY, f64::INFINITY)
}

fn clip_window(g: &Graph, node: usize) -> Range {
    let n = &g.nodes()[node];
    match n.op {
        OpType::Relu => (0.0, f64::INFINITY),
        OpType::Clip => (
            n.attr_float("min").unwrap_or(f64::NEG_INFINITY),
            n.attr_float("max").unwrap_or(f64::INFINITY),
        ),
        _ => full(),
    }
}

/// Intersects `r` with `w`. An empty intersection collapses to the endpoint
/// of `r` nearest the window, so ranges never grow.
fn intersect(r: Range, w: Range) -> Range {
    let lo = r.0.max(w.0);
    let hi = r.1.min(w.1);
    if lo <= hi {
        (lo, hi)
    } else if r.1 < w.0 {
        (r.1, r.1)
    } else {
        (r.0, r.0)
    }
}

fn window_of(g: &Graph, name: &str, consumers: &HashMap<&str, Vec<usize>>, outputs: &HashSet<&str>) -> Range {
    match consumers.get(name) {
        Some(cs) if !outputs.contains(name) => cs
            .iter()
            .map(|&c| clip_window(g, c))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1))),
        _ => full(),
    }
}

/// Interval of values of `tensor` its consumers can tell apart: the union
/// of the Relu/Clip windows of all consumers, unbounded for graph outputs
/// and tensors read by any other op.
pub fn consumer_window(g: &Graph, tensor: &str) -> Range {
    let outputs: HashSet<&str> = g.outputs().iter().map(String::as_str).collect();
    window_of(g, tensor, &g.consumers(), &outputs)
}

/// Narrows `ranges` to a fixed point. Tensors absent from `ranges` are
/// ignored. The result is never wider than the input.
pub fn net_aware_narrow(g: &Graph, ranges: &BTreeMap<String, Range>) -> Result<NarrowResult> {
    let order = g.topo_order()?;
    let consumers = g.consumers();
    let outputs: HashSet<&str> = g.outputs().iter().map(String::as_str).collect();

    let windows: BTreeMap<&str, Range> = ranges
        .keys()
        .map(|name| (name.as_str(), window_of(g, name, &consumers, &outputs)))
        .collect();

    let mut cur = ranges.clone();
    let mut passes = 0;
    for _ in 0..=g.nodes().len() {
        let mut changed = false;
        let mut update = |cur: &mut BTreeMap<String, Range>, name: &str, w: Range| {
            if let Some(r) = cur.get_mut(name) {
                let n = intersect(*r, w);
                if n != *r {
                    *r = n;
                    changed = true;
                }
            }
        };
        for &ni in &order {
            let node = &g.nodes()[ni];
            for t in &node.inputs {
                if let Some(&w) = windows.get(t.as_str()) {
                    update(&mut cur, t, w);
                }
            }
            if matches!(node.op, OpType::Relu | OpType::Clip) {
                if let Some(&(a, b)) = cur.get(&node.inputs[0]) {
                    let (wl, wh) = clip_window(g, ni);
                    let derived = (a.clamp(wl, wh), b.clamp(wl, wh));
                    update(&mut cur, &node.outputs[0], derived);
                }
            }
        }
        if !changed {
            break;
        }
        passes += 1;
    }
    Ok(NarrowResult { ranges: cur, passes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, Node, TensorSpec};

    fn graph(consumers: &[(&str, OpType)]) -> Graph {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("t", vec![4], DType::F32));
        for (i, (name, op)) in consumers.iter().enumerate() {
            let out = format!("o{i}");
            g.add_tensor(TensorSpec::new(&out, vec![], DType::F32));
            let mut node = match op {
                OpType::Add => Node::new(*name, *op, ["t", "t"], [out.as_str()]),
                _ => Node::new(*name, *op, ["t"], [out.as_str()]),
            };
            if *op == OpType::Clip {
                node = node.with_attr("min", 0.0).with_attr("max", 6.0);
            }
            g.add_node(node);
            g.mark_output(out);
        }
        g
    }

    fn run(g: &Graph) -> NarrowResult {
        let ranges = BTreeMap::from([("t".to_string(), (-3.0, 5.0))]);
        net_aware_narrow(g, &ranges).unwrap()
    }

    #[test]
    fn relu_only_consumer_drops_negatives() {
        let r = run(&graph(&[("r", OpType::Relu)]));
        assert_eq!(r.ranges["t"], (0.0, 5.0));
    }

    #[test]
    fn mixed_consumers_leave_range_alone() {
        let r = run(&graph(&[("r", OpType::Relu), ("a", OpType::Add)]));
        assert_eq!(r.ranges["t"], (-3.0, 5.0));
        assert_eq!(r.passes, 0);
    }

    #[test]
    fn clip_intersects() {
        let r = run(&graph(&[("c", OpType::Clip)]));
        assert_eq!(r.ranges["t"], (0.0, 5.0));
    }

    #[test]
    fn empty_intersection_collapses_to_nearest_end() {
        assert_eq!(intersect((-3.0, -1.0), (0.0, f64::INFINITY)), (-1.0, -1.0));
        assert_eq!(intersect((7.0, 9.0), (0.0, 6.0)), (7.0, 7.0));
    }
}
