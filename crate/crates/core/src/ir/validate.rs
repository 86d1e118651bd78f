use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::ir::{Graph, OpType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    DuplicateTensor,
    DuplicateNode,
    InvalidDims,
    DanglingReference,
    MultipleProducers,
    ProducedWeight,
    ProducedInput,
    Unproduced,
    Cycle,
    WeightData,
    Arity,
    MissingAttr,
}

/// A graph invariant violation, naming the tensors or nodes involved.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub subjects: Vec<String>,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, subjects: Vec<String>, message: String) -> Self {
        Diagnostic {
            kind,
            subjects,
            message,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Allowed input counts per op (min, max).
fn arity(op: OpType) -> (usize, usize) {
    match op {
        OpType::FC => (2, 3),
        OpType::Conv => (2, 3),
        OpType::SparseLengthsSum => (3, 3),
        OpType::Concat | OpType::Sum => (1, usize::MAX),
        OpType::Split | OpType::Flatten | OpType::Relu | OpType::Clip | OpType::Softmax => (1, 1),
        OpType::BatchMatMul | OpType::BatchGather | OpType::Add | OpType::Mul => (2, 2),
        OpType::SpatialBN => (5, 5),
    }
}

/// Checks every graph invariant. Returns an empty list iff the graph is valid.
pub fn validate_graph(g: &Graph) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut diags = Vec::new();

    let mut seen = HashSet::new();
    for t in g.tensors() {
        if !seen.insert(t.name.as_str()) {
            diags.push(Diagnostic::new(
                DuplicateTensor,
                vec![t.name.clone()],
                format!("tensor `{}` declared more than once", t.name),
            ));
        }
        if t.dims.iter().any(|&d| d == 0) {
            diags.push(Diagnostic::new(
                InvalidDims,
                vec![t.name.clone()],
                format!("tensor `{}` has a zero dimension {:?}", t.name, t.dims),
            ));
        }
    }

    let mut node_names = HashSet::new();
    for n in g.nodes() {
        if !node_names.insert(n.name.as_str()) {
            diags.push(Diagnostic::new(
                DuplicateNode,
                vec![n.name.clone()],
                format!("node `{}` declared more than once", n.name),
            ));
        }
    }

    for (list, what) in [
        (g.weights(), "weight"),
        (g.inputs(), "graph input"),
        (g.outputs(), "graph output"),
    ] {
        for name in list {
            match g.tensor(name) {
                None => diags.push(Diagnostic::new(
                    DanglingReference,
                    vec![name.clone()],
                    format!("{what} `{name}` is not a declared tensor"),
                )),
                Some(t) if what != "graph output" && !t.has_dims() => {
                    diags.push(Diagnostic::new(
                        InvalidDims,
                        vec![name.clone()],
                        format!("{what} `{name}` must declare dims"),
                    ))
                }
                _ => {}
            }
        }
    }

    for n in g.nodes() {
        for t in n.inputs.iter().chain(&n.outputs) {
            if g.tensor(t).is_none() {
                diags.push(Diagnostic::new(
                    DanglingReference,
                    vec![t.clone(), n.name.clone()],
                    format!("node `{}` references undeclared tensor `{t}`", n.name),
                ));
            }
        }
        let (lo, hi) = arity(n.op);
        if n.inputs.len() < lo || n.inputs.len() > hi {
            diags.push(Diagnostic::new(
                Arity,
                vec![n.name.clone()],
                format!(
                    "node `{}` ({}) has {} inputs",
                    n.name,
                    n.op,
                    n.inputs.len()
                ),
            ));
        }
        let outs_ok = match n.op {
            OpType::Split => !n.outputs.is_empty(),
            _ => n.outputs.len() == 1,
        };
        if !outs_ok {
            diags.push(Diagnostic::new(
                Arity,
                vec![n.name.clone()],
                format!(
                    "node `{}` ({}) has {} outputs",
                    n.name,
                    n.op,
                    n.outputs.len()
                ),
            ));
        }
        if n.op == OpType::Conv && n.attrs.get("kernel").is_none() {
            diags.push(Diagnostic::new(
                MissingAttr,
                vec![n.name.clone()],
                format!("Conv node `{}` is missing the `kernel` attribute", n.name),
            ));
        }
        if n.op == OpType::Clip && (n.attr_float("min").is_none() || n.attr_float("max").is_none())
        {
            diags.push(Diagnostic::new(
                MissingAttr,
                vec![n.name.clone()],
                format!("Clip node `{}` needs `min` and `max`", n.name),
            ));
        }
    }

    let mut producers: HashMap<&str, Vec<&str>> = HashMap::new();
    for n in g.nodes() {
        for out in &n.outputs {
            producers.entry(out).or_default().push(&n.name);
        }
    }
    for t in g.tensors() {
        let prods = producers.get(t.name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let is_weight = g.is_weight(&t.name);
        let is_input = g.inputs().contains(&t.name);
        if prods.len() > 1 {
            let mut subjects = vec![t.name.clone()];
            subjects.extend(prods.iter().map(|s| s.to_string()));
            diags.push(Diagnostic::new(
                MultipleProducers,
                subjects,
                format!("tensor `{}` is produced by {} nodes: {}", t.name, prods.len(), prods.join(", ")),
            ));
        }
        if is_weight && !prods.is_empty() {
            diags.push(Diagnostic::new(
                ProducedWeight,
                vec![t.name.clone()],
                format!("weight `{}` is produced by node `{}`", t.name, prods[0]),
            ));
        } else if is_input && !prods.is_empty() {
            diags.push(Diagnostic::new(
                ProducedInput,
                vec![t.name.clone()],
                format!("graph input `{}` is produced by node `{}`", t.name, prods[0]),
            ));
        } else if !is_weight && !is_input && prods.is_empty() {
            diags.push(Diagnostic::new(
                Unproduced,
                vec![t.name.clone()],
                format!("tensor `{}` is neither an input, a weight, nor produced by any node", t.name),
            ));
        }
    }

    for cycle in find_cycles(g) {
        let names: Vec<String> = cycle.iter().map(|&i| g.nodes()[i].name.clone()).collect();
        diags.push(Diagnostic::new(
            Cycle,
            names.clone(),
            format!("cycle among nodes: {}", names.join(" -> ")),
        ));
    }

    for (name, data) in g.weight_data_map() {
        match g.tensor(name) {
            Some(spec) if g.is_weight(name) => {
                if spec.dims != data.dims() || spec.dtype != data.dtype() {
                    diags.push(Diagnostic::new(
                        WeightData,
                        vec![name.clone()],
                        format!(
                            "weight data for `{name}` is {} {:?}, declared {} {:?}",
                            data.dtype(),
                            data.dims(),
                            spec.dtype,
                            spec.dims
                        ),
                    ));
                }
            }
            _ => diags.push(Diagnostic::new(
                WeightData,
                vec![name.clone()],
                format!("weight data supplied for `{name}`, which is not a declared weight"),
            )),
        }
    }

    diags
}

/// Strongly connected components that form cycles (size > 1 or self-loop),
/// each sorted by node index; components ordered by their smallest member.
fn find_cycles(g: &Graph) -> Vec<Vec<usize>> {
    let succ = g.successors();
    let n = succ.len();
    // Iterative Tarjan.
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next = 0usize;
    let mut sccs = Vec::new();

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut child)) = call.last_mut() {
            if *child < succ[v].len() {
                let w = succ[v][*child];
                *child += 1;
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    let self_loop = comp.len() == 1 && succ[v].contains(&v);
                    if comp.len() > 1 || self_loop {
                        sccs.push(comp);
                    }
                }
            }
        }
    }
    sccs.sort();
    sccs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, Node, TensorSpec};

    fn single_fc() -> Graph {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![4, 8], DType::F32))
            .add_weight(TensorSpec::new("w", vec![3, 8], DType::F32), None)
            .add_tensor(TensorSpec::new("y", vec![], DType::F32))
            .add_node(Node::new("fc", OpType::FC, ["x", "w"], ["y"]))
            .mark_output("y");
        g
    }

    #[test]
    fn valid_graph_has_no_diagnostics() {
        assert_eq!(validate_graph(&single_fc()), vec![]);
    }

    #[test]
    fn two_producers_cite_the_tensor() {
        let mut g = single_fc();
        g.add_tensor(TensorSpec::new("t", vec![], DType::F32))
            .add_node(Node::new("r1", OpType::Relu, ["y"], ["t"]))
            .add_node(Node::new("r2", OpType::Relu, ["y"], ["t"]));
        let diags = validate_graph(&g);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].kind, DiagnosticKind::MultipleProducers);
        assert_eq!(diags[0].subjects[0], "t");
    }

    #[test]
    fn cycle_lists_its_members() {
        let mut g = Graph::new();
        g.add_tensor(TensorSpec::new("ta", vec![2], DType::F32))
            .add_tensor(TensorSpec::new("tb", vec![2], DType::F32))
            .add_node(Node::new("a", OpType::Relu, ["tb"], ["ta"]))
            .add_node(Node::new("b", OpType::Relu, ["ta"], ["tb"]));
        let diags = validate_graph(&g);
        let cycles: Vec<_> = diags
            .iter()
            .filter(|d| d.kind == DiagnosticKind::Cycle)
            .collect();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].subjects, vec!["a".to_string(), "b".to_string()]);
        assert!(g.topo_order().is_err());
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut g = Graph::new();
        g.add_tensor(TensorSpec::new("t", vec![2], DType::F32))
            .add_node(Node::new("s", OpType::Relu, ["t"], ["t"]));
        assert!(validate_graph(&g)
            .iter()
            .any(|d| d.kind == DiagnosticKind::Cycle && d.subjects == ["s"]));
    }

    #[test]
    fn weight_produced_by_node_is_reported() {
        let mut g = single_fc();
        g.add_node(Node::new("bad", OpType::Relu, ["x"], ["w"]));
        assert!(validate_graph(&g)
            .iter()
            .any(|d| d.kind == DiagnosticKind::ProducedWeight));
    }

    #[test]
    fn unproduced_intermediate_is_reported() {
        let mut g = single_fc();
        g.add_tensor(TensorSpec::new("orphan", vec![1], DType::F32));
        let d = validate_graph(&g);
        assert!(d
            .iter()
            .any(|d| d.kind == DiagnosticKind::Unproduced && d.subjects == ["orphan"]));
    }

    #[test]
    fn conv_without_kernel_is_incomplete() {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![1, 1, 4, 4], DType::F32))
            .add_weight(TensorSpec::new("w", vec![1, 1, 3, 3], DType::F32), None)
            .add_tensor(TensorSpec::new("y", vec![], DType::F32))
            .add_node(Node::new("c", OpType::Conv, ["x", "w"], ["y"]));
        assert!(validate_graph(&g)
            .iter()
            .any(|d| d.kind == DiagnosticKind::MissingAttr));
    }
}
