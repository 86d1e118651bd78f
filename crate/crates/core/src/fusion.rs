//! Frequent subgraph mining over operator graphs and roofline-projected
//! fusion savings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;

use crate::cost::{op_cost, ElemBytes, Role};
use crate::error::{Error, Result};
use crate::ir::{Graph, OpType};
use crate::roofline::AcceleratorConfig;

/// Data-parallel ops considered fusable.
pub const DEFAULT_ALLOWLIST: [OpType; 12] = [
    OpType::FC,
    OpType::Conv,
    OpType::Relu,
    OpType::Add,
    OpType::Mul,
    OpType::Clip,
    OpType::Sum,
    OpType::SpatialBN,
    OpType::BatchMatMul,
    OpType::Concat,
    OpType::Flatten,
    OpType::BatchGather,
];

/// A graph of the corpus and how often it executes.
#[derive(Debug, Clone)]
pub struct CorpusGraph {
    pub name: String,
    pub graph: Graph,
    pub frequency: u64,
}

/// Node-to-node data edge: `(producer, output slot, consumer, input slot)`.
type Edge = (usize, usize, usize, usize);

fn node_edges(g: &Graph) -> Vec<Edge> {
    let mut producer: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, n) in g.nodes().iter().enumerate() {
        for (o, t) in n.outputs.iter().enumerate() {
            producer.insert(t.as_str(), (i, o));
        }
    }
    let mut edges = Vec::new();
    for (j, n) in g.nodes().iter().enumerate() {
        for (s, t) in n.inputs.iter().enumerate() {
            if let Some(&(i, o)) = producer.get(t.as_str()) {
                edges.push((i, o, j, s));
            }
        }
    }
    edges
}

fn undirected_adjacency(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![BTreeSet::new(); n];
    for &(i, _, j, _) in edges {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

fn is_connected(nodes: &[usize], adj: &[Vec<usize>]) -> bool {
    let Some(&first) = nodes.first() else {
        return false;
    };
    let set: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut seen = BTreeSet::from([first]);
    let mut stack = vec![first];
    while let Some(v) = stack.pop() {
        for &u in &adj[v] {
            if set.contains(&u) && seen.insert(u) {
                stack.push(u);
            }
        }
    }
    seen.len() == set.len()
}

struct Fragment {
    labels: Vec<OpType>,
    /// Edges in local indices.
    edges: Vec<Edge>,
}

impl Fragment {
    fn new(g: &Graph, nodes: &[usize], edges: &[Edge]) -> Fragment {
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(p, &n)| (n, p)).collect();
        Fragment {
            labels: nodes.iter().map(|&n| g.nodes()[n].op).collect(),
            edges: edges
                .iter()
                .filter_map(|&(i, o, j, s)| Some((*pos.get(&i)?, o, *pos.get(&j)?, s)))
                .collect(),
        }
    }

    fn encode(&self, order: &[usize]) -> String {
        let mut rank = vec![0; order.len()];
        for (r, &v) in order.iter().enumerate() {
            rank[v] = r;
        }
        let labels: Vec<&str> = order.iter().map(|&v| self.labels[v].name()).collect();
        let mut edges: Vec<String> = self
            .edges
            .iter()
            .map(|&(i, o, j, s)| {
                let slot = if self.labels[j].is_commutative() {
                    "*".to_string()
                } else {
                    s.to_string()
                };
                format!("{}.{}>{}.{}", rank[i], o, rank[j], slot)
            })
            .collect();
        edges.sort();
        format!("{}|{}", labels.join(","), edges.join(","))
    }

    fn canonical(&self) -> String {
        let n = self.labels.len();
        let mut indeg = vec![0usize; n];
        for &(_, _, j, _) in &self.edges {
            indeg[j] += 1;
        }
        let mut best: Option<String> = None;
        let mut order = Vec::with_capacity(n);
        let mut used = vec![false; n];
        self.visit(&mut order, &mut used, &mut indeg, &mut best);
        best.unwrap_or_default()
    }

    fn visit(&self, order: &mut Vec<usize>, used: &mut [bool], indeg: &mut [usize], best: &mut Option<String>) {
        if order.len() == self.labels.len() {
            let s = self.encode(order);
            if best.as_ref().is_none_or(|b| s < *b) {
                *best = Some(s);
            }
            return;
        }
        for v in 0..self.labels.len() {
            if used[v] || indeg[v] > 0 {
                continue;
            }
            used[v] = true;
            order.push(v);
            for e in self.edges.iter().filter(|e| e.0 == v) {
                indeg[e.2] -= 1;
            }
            self.visit(order, used, indeg, best);
            for e in self.edges.iter().filter(|e| e.0 == v) {
                indeg[e.2] += 1;
            }
            order.pop();
            used[v] = false;
        }
    }
}

/// Canonical string of the fragment induced by `nodes`: the minimum of its
/// encodings over all topological labelings.
pub fn canonical_form(g: &Graph, nodes: &[usize]) -> Result<String> {
    let edges = node_edges(g);
    let adj = undirected_adjacency(g.nodes().len(), &edges);
    if nodes.iter().any(|&n| n >= g.nodes().len()) {
        return Err(Error::InvalidArgument("occurrence names a node outside the graph".into()));
    }
    if !is_connected(nodes, &adj) {
        return Err(Error::InvalidArgument("occurrence is not connected".into()));
    }
    Ok(Fragment::new(g, nodes, &edges).canonical())
}

/// One match of a pattern: sorted node indices within `graph`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Occurrence {
    pub graph: usize,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphPattern {
    pub canonical: String,
    pub size: usize,
    /// Op types in canonical order.
    pub ops: Vec<OpType>,
    /// Sum over graphs of execution frequency times non-overlapping matches.
    pub count: u64,
    /// Counted matches in corpus order.
    pub occurrences: Vec<Occurrence>,
}

/// All connected node subsets of size `2..=max_size`, each exactly once.
pub fn connected_subsets(adj: &[Vec<usize>], max_size: usize) -> Vec<Vec<usize>> {
    fn extend(
        adj: &[Vec<usize>],
        root: usize,
        sub: &mut Vec<usize>,
        ext: Vec<usize>,
        max: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        if sub.len() >= 2 {
            let mut s = sub.clone();
            s.sort_unstable();
            out.push(s);
        }
        if sub.len() == max {
            return;
        }
        let mut ext = ext;
        while let Some(w) = ext.pop() {
            let mut next = ext.clone();
            for &u in &adj[w] {
                if u > root
                    && !sub.contains(&u)
                    && !next.contains(&u)
                    && !sub.iter().any(|&s| adj[s].contains(&u))
                {
                    next.push(u);
                }
            }
            sub.push(w);
            extend(adj, root, sub, next, max, out);
            sub.pop();
        }
    }
    let mut out = Vec::new();
    for v in 0..adj.len() {
        let ext: Vec<usize> = adj[v].iter().copied().filter(|&u| u > v).collect();
        extend(adj, v, &mut vec![v], ext, max_size, &mut out);
    }
    out
}

/// Keeps matches in ascending node order, skipping any that shares a node
/// with one already kept.
fn greedy_disjoint(mut matches: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    matches.sort();
    let mut taken = BTreeSet::new();
    let mut kept = Vec::new();
    for m in matches {
        if m.iter().all(|n| !taken.contains(n)) {
            taken.extend(m.iter().copied());
            kept.push(m);
        }
    }
    kept
}

struct GraphMatches {
    by_pattern: BTreeMap<String, (Vec<OpType>, Vec<Vec<usize>>)>,
}

fn mine_graph(g: &Graph, max_size: usize) -> GraphMatches {
    let edges = node_edges(g);
    let adj = undirected_adjacency(g.nodes().len(), &edges);
    let mut by_pattern: BTreeMap<String, (Vec<OpType>, Vec<Vec<usize>>)> = BTreeMap::new();
    for sub in connected_subsets(&adj, max_size) {
        let frag = Fragment::new(g, &sub, &edges);
        let canon = frag.canonical();
        let entry = by_pattern.entry(canon).or_insert_with_key(|c| {
            let names = c.split('|').next().unwrap_or_default();
            let ops = names.split(',').filter_map(OpType::from_name).collect();
            (ops, Vec::new())
        });
        entry.1.push(sub);
    }
    for (_, m) in by_pattern.values_mut() {
        *m = greedy_disjoint(std::mem::take(m));
    }
    GraphMatches { by_pattern }
}

/// Frequent connected patterns of 2 to `max_size` nodes with weighted count
/// at least `min_support`, ordered by count (descending) then canonical form.
pub fn mine_frequent_subgraphs(corpus: &[CorpusGraph], min_support: u64, max_size: usize) -> Result<Vec<SubgraphPattern>> {
    if max_size < 2 {
        return Err(Error::InvalidArgument(format!("max_size must be at least 2, got {max_size}")));
    }
    let per_graph: Vec<GraphMatches> = corpus.par_iter().map(|c| mine_graph(&c.graph, max_size)).collect();
    let mut merged: BTreeMap<String, SubgraphPattern> = BTreeMap::new();
    for (gi, (matches, c)) in per_graph.into_iter().zip(corpus).enumerate() {
        for (canon, (ops, occ)) in matches.by_pattern {
            let p = merged.entry(canon.clone()).or_insert_with(|| SubgraphPattern {
                canonical: canon,
                size: ops.len(),
                ops,
                count: 0,
                occurrences: Vec::new(),
            });
            p.count += c.frequency * occ.len() as u64;
            p.occurrences.extend(occ.into_iter().map(|nodes| Occurrence { graph: gi, nodes }));
        }
    }
    let mut out: Vec<SubgraphPattern> = merged.into_values().filter(|p| p.count >= min_support && p.count > 0).collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.canonical.cmp(&b.canonical)));
    Ok(out)
}

/// True when every op of the pattern is on `allowlist`.
pub fn filter_eligible(pattern: &SubgraphPattern, allowlist: &[OpType]) -> bool {
    pattern.ops.iter().all(|op| allowlist.contains(op))
}

/// Roofline time of an occurrence run op by op versus as one fused op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionProjection {
    pub before_s: f64,
    pub after_s: f64,
    /// DRAM traffic removed by fusing.
    pub eliminated_bytes: u64,
}

impl FusionProjection {
    pub fn speedup(&self) -> f64 {
        if self.after_s > 0.0 {
            self.before_s / self.after_s
        } else {
            1.0
        }
    }

    pub fn saving_s(&self) -> f64 {
        self.before_s - self.after_s
    }
}

/// Projects fusing the connected node set `nodes` of `g`. Every tensor is
/// taken to live in DRAM.
pub fn project_fusion_speedup(g: &Graph, nodes: &[usize], cfg: &AcceleratorConfig, eb: &ElemBytes) -> Result<FusionProjection> {
    cfg.validate()?;
    let edges = node_edges(g);
    let adj = undirected_adjacency(g.nodes().len(), &edges);
    if nodes.iter().any(|&n| n >= g.nodes().len()) {
        return Err(Error::InvalidArgument("occurrence names a node outside the graph".into()));
    }
    if !is_connected(nodes, &adj) {
        return Err(Error::InvalidArgument("occurrence is not connected".into()));
    }
    let members: BTreeSet<usize> = nodes.iter().copied().collect();
    let producers = g.producers();
    let consumers = g.consumers();
    let graph_outputs: BTreeSet<&str> = g.outputs().iter().map(String::as_str).collect();

    let mut before = 0.0;
    let mut flops = 0.0;
    let mut boundary: BTreeMap<String, u64> = BTreeMap::new();
    let mut unfused_bytes = 0u64;
    for &n in &members {
        let node = &g.nodes()[n];
        let c = op_cost(node, g, eb)?;
        before += (c.flops as f64 / cfg.peak_flops).max(c.total_bytes() as f64 / cfg.dram_bw);
        flops += c.flops as f64;
        unfused_bytes += c.total_bytes();
        for t in &c.traffic {
            let inside = match t.role {
                Role::Weight => false,
                Role::ActIn => producers.get(t.tensor.as_str()).is_some_and(|p| members.contains(p)),
                Role::ActOut => {
                    let used_outside = consumers
                        .get(t.tensor.as_str())
                        .is_none_or(|cs| cs.iter().any(|c| !members.contains(c)));
                    !(used_outside || graph_outputs.contains(t.tensor.as_str()))
                }
            };
            if !inside {
                let e = boundary.entry(t.tensor.clone()).or_insert(0);
                *e = (*e).max(t.bytes);
            }
        }
    }
    let boundary_bytes: u64 = boundary.values().sum();
    let after = (flops / cfg.peak_flops).max(boundary_bytes as f64 / cfg.dram_bw);
    Ok(FusionProjection {
        before_s: before,
        after_s: after.min(before),
        eliminated_bytes: unfused_bytes - boundary_bytes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionCandidate {
    pub pattern: String,
    pub size: usize,
    pub frequency: u64,
    pub eligible: bool,
    /// Graph name and node names of the first counted occurrence.
    pub representative: (String, Vec<String>),
    /// Frequency-weighted unfused time of all counted occurrences.
    pub before_s: f64,
    pub after_s: f64,
}

impl FusionCandidate {
    pub fn per_occurrence_speedup(&self) -> f64 {
        if self.after_s > 0.0 {
            self.before_s / self.after_s
        } else {
            1.0
        }
    }

    pub fn total_saving_s(&self) -> f64 {
        self.before_s - self.after_s
    }
}

/// Projects every counted occurrence of each pattern and aggregates the
/// times with the graph execution frequencies.
pub fn evaluate_candidates(
    corpus: &[CorpusGraph],
    patterns: &[SubgraphPattern],
    cfg: &AcceleratorConfig,
    eb: &ElemBytes,
    allowlist: &[OpType],
) -> Result<Vec<FusionCandidate>> {
    patterns
        .iter()
        .map(|p| {
            let (mut before, mut after) = (0.0, 0.0);
            for o in &p.occurrences {
                let c = &corpus[o.graph];
                let proj = project_fusion_speedup(&c.graph, &o.nodes, cfg, eb)?;
                before += c.frequency as f64 * proj.before_s;
                after += c.frequency as f64 * proj.after_s;
            }
            let representative = p
                .occurrences
                .first()
                .map(|o| {
                    let c = &corpus[o.graph];
                    (c.name.clone(), o.nodes.iter().map(|&n| c.graph.nodes()[n].name.clone()).collect())
                })
                .unwrap_or_default();
            Ok(FusionCandidate {
                pattern: p.canonical.clone(),
                size: p.size,
                frequency: p.count,
                eligible: filter_eligible(p, allowlist),
                representative,
                before_s: before,
                after_s: after,
            })
        })
        .collect()
}

/// Eligible candidates by total saving (descending), then pattern string.
pub fn top_k(candidates: &[FusionCandidate], k: usize) -> Result<Vec<FusionCandidate>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut out: Vec<FusionCandidate> = candidates.iter().filter(|c| c.eligible).cloned().collect();
    out.sort_by(|a, b| {
        b.total_saving_s()
            .total_cmp(&a.total_saving_s())
            .then_with(|| a.pattern.cmp(&b.pattern))
    });
    out.truncate(k);
    Ok(out)
}

pub fn write_candidates_csv<W: Write>(cands: &[FusionCandidate], mut out: W) -> Result<()> {
    let mut text = String::from("pattern,frequency,eligible,per_occurrence_speedup,total_saving_s\n");
    for c in cands {
        text.push_str(&format!(
            "\"{}\",{},{},{:.6},{:.9e}\n",
            c.pattern,
            c.frequency,
            c.eligible,
            c.per_occurrence_speedup(),
            c.total_saving_s()
        ));
    }
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, Node, TensorSpec};

    fn chain(ops: &[OpType]) -> Graph {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("t0", vec![4, 8], DType::F32));
        for (i, op) in ops.iter().enumerate() {
            g.add_tensor(TensorSpec::new(format!("t{}", i + 1), vec![4, 8], DType::F32));
            g.add_node(Node::new(format!("n{i}"), *op, [format!("t{i}")], [format!("t{}", i + 1)]));
        }
        g.mark_output(format!("t{}", ops.len()));
        g
    }

    #[test]
    fn subsets_of_a_path() {
        let adj = vec![vec![1], vec![0, 2], vec![1]];
        let mut s = connected_subsets(&adj, 3);
        s.sort();
        assert_eq!(s, vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
    }

    #[test]
    fn canonical_of_chain() {
        let g = chain(&[OpType::Relu, OpType::Clip]);
        assert_eq!(canonical_form(&g, &[0, 1]).unwrap(), "Relu,Clip|0.0>1.0");
        assert!(canonical_form(&chain(&[OpType::Relu, OpType::Relu, OpType::Relu]), &[0, 2]).is_err());
    }

    #[test]
    fn single_nodes_give_nothing() {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![2], DType::F32));
        g.add_tensor(TensorSpec::new("y", vec![2], DType::F32));
        g.add_node(Node::new("r", OpType::Relu, ["x"], ["y"]));
        let c = [CorpusGraph { name: "a".into(), graph: g, frequency: 1 }];
        assert!(mine_frequent_subgraphs(&c, 1, 3).unwrap().is_empty());
        assert!(mine_frequent_subgraphs(&c, 1, 1).is_err());
    }

    #[test]
    fn greedy_counting_avoids_overlap() {
        let g = chain(&[OpType::Relu; 4]);
        let c = [CorpusGraph { name: "a".into(), graph: g, frequency: 3 }];
        let p = mine_frequent_subgraphs(&c, 1, 2).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].count, 6);
    }

    #[test]
    fn elementwise_pair_halves_traffic() {
        let g = chain(&[OpType::Relu, OpType::Relu]);
        let cfg = AcceleratorConfig::new(1e15, 1e9, 0.0, 1e9).unwrap();
        let p = project_fusion_speedup(&g, &[0, 1], &cfg, &ElemBytes::declared()).unwrap();
        assert!((p.speedup() - 2.0).abs() < 1e-12);
        assert_eq!(p.eliminated_bytes, 256);
    }

    #[test]
    fn escaping_intermediate_is_still_written() {
        let mut g = chain(&[OpType::Relu, OpType::Relu]);
        g.mark_output("t1");
        let cfg = AcceleratorConfig::new(1e15, 1e9, 0.0, 1e9).unwrap();
        let p = project_fusion_speedup(&g, &[0, 1], &cfg, &ElemBytes::declared()).unwrap();
        assert_eq!(p.eliminated_bytes, 128);
        assert!((p.speedup() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eligibility() {
        let pat = |ops: Vec<OpType>| SubgraphPattern {
            canonical: String::new(),
            size: ops.len(),
            ops,
            count: 1,
            occurrences: vec![],
        };
        assert!(filter_eligible(&pat(vec![OpType::Conv, OpType::SpatialBN, OpType::Relu]), &DEFAULT_ALLOWLIST));
        assert!(!filter_eligible(&pat(vec![OpType::FC, OpType::Softmax]), &DEFAULT_ALLOWLIST));
        assert!(filter_eligible(
            &pat(vec![OpType::Concat, OpType::BatchMatMul, OpType::Flatten]),
            &DEFAULT_ALLOWLIST
        ));
    }

    #[test]
    fn ranking_prefers_frequency_on_equal_saving() {
        let c = |p: &str, f: u64| FusionCandidate {
            pattern: p.into(),
            size: 2,
            frequency: f,
            eligible: true,
            representative: Default::default(),
            before_s: 2.0 * f as f64,
            after_s: f as f64,
        };
        let r = top_k(&[c("a", 2), c("b", 5)], 10).unwrap();
        assert_eq!(r[0].pattern, "b");
        assert_eq!(r.len(), 2);
        assert!(top_k(&[], 0).is_err());
    }
}
