//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use inferlab_core::ir::{DType, Graph, Node, OpType, TensorSpec};
use inferlab_core::quant::QParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

/// `Σ_k (a - zp_a)(w - zp_w)` in i64 for `a: [m,k]` and `w: [n,k]`.
pub fn naive_qgemm(a: &[u8], m: usize, zp_a: i32, w: &[i8], n: usize, k: usize, zp_w: &[i32]) -> Vec<i64> {
    let mut c = vec![0i64; m * n];
    for i in 0..m {
        for j in 0..n {
            let zw = if zp_w.len() == 1 { zp_w[0] } else { zp_w[j] } as i64;
            let mut s = 0i64;
            for kk in 0..k {
                s += (a[i * k + kk] as i64 - zp_a as i64) * (w[j * k + kk] as i64 - zw);
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `Σ_k a·w` for f64 operands.
pub fn naive_gemm_f64(a: &[f32], m: usize, w: &[f32], n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|kk| a[i * k + kk] as f64 * w[j * k + kk] as f64).sum();
        }
    }
    c
}

/// Every finite non-negative binary16 value with its bit pattern, plus
/// 65536 standing in for +inf, sorted by value.
fn half_table() -> &'static [(f64, u16)] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<(f64, u16)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t: Vec<(f64, u16)> = (0u16..0x7C00)
            .map(|bits| {
                let e = (bits >> 10) as i32;
                let m = (bits & 0x3FF) as f64;
                let v = if e == 0 {
                    m * 2f64.powi(-24)
                } else {
                    (1.0 + m / 1024.0) * 2f64.powi(e - 15)
                };
                (v, bits)
            })
            .collect();
        t.push((65536.0, 0x7C00));
        t
    })
}

/// binary16 by nearest-value search over the whole format; ties pick the
/// pattern with an even last bit.
pub fn fp16_oracle(x: f32) -> u16 {
    if x.is_nan() {
        return 0x7E00;
    }
    let sign = if x.is_sign_negative() { 0x8000u16 } else { 0 };
    let v = (x as f64).abs();
    let t = half_table();
    if v >= 65536.0 {
        return sign | 0x7C00;
    }
    let i = t.partition_point(|&(h, _)| h < v);
    let mag = if i < t.len() && t[i].0 == v {
        t[i].1
    } else {
        let (lo, hi) = (t[i - 1], t[i]);
        let (dl, dh) = (v - lo.0, hi.0 - v);
        if dl < dh {
            lo.1
        } else if dh < dl {
            hi.1
        } else if lo.1 % 2 == 0 {
            lo.1
        } else {
            hi.1
        }
    };
    sign | mag
}

/// Direct 2-D convolution in f64 (NCHW input, `[C_o, C_i/G, kh, kw]` weights).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f32],
    dims: [usize; 4],
    w: &[f32],
    cout: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    pad: [usize; 2],
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = dims;
    let oh = (h + 2 * pad[0] - kernel[0]) / stride[0] + 1;
    let ow = (wd + 2 * pad[1] - kernel[1]) / stride[1] + 1;
    let cpg = cin / groups;
    let opg = cout / groups;
    let mut out = vec![0f64; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            let g = co / opg;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0f64;
                    for ci in 0..cpg {
                        for ky in 0..kernel[0] {
                            for kx in 0..kernel[1] {
                                let iy = (y * stride[0] + ky) as isize - pad[0] as isize;
                                let ix = (xo * stride[1] + kx) as isize - pad[1] as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let c = g * cpg + ci;
                                let xv = x[((n * cin + c) * h + iy as usize) * wd + ix as usize] as f64;
                                let wv = w[((co * cpg + ci) * kernel[0] + ky) * kernel[1] + kx] as f64;
                                s += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

/// Data edges `(producer, out slot, consumer, in slot)` among all nodes.
fn edges(g: &Graph) -> Vec<(usize, usize, usize, usize)> {
    let mut prod = HashMap::new();
    for (i, n) in g.nodes().iter().enumerate() {
        for (o, t) in n.outputs.iter().enumerate() {
            prod.insert(t.clone(), (i, o));
        }
    }
    let mut e = Vec::new();
    for (j, n) in g.nodes().iter().enumerate() {
        for (s, t) in n.inputs.iter().enumerate() {
            if let Some(&(i, o)) = prod.get(t) {
                e.push((i, o, j, s));
            }
        }
    }
    e
}

/// A fragment as labels plus a multiset of local edges.
#[derive(Clone, Debug)]
pub struct Frag {
    pub labels: Vec<OpType>,
    pub edges: Vec<(usize, usize, usize, Option<usize>)>,
}

pub fn fragment(g: &Graph, nodes: &[usize]) -> Frag {
    let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(p, &n)| (n, p)).collect();
    let labels: Vec<OpType> = nodes.iter().map(|&n| g.nodes()[n].op).collect();
    let edges = edges(g)
        .into_iter()
        .filter_map(|(i, o, j, s)| {
            let (pi, pj) = (*pos.get(&i)?, *pos.get(&j)?);
            let slot = if labels[pj].is_commutative() { None } else { Some(s) };
            Some((pi, o, pj, slot))
        })
        .collect();
    Frag { labels, edges }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Label- and edge-preserving bijection search.
pub fn isomorphic(a: &Frag, b: &Frag) -> bool {
    if a.labels.len() != b.labels.len() || a.edges.len() != b.edges.len() {
        return false;
    }
    let mut be = b.edges.clone();
    be.sort();
    permutations(a.labels.len()).into_iter().any(|p| {
        if (0..p.len()).any(|i| a.labels[i] != b.labels[p[i]]) {
            return false;
        }
        let mut ae: Vec<_> = a.edges.iter().map(|&(i, o, j, s)| (p[i], o, p[j], s)).collect();
        ae.sort();
        ae == be
    })
}

fn connected(nodes: &[usize], e: &[(usize, usize, usize, usize)]) -> bool {
    let set: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut seen = BTreeSet::from([nodes[0]]);
    let mut frontier = vec![nodes[0]];
    while let Some(v) = frontier.pop() {
        for &(i, _, j, _) in e {
            for (a, b) in [(i, j), (j, i)] {
                if a == v && set.contains(&b) && seen.insert(b) {
                    frontier.push(b);
                }
            }
        }
    }
    seen.len() == set.len()
}

fn combinations(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        combinations(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// One isomorphism class found by brute force: a representative and the
/// weighted count of non-overlapping matches (ascending node order, greedy).
pub struct BruteClass {
    pub rep: Frag,
    pub count: u64,
}

pub fn brute_force_mine(corpus: &[(Graph, u64)], min_support: u64, max_size: usize) -> Vec<BruteClass> {
    let mut classes: Vec<(Frag, Vec<Vec<Vec<usize>>>)> = Vec::new();
    for (gi, (g, _)) in corpus.iter().enumerate() {
        let e = edges(g);
        for size in 2..=max_size {
            let mut subsets = Vec::new();
            combinations(g.nodes().len(), size, 0, &mut Vec::new(), &mut subsets);
            for s in subsets {
                if !connected(&s, &e) {
                    continue;
                }
                let f = fragment(g, &s);
                let idx = match classes.iter().position(|(rep, _)| isomorphic(rep, &f)) {
                    Some(i) => i,
                    None => {
                        classes.push((f, vec![Vec::new(); corpus.len()]));
                        classes.len() - 1
                    }
                };
                classes[idx].1[gi].push(s);
            }
        }
    }
    classes
        .into_iter()
        .map(|(rep, per_graph)| {
            let count = per_graph
                .into_iter()
                .zip(corpus)
                .map(|(mut ms, (_, freq))| {
                    ms.sort();
                    let mut used = BTreeSet::new();
                    let mut kept = 0u64;
                    for m in ms {
                        if m.iter().all(|x| !used.contains(x)) {
                            used.extend(m);
                            kept += 1;
                        }
                    }
                    kept * freq
                })
                .sum();
            BruteClass { rep, count }
        })
        .filter(|c| c.count >= min_support && c.count > 0)
        .collect()
}

/// Squared error of `q` on a histogram whose bins hold uniformly spread
/// mass, integrated bin by bin.
pub fn oracle_l2(min: f64, max: f64, counts: &[u64], q: &QParams) -> f64 {
    let (lo, hi) = q.range();
    let w = (max - min) / counts.len() as f64;
    // Mean of (x - c)^2 for x uniform on [u, v].
    let sq = |u: f64, v: f64, c: f64| ((v - c).powi(3) - (u - c).powi(3)) / (3.0 * (v - u));
    let mut err = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let (a, b) = (min + i as f64 * w, min + (i + 1) as f64 * w);
        let frac = |u: f64, v: f64| ((v.min(b) - u.max(a)) / (b - a)).max(0.0);
        let c = c as f64;
        let below = frac(f64::NEG_INFINITY, lo);
        if below > 0.0 {
            err += c * below * sq(a, lo.min(b), lo);
        }
        let above = frac(hi, f64::INFINITY);
        if above > 0.0 {
            err += c * above * sq(hi.max(a), b, hi);
        }
        let inside = frac(lo, hi);
        err += c * inside * (q.scale as f64).powi(2) / 12.0;
    }
    err
}

/// Student-t samples (1 to 4 degrees of freedom, random shift) binned
/// uniformly between their extremes.
pub fn heavy_tailed_histogram(seed: u64, bins: usize) -> (f64, f64, Vec<u64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dof = r.gen_range(1.0..4.0);
    let shift = r.gen_range(-1.0..1.0);
    let t = StudentT::new(dof).unwrap();
    let xs: Vec<f64> = (0..5000).map(|_| t.sample(&mut r) + shift).collect();
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0u64; bins];
    for x in xs {
        let i = (((x - min) / (max - min)) * bins as f64) as usize;
        counts[i.min(bins - 1)] += 1;
    }
    (min, max, counts)
}

/// Random DAG of Relu, Clip, Add and Mul nodes over `t0..=t{nodes}`; every
/// tensor nobody reads is a graph output.
pub fn random_dag(seed: u64, nodes: usize) -> Graph {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("t0", vec![4], DType::F32));
    let mut consumed = vec![false];
    for i in 0..nodes {
        let y = format!("t{}", i + 1);
        g.add_tensor(TensorSpec::new(&y, vec![4], DType::F32));
        let pick = |r: &mut ChaCha8Rng| format!("t{}", r.gen_range(0..=i));
        let node = match r.gen_range(0..5) {
            0 | 1 => Node::new(format!("n{i}"), OpType::Relu, [pick(&mut r)], [y.clone()]),
            2 => {
                let lo = r.gen_range(-3.0..1.0);
                Node::new(format!("n{i}"), OpType::Clip, [pick(&mut r)], [y.clone()])
                    .with_attr("min", lo)
                    .with_attr("max", lo + r.gen_range(0.5..4.0))
            }
            3 => Node::new(format!("n{i}"), OpType::Add, [pick(&mut r), pick(&mut r)], [y.clone()]),
            _ => Node::new(format!("n{i}"), OpType::Mul, [pick(&mut r), pick(&mut r)], [y.clone()]),
        };
        for t in &node.inputs {
            consumed[t[1..].parse::<usize>().unwrap()] = true;
        }
        consumed.push(false);
        g.add_node(node);
    }
    for (i, c) in consumed.iter().enumerate() {
        if !c {
            g.mark_output(format!("t{i}"));
        }
    }
    g
}
