mod common;

use common::{brute_force_mine, fragment, isomorphic};
use inferlab_core::cost::ElemBytes;
use inferlab_core::fixtures;
use inferlab_core::fusion::*;
use inferlab_core::ir::{infer_shapes, DType, Graph, Node, OpType, TensorSpec};
use inferlab_core::roofline::AcceleratorConfig;
use proptest::prelude::*;

fn check_against_brute_force(corpus: &[CorpusGraph], support: u64, max_size: usize) -> Vec<SubgraphPattern> {
    let mined = mine_frequent_subgraphs(corpus, support, max_size).unwrap();
    let plain: Vec<(Graph, u64)> = corpus.iter().map(|c| (c.graph.clone(), c.frequency)).collect();
    let brute = brute_force_mine(&plain, support, max_size);
    assert_eq!(mined.len(), brute.len(), "class counts differ");
    let mut matched = vec![false; brute.len()];
    for p in &mined {
        let first = &p.occurrences[0];
        let f = fragment(&corpus[first.graph].graph, &first.nodes);
        let i = brute
            .iter()
            .position(|b| isomorphic(&b.rep, &f))
            .unwrap_or_else(|| panic!("{} has no brute-force class", p.canonical));
        assert!(!matched[i], "{} matched twice", p.canonical);
        matched[i] = true;
        assert_eq!(p.count, brute[i].count, "{}", p.canonical);
        for o in &p.occurrences {
            assert!(isomorphic(&f, &fragment(&corpus[o.graph].graph, &o.nodes)));
        }
    }
    mined
}

#[test]
fn miner_matches_brute_force_on_planted_corpus() {
    let corpus = fixtures::planted_corpus(5, 12, 0);
    let mined = check_against_brute_force(&corpus, 3, 4);
    let planted = mined
        .iter()
        .find(|p| p.ops == [OpType::Concat, OpType::BatchMatMul, OpType::Flatten])
        .expect("planted pattern mined");
    assert_eq!(planted.count, 5);
}

#[test]
fn planted_pattern_ranks_first() {
    let corpus = fixtures::planted_corpus(5, 12, 0);
    let mined = mine_frequent_subgraphs(&corpus, 3, 4).unwrap();
    let cfg = AcceleratorConfig::new(100e12, 100e9, 0.0, 1e12).unwrap();
    let cands = evaluate_candidates(&corpus, &mined, &cfg, &ElemBytes::declared(), &DEFAULT_ALLOWLIST).unwrap();
    let top = top_k(&cands, 5).unwrap();
    assert_eq!(top[0].pattern, "Concat,BatchMatMul,Flatten|0.0>1.0,0.0>1.1,1.0>2.0");
    assert_eq!(top[0].frequency, 5);
    assert!(top[0].per_occurrence_speedup() > 1.0);
    assert!(top.windows(2).all(|w| w[0].total_saving_s() >= w[1].total_saving_s()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn miner_matches_brute_force_on_random_corpora(planted in 0usize..4, noise in 1usize..10, seed in any::<u64>(), support in 1u64..4, max_size in 2usize..5) {
        let mut corpus = fixtures::planted_corpus(planted, noise, seed);
        for (i, c) in corpus.iter_mut().enumerate() {
            c.frequency = 1 + (seed.wrapping_add(i as u64) % 3);
        }
        check_against_brute_force(&corpus, support, max_size);
    }
}

fn two_input_graph(op: OpType, producer_slot: usize, reversed_decl: bool) -> Graph {
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("x", vec![2, 4, 4], DType::F32));
    g.add_input(TensorSpec::new("y", vec![2, 4, 4], DType::F32));
    g.add_tensor(TensorSpec::new("r", vec![], DType::F32));
    g.add_tensor(TensorSpec::new("z", vec![], DType::F32));
    let ins = if producer_slot == 0 { ["r", "y"] } else { ["y", "r"] };
    let relu = Node::new("relu", OpType::Relu, ["x"], ["r"]);
    let join = Node::new("join", op, ins, ["z"]);
    if reversed_decl {
        g.add_node(join);
        g.add_node(relu);
    } else {
        g.add_node(relu);
        g.add_node(join);
    }
    g.mark_output("z");
    infer_shapes(&g).unwrap()
}

#[test]
fn mirrored_commutative_inputs_share_a_class() {
    let a = two_input_graph(OpType::Add, 0, false);
    let b = two_input_graph(OpType::Add, 1, true);
    let ca = canonical_form(&a, &[0, 1]).unwrap();
    let cb = canonical_form(&b, &[0, 1]).unwrap();
    assert_eq!(ca, cb);
    assert!(isomorphic(&fragment(&a, &[0, 1]), &fragment(&b, &[0, 1])));
    let corpus = vec![
        CorpusGraph { name: "a".into(), graph: a, frequency: 1 },
        CorpusGraph { name: "b".into(), graph: b, frequency: 1 },
    ];
    let mined = mine_frequent_subgraphs(&corpus, 2, 2).unwrap();
    assert_eq!(mined.len(), 1);
    assert_eq!(mined[0].count, 2);
}

#[test]
fn operand_order_matters_for_non_commutative_ops() {
    let a = two_input_graph(OpType::BatchMatMul, 0, false);
    let b = two_input_graph(OpType::BatchMatMul, 1, true);
    assert_ne!(canonical_form(&a, &[0, 1]).unwrap(), canonical_form(&b, &[1, 0]).unwrap());
    assert!(!isomorphic(&fragment(&a, &[0, 1]), &fragment(&b, &[0, 1])));
    let c = two_input_graph(OpType::BatchMatMul, 0, true);
    assert_eq!(canonical_form(&a, &[0, 1]).unwrap(), canonical_form(&c, &[0, 1]).unwrap());
}

#[test]
fn disconnected_sets_have_no_canonical_form() {
    let corpus = fixtures::planted_corpus(1, 0, 0);
    assert!(canonical_form(&corpus[0].graph, &[0, 2]).is_err());
}

#[test]
fn connected_subsets_are_unique_and_complete() {
    let g = fixtures::cv_large_activation();
    let n = g.nodes().len();
    let succ = g.successors();
    let mut adj = vec![Vec::new(); n];
    for (i, s) in succ.iter().enumerate() {
        for &j in s {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort();
        a.dedup();
    }
    let subsets = connected_subsets(&adj, 4);
    let mut sorted: Vec<Vec<usize>> = subsets
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.sort();
            s
        })
        .collect();
    sorted.sort();
    let before = sorted.len();
    sorted.dedup();
    assert_eq!(before, sorted.len());
    let mut count = 0;
    for k in 2..=4usize {
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((start, cur)) = stack.pop() {
            if cur.len() == k {
                if connected_via(&cur, &adj) {
                    count += 1;
                }
                continue;
            }
            for i in start..n {
                let mut c = cur.clone();
                c.push(i);
                stack.push((i + 1, c));
            }
        }
    }
    assert_eq!(sorted.len(), count);
}

fn connected_via(nodes: &[usize], adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![nodes[0]];
    let mut i = 0;
    while i < seen.len() {
        for &u in &adj[seen[i]] {
            if nodes.contains(&u) && !seen.contains(&u) {
                seen.push(u);
            }
        }
        i += 1;
    }
    seen.len() == nodes.len()
}

fn chain(ops: &[OpType], m: usize, k: usize) -> Graph {
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("t0", vec![m, k], DType::F32));
    for (i, op) in ops.iter().enumerate() {
        let (x, y) = (format!("t{i}"), format!("t{}", i + 1));
        g.add_tensor(TensorSpec::new(&y, vec![], DType::F32));
        let node = if *op == OpType::FC {
            let w = format!("w{i}");
            g.add_weight(TensorSpec::new(&w, vec![k, k], DType::F32), None);
            Node::new(format!("n{i}"), *op, [x, w], [y])
        } else {
            Node::new(format!("n{i}"), *op, [x], [y])
        };
        g.add_node(node);
    }
    g.mark_output(format!("t{}", ops.len()));
    infer_shapes(&g).unwrap()
}

#[test]
fn two_elementwise_ops_fuse_to_exactly_twice_as_fast() {
    let g = chain(&[OpType::Relu, OpType::Relu], 64, 1024);
    let cfg = AcceleratorConfig::new(100e12, 100e9, 0.0, 1e12).unwrap();
    let p = project_fusion_speedup(&g, &[0, 1], &cfg, &ElemBytes::declared()).unwrap();
    let elems = 64.0 * 1024.0;
    assert_eq!(p.before_s, 2.0 * (2.0 * 4.0 * elems) / 100e9);
    assert_eq!(p.after_s, 2.0 * 4.0 * elems / 100e9);
    assert_eq!(p.speedup(), 2.0);
    assert_eq!(p.eliminated_bytes, 2 * 4 * 64 * 1024);
}

#[test]
fn compute_bound_fusion_gains_almost_nothing() {
    let g = chain(&[OpType::FC, OpType::Relu], 4096, 4096);
    let cfg = AcceleratorConfig::new(1e12, 100e9, 0.0, 1e12).unwrap();
    let p = project_fusion_speedup(&g, &[0, 1], &cfg, &ElemBytes::declared()).unwrap();
    assert!(p.speedup() >= 1.0 && p.speedup() < 1.01, "{}", p.speedup());
}

#[test]
fn interaction_block_projection_matches_hand_roofline() {
    let (b, f, d) = (256usize, 8usize, 64usize);
    let g = fixtures::recommendation_interaction(b, f, d);
    let concat = g.nodes().iter().position(|n| n.op == OpType::Concat).unwrap();
    let bmm = g.nodes().iter().position(|n| n.op == OpType::BatchMatMul).unwrap();
    let flat = g.nodes().iter().position(|n| n.op == OpType::Flatten).unwrap();
    let cfg = AcceleratorConfig::new(100e12, 100e9, 0.0, 1e12).unwrap();
    let p = project_fusion_speedup(&g, &[concat, bmm, flat], &cfg, &ElemBytes::declared()).unwrap();

    let z = (b * f * d * 4) as f64;
    let zz = (b * f * f * 4) as f64;
    let bmm_flops = (2 * b * f * f * d) as f64;
    let t = |flops: f64, bytes: f64| (flops / 100e12f64).max(bytes / 100e9);
    let before = t(0.0, 2.0 * z) + t(bmm_flops, 2.0 * z + zz) + t(0.0, 2.0 * zz);
    let after = t(bmm_flops, z + zz);
    assert!((p.before_s - before).abs() <= 1e-15 * before, "{} vs {before}", p.before_s);
    assert!((p.after_s - after).abs() <= 1e-15 * after, "{} vs {after}", p.after_s);
}

#[test]
fn escaping_intermediate_keeps_its_write() {
    let mut g = chain(&[OpType::Relu, OpType::Relu], 8, 8);
    g.mark_output("t1");
    let cfg = AcceleratorConfig::new(100e12, 100e9, 0.0, 1e12).unwrap();
    let p = project_fusion_speedup(&g, &[0, 1], &cfg, &ElemBytes::declared()).unwrap();
    assert_eq!(p.eliminated_bytes, 8 * 8 * 4);
    assert!((p.speedup() - 4.0 / 3.0).abs() < 1e-12);
}

#[test]
fn mining_is_deterministic_across_thread_counts() {
    let corpus = fixtures::planted_corpus(5, 20, 3);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| mine_frequent_subgraphs(&corpus, 2, 4).unwrap());
    let b = many.install(|| mine_frequent_subgraphs(&corpus, 2, 4).unwrap());
    assert_eq!(a, b);
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    let cfg = AcceleratorConfig::new(100e12, 100e9, 0.0, 1e12).unwrap();
    let eb = ElemBytes::declared();
    write_candidates_csv(&evaluate_candidates(&corpus, &a, &cfg, &eb, &DEFAULT_ALLOWLIST).unwrap(), &mut csv_a).unwrap();
    write_candidates_csv(&evaluate_candidates(&corpus, &b, &cfg, &eb, &DEFAULT_ALLOWLIST).unwrap(), &mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn invalid_mining_arguments() {
    let corpus = fixtures::planted_corpus(1, 1, 0);
    assert!(mine_frequent_subgraphs(&corpus, 1, 1).is_err());
    assert!(top_k(&[], 0).is_err());
}
