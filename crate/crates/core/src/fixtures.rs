//! Deterministic example models and data sets used by the tests, benches
//! and the `fixture` CLI subcommand.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::fusion::CorpusGraph;
use crate::ir::{infer_shapes, DType, Graph, Node, OpType, Tensor, TensorSpec};
use crate::quant::Batch;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn act(name: &str) -> TensorSpec {
    TensorSpec::new(name, Vec::new(), DType::F32)
}

fn finish(g: Graph) -> Graph {
    infer_shapes(&g).expect("fixture graphs are well formed")
}

fn weight(g: &mut Graph, name: &str, dims: Vec<usize>, data: Option<Vec<f32>>) {
    let t = data.map(|d| Tensor::from_f32(dims.clone(), d).expect("fixture weight dims"));
    g.add_weight(TensorSpec::new(name, dims, DType::F32), t);
}

/// One FC layer `[m,k] x [n,k]^T` without bias. Weights carry data only
/// when `with_data` is set.
pub fn single_fc(m: usize, n: usize, k: usize, with_data: bool, seed: u64) -> Graph {
    let mut r = rng(seed);
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("x", vec![m, k], DType::F32));
    let w = with_data.then(|| normal(&mut r, n * k, 1.0 / (k as f32).sqrt()));
    weight(&mut g, "w", vec![n, k], w);
    g.add_tensor(act("y"));
    g.add_node(Node::new("fc", OpType::FC, ["x", "w"], ["y"]));
    g.mark_output("y");
    finish(g)
}

/// A compute-bound square FC of size 8192.
pub fn compute_bound_fc() -> Graph {
    single_fc(8192, 8192, 8192, false, 0)
}

/// Sizes of the recommendation fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecScale {
    pub batch: usize,
    pub rows: usize,
    pub dim: usize,
    pub pooling: usize,
    pub hidden: [usize; 2],
    pub with_data: bool,
}

impl RecScale {
    /// Production-like table sizes, analysis only.
    pub const ANALYSIS: RecScale = RecScale {
        batch: 256,
        rows: 20_000_000,
        dim: 64,
        pooling: 80,
        hidden: [64, 32],
        with_data: false,
    };

    /// Small enough to execute.
    pub const TINY: RecScale = RecScale {
        batch: 8,
        rows: 1000,
        dim: 16,
        pooling: 4,
        hidden: [16, 8],
        with_data: true,
    };
}

/// Two pooled embedding lookups, concatenated and fed to an MLP:
/// `SLS, SLS, Concat, FC, Relu, FC, FC`.
pub fn recommendation(s: RecScale, seed: u64) -> Graph {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let lookups = s.batch * s.pooling;
    for t in 0..2 {
        g.add_input(TensorSpec::new(format!("ids_{t}"), vec![lookups], DType::I32));
        g.add_input(TensorSpec::new(format!("lengths_{t}"), vec![s.batch], DType::I32));
        let data = s.with_data.then(|| normal(&mut r, s.rows * s.dim, 0.1));
        weight(&mut g, &format!("table_{t}"), vec![s.rows, s.dim], data);
        g.add_tensor(act(&format!("pooled_{t}")));
        g.add_node(Node::new(
            format!("sls_{t}"),
            OpType::SparseLengthsSum,
            [format!("table_{t}"), format!("ids_{t}"), format!("lengths_{t}")],
            [format!("pooled_{t}")],
        ));
    }
    g.add_tensor(act("features"));
    g.add_node(Node::new("concat", OpType::Concat, ["pooled_0", "pooled_1"], ["features"]).with_attr("axis", 1i64));
    let widths = [2 * s.dim, s.hidden[0], s.hidden[1], 1];
    let mut x = "features".to_string();
    for (i, w) in widths.windows(2).enumerate() {
        let (k, n) = (w[0], w[1]);
        let wd = s.with_data.then(|| normal(&mut r, n * k, (2.0 / k as f32).sqrt()));
        weight(&mut g, &format!("fc{i}_w"), vec![n, k], wd);
        let bd = s.with_data.then(|| normal(&mut r, n, 0.01));
        weight(&mut g, &format!("fc{i}_b"), vec![n], bd);
        let y = format!("fc{i}_out");
        g.add_tensor(act(&y));
        g.add_node(Node::new(format!("fc{i}"), OpType::FC, [x.clone(), format!("fc{i}_w"), format!("fc{i}_b")], [y.clone()]));
        x = y;
        if i == 0 {
            g.add_tensor(act("fc0_relu"));
            g.add_node(Node::new("relu0", OpType::Relu, ["fc0_out"], ["fc0_relu"]));
            x = "fc0_relu".into();
        }
    }
    g.mark_output(x);
    finish(g)
}

/// Random lookups for the recommendation fixture.
pub fn recommendation_batch(s: RecScale, seed: u64) -> Batch {
    let mut r = rng(seed);
    let mut b = BTreeMap::new();
    for t in 0..2 {
        let ids: Vec<i32> = (0..s.batch * s.pooling).map(|_| r.gen_range(0..s.rows as i32)).collect();
        b.insert(format!("ids_{t}"), Tensor::from_i32(vec![ids.len()], ids).expect("dims"));
        b.insert(
            format!("lengths_{t}"),
            Tensor::from_i32(vec![s.batch], vec![s.pooling as i32; s.batch]).expect("dims"),
        );
    }
    b
}

/// Feature interaction block: `Concat -> BatchMatMul(z, z^T) -> Flatten`
/// followed by a small MLP. `features` dense inputs of shape `[batch,1,dim]`.
pub fn recommendation_interaction(batch: usize, features: usize, dim: usize) -> Graph {
    let mut g = Graph::new();
    let names: Vec<String> = (0..features).map(|f| format!("emb_{f}")).collect();
    for n in &names {
        g.add_input(TensorSpec::new(n.clone(), vec![batch, 1, dim], DType::F32));
    }
    for t in ["z", "zz", "flat", "h", "h_relu", "score"] {
        g.add_tensor(act(t));
    }
    g.add_node(Node::new("concat", OpType::Concat, names, ["z".to_string()]).with_attr("axis", 1i64));
    g.add_node(Node::new("interact", OpType::BatchMatMul, ["z", "z"], ["zz"]).with_attr("trans_b", 1i64));
    g.add_node(Node::new("flatten", OpType::Flatten, ["zz"], ["flat"]));
    let f2 = features * features;
    weight(&mut g, "top_w", vec![64, f2], None);
    weight(&mut g, "out_w", vec![1, 64], None);
    g.add_node(Node::new("top", OpType::FC, ["flat", "top_w"], ["h"]));
    g.add_node(Node::new("top_relu", OpType::Relu, ["h"], ["h_relu"]));
    g.add_node(Node::new("out", OpType::FC, ["h_relu", "out_w"], ["score"]));
    g.mark_output("score");
    finish(g)
}

/// Vision block at 112x112 with large activations: dense, grouped,
/// depthwise and pointwise convolutions, batch norm and activations.
pub fn cv_large_activation() -> Graph {
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("image", vec![1, 32, 112, 112], DType::F32));
    let convs: [(&str, usize, usize, usize, usize); 5] = [
        ("conv_a", 32, 64, 3, 1),
        ("conv_grouped", 64, 64, 3, 4),
        ("conv_dw", 64, 64, 3, 64),
        ("conv_pw", 64, 128, 1, 1),
        ("conv_dw2", 128, 128, 3, 128),
    ];
    let mut x = "image".to_string();
    for (name, cin, cout, k, group) in convs {
        weight(&mut g, &format!("{name}_w"), vec![cout, cin / group, k, k], None);
        let y = format!("{name}_out");
        g.add_tensor(act(&y));
        let pad = (k / 2) as i64;
        g.add_node(
            Node::new(name, OpType::Conv, [x.clone(), format!("{name}_w")], [y.clone()])
                .with_attr("kernel", vec![k as i64, k as i64])
                .with_attr("pad", vec![pad, pad])
                .with_attr("group", group as i64),
        );
        x = y;
        if name == "conv_a" || name == "conv_pw" {
            let bn = format!("{name}_bn");
            let params: Vec<String> = ["scale", "bias", "mean", "var"].iter().map(|p| format!("{bn}_{p}")).collect();
            for p in &params {
                weight(&mut g, p, vec![cout], None);
            }
            g.add_tensor(act(&bn));
            let mut inputs = vec![x.clone()];
            inputs.extend(params);
            g.add_node(Node::new(bn.clone(), OpType::SpatialBN, inputs, [bn.clone()]));
            let relu = format!("{name}_relu");
            g.add_tensor(act(&relu));
            g.add_node(Node::new(format!("{name}_act"), OpType::Relu, [bn], [relu.clone()]));
            x = relu;
        }
    }
    g.add_tensor(act("residual"));
    g.add_node(Node::new("residual_add", OpType::Add, [x.clone(), "conv_pw_relu".to_string()], ["residual".to_string()]));
    g.mark_output("residual");
    finish(g)
}

/// Options that make selected layers of the toy CNN hard to quantize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCnnOptions {
    /// Scale of conv1 weights reading input channel 2, which carries
    /// almost no signal.
    pub conv1_outlier: f32,
    /// Scale of FC weights reading conv2 channel 15, which is almost
    /// always zero after the activation.
    pub fc_outlier: f32,
}

impl ToyCnnOptions {
    pub const PLAIN: ToyCnnOptions = ToyCnnOptions {
        conv1_outlier: 1.0,
        fc_outlier: 1.0,
    };
    pub const SENSITIVE: ToyCnnOptions = ToyCnnOptions {
        conv1_outlier: 40.0,
        fc_outlier: 40.0,
    };
}

/// `conv1 (3->8, 3x3, pad 1) -> Relu -> conv2 (8->16, 3x3, stride 2, pad 1)
/// -> Relu -> Flatten -> FC (256->10) -> Softmax` on `[4,3,8,8]` inputs.
pub fn toy_cnn(opts: ToyCnnOptions, seed: u64) -> Graph {
    let mut r = rng(seed);
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("image", vec![4, 3, 8, 8], DType::F32));

    let mut w1 = normal(&mut r, 8 * 3 * 9, (2.0f32 / 27.0).sqrt());
    for o in 0..8 {
        for t in 0..9 {
            w1[o * 27 + 2 * 9 + t] *= opts.conv1_outlier;
        }
    }
    weight(&mut g, "conv1_w", vec![8, 3, 3, 3], Some(w1));
    let b1 = normal(&mut r, 8, 0.05).into_iter().map(|b| b + 1.0).collect();
    weight(&mut g, "conv1_b", vec![8], Some(b1));
    let w2 = normal(&mut r, 16 * 8 * 9, (2.0f32 / 72.0).sqrt());
    weight(&mut g, "conv2_w", vec![16, 8, 3, 3], Some(w2));
    let mut b2: Vec<f32> = normal(&mut r, 16, 0.05).into_iter().map(|b| b + 1.5).collect();
    b2[15] = -4.0;
    weight(&mut g, "conv2_b", vec![16], Some(b2));
    let mut wf = normal(&mut r, 10 * 256, (1.0f32 / 256.0).sqrt());
    for o in 0..10 {
        for s in 0..16 {
            wf[o * 256 + 15 * 16 + s] *= opts.fc_outlier;
        }
    }
    weight(&mut g, "fc_w", vec![10, 256], Some(wf));
    weight(&mut g, "fc_b", vec![10], Some(normal(&mut r, 10, 0.05)));

    for t in ["c1", "r1", "c2", "r2", "flat", "logits", "probs"] {
        g.add_tensor(act(t));
    }
    g.add_node(
        Node::new("conv1", OpType::Conv, ["image", "conv1_w", "conv1_b"], ["c1"])
            .with_attr("kernel", vec![3i64, 3])
            .with_attr("pad", vec![1i64, 1]),
    );
    g.add_node(Node::new("relu1", OpType::Relu, ["c1"], ["r1"]));
    g.add_node(
        Node::new("conv2", OpType::Conv, ["r1", "conv2_w", "conv2_b"], ["c2"])
            .with_attr("kernel", vec![3i64, 3])
            .with_attr("stride", vec![2i64, 2])
            .with_attr("pad", vec![1i64, 1]),
    );
    g.add_node(Node::new("relu2", OpType::Relu, ["c2"], ["r2"]));
    g.add_node(Node::new("flatten", OpType::Flatten, ["r2"], ["flat"]));
    g.add_node(Node::new("fc", OpType::FC, ["flat", "fc_w", "fc_b"], ["logits"]));
    g.add_node(Node::new("softmax", OpType::Softmax, ["logits"], ["probs"]));
    g.mark_output("probs");
    finish(g)
}

/// Image batches for the toy CNN: channels 0 and 1 in `[0,1)`, channel 2
/// near zero.
pub fn toy_cnn_batches(count: usize, seed: u64) -> Vec<Batch> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let mut data = Vec::with_capacity(4 * 3 * 64);
            for _n in 0..4 {
                for c in 0..3 {
                    for _ in 0..64 {
                        let v: f32 = r.gen();
                        data.push(if c == 2 { v * 0.01 } else { v });
                    }
                }
            }
            BTreeMap::from([("image".to_string(), Tensor::from_f32(vec![4, 3, 8, 8], data).expect("dims"))])
        })
        .collect()
}

fn elementwise_chain(name: &str, ops: &[OpType], width: usize) -> Graph {
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("x0", vec![16, width], DType::F32));
    let mut prev = "x0".to_string();
    for (i, op) in ops.iter().enumerate() {
        let y = format!("x{}", i + 1);
        g.add_tensor(act(&y));
        let node = match op {
            OpType::FC => {
                let w = format!("w{i}");
                weight(&mut g, &w, vec![width, width], None);
                Node::new(format!("{name}_{i}"), *op, [prev.clone(), w], [y.clone()])
            }
            OpType::Add | OpType::Mul => Node::new(format!("{name}_{i}"), *op, [prev.clone(), "x0".into()], [y.clone()]),
            OpType::Clip => Node::new(format!("{name}_{i}"), *op, [prev.clone()], [y.clone()])
                .with_attr("min", 0.0)
                .with_attr("max", 6.0),
            _ => Node::new(format!("{name}_{i}"), *op, [prev.clone()], [y.clone()]),
        };
        g.add_node(node);
        prev = y;
    }
    g.mark_output(prev);
    finish(g)
}

/// Corpus with `planted` copies of the interaction block plus noise graphs
/// built from random chains of other ops.
pub fn planted_corpus(planted: usize, noise: usize, seed: u64) -> Vec<CorpusGraph> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for i in 0..planted {
        let mut g = Graph::new();
        let (b, d) = (64, 32);
        for f in 0..4 {
            g.add_input(TensorSpec::new(format!("e{f}"), vec![b, 1, d], DType::F32));
        }
        for t in ["z", "zz", "flat"] {
            g.add_tensor(act(t));
        }
        g.add_node(Node::new("concat", OpType::Concat, ["e0", "e1", "e2", "e3"], ["z"]).with_attr("axis", 1i64));
        g.add_node(Node::new("bmm", OpType::BatchMatMul, ["z", "z"], ["zz"]).with_attr("trans_b", 1i64));
        g.add_node(Node::new("flatten", OpType::Flatten, ["zz"], ["flat"]));
        g.mark_output("flat");
        out.push(CorpusGraph {
            name: format!("planted_{i}"),
            graph: finish(g),
            frequency: 1,
        });
    }
    let pool = [OpType::Relu, OpType::Clip, OpType::Softmax, OpType::Add, OpType::Mul, OpType::FC];
    for i in 0..noise {
        let len = r.gen_range(1..=5);
        let ops: Vec<OpType> = (0..len).map(|_| pool[r.gen_range(0..pool.len())]).collect();
        out.push(CorpusGraph {
            name: format!("noise_{i}"),
            graph: elementwise_chain(&format!("n{i}"), &ops, 8),
            frequency: 1,
        });
    }
    out
}
