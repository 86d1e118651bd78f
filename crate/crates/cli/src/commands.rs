use std::collections::BTreeMap;
use std::path::Path;

use inferlab_core::cost::{graph_costs, write_cost_csv, ElemBytes};
use inferlab_core::fixtures::{self, RecScale, ToyCnnOptions};
use inferlab_core::fusion::{evaluate_candidates, mine_frequent_subgraphs, top_k, write_candidates_csv, CorpusGraph, DEFAULT_ALLOWLIST};
use inferlab_core::interp::{Interpreter, JsonLinesObserver, DEFAULT_HOST};
use inferlab_core::ir::{infer_shapes, load_model, load_model_with_weights, read_container, save_model, write_container, DType, Graph, Tensor};
use inferlab_core::kernels::{gemm_intensity, GemmKernel, GemmProblem};
use inferlab_core::quant::{quantize_model, write_report_csv, Batch, QuantOptions, QuantPlan};
use inferlab_core::roofline::{capacity_sweep, simulate, write_sweep_csv, AcceleratorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::output::{read, read_text, CliError, InputHash, OutDir};
use crate::ModelArgs;

const DEFAULT_ACCEL: AcceleratorConfig = AcceleratorConfig {
    peak_flops: 100e12,
    dram_bw: 100e9,
    onchip_capacity: 0.0,
    onchip_bw: 1e12,
};

fn load(args: &ModelArgs, hash: &mut InputHash) -> Result<Graph, CliError> {
    hash.add_file(&args.model)?;
    let g = match &args.weights {
        Some(w) => {
            hash.add_file(w)?;
            load_model_with_weights(&args.model, Some(w))?
        }
        None => {
            let sibling = args.model.with_extension("dliw");
            if sibling.is_file() {
                hash.add_file(&sibling)?;
            }
            load_model(&args.model)?
        }
    };
    Ok(infer_shapes(&g)?)
}

fn elem_bytes(name: &str) -> Result<ElemBytes, CliError> {
    if name == "declared" {
        return Ok(ElemBytes::declared());
    }
    DType::ALL
        .into_iter()
        .find(|d| d.name() == name)
        .map(ElemBytes::with_weight_dtype)
        .ok_or_else(|| CliError::Usage(format!("unknown weight dtype `{name}`")))
}

fn accel(path: Option<&Path>, hash: &mut InputHash) -> Result<AcceleratorConfig, CliError> {
    let Some(p) = path else {
        return Ok(DEFAULT_ACCEL);
    };
    hash.add_file(p)?;
    let cfg: AcceleratorConfig = serde_json::from_str(&read_text(p)?).map_err(|e| {
        CliError::Core(inferlab_core::Error::Parse {
            path: p.to_path_buf(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> inferlab_core::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn finite_or_inf(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

pub fn analyze(model: &ModelArgs, weight_dtype: &str, out: &Path) -> Result<(), CliError> {
    let mut hash = InputHash::default();
    let g = load(model, &mut hash)?;
    let eb = elem_bytes(weight_dtype)?;
    let costs = graph_costs(&g, &eb)?;
    let dir = OutDir::create(out, hash)?;
    dir.write_text("costs.csv", &csv_bytes(|b| write_cost_csv(&g, &costs, b))?)?;

    let flops: u64 = costs.iter().map(|c| c.flops).sum();
    let weight_elems: u64 = costs.iter().map(|c| c.weight_elems()).sum();
    let act_elems: u64 = costs.iter().map(|c| c.act_elems()).sum();
    let ratio = |d: u64| if d == 0 { f64::INFINITY } else { flops as f64 / d as f64 };
    let mut by_op: BTreeMap<String, u64> = BTreeMap::new();
    for (n, c) in g.nodes().iter().zip(&costs) {
        *by_op.entry(n.op.name().to_string()).or_default() += c.flops;
    }
    let summary = json!({
        "nodes": g.nodes().len(),
        "total_params": g.param_count(),
        "total_weight_bytes": g.weight_bytes(),
        "total_flops": flops,
        "intensity_w": finite_or_inf(ratio(weight_elems)),
        "intensity_wa": finite_or_inf(ratio(weight_elems + act_elems)),
        "flops_by_op": by_op,
    });
    dir.write_json("summary.json", summary)?;
    println!(
        "{} nodes, {} params, {} flops, intensity {:.3} (weights) {:.3} (weights+acts)",
        g.nodes().len(),
        g.param_count(),
        flops,
        ratio(weight_elems),
        ratio(weight_elems + act_elems)
    );
    Ok(())
}

fn default_capacities() -> Vec<f64> {
    std::iter::once(0.0).chain((20..=30).map(|p| (1u64 << p) as f64)).collect()
}

pub fn roofline(
    model: &ModelArgs,
    accel_path: Option<&Path>,
    capacities: &[f64],
    bws: &[f64],
    weight_dtype: &str,
    out: &Path,
) -> Result<(), CliError> {
    let mut hash = InputHash::default();
    let g = load(model, &mut hash)?;
    let cfg = accel(accel_path, &mut hash)?;
    let eb = elem_bytes(weight_dtype)?;
    let caps = if capacities.is_empty() { default_capacities() } else { capacities.to_vec() };
    let points = capacity_sweep(&g, &cfg, &eb, &caps, bws)?;
    let perf = simulate(&g, &cfg, &eb)?;
    let dir = OutDir::create(out, hash)?;
    dir.write_text("sweep.csv", &csv_bytes(|b| write_sweep_csv(&points, b))?)?;
    let mut layers = String::from("name,op,flops,compute_s,offchip_s,onchip_s,bound\n");
    for (l, n) in perf.layers.iter().zip(g.nodes()) {
        layers.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{}\n",
            l.node,
            n.op,
            l.flops,
            l.timing.compute_s,
            l.timing.offchip_s,
            l.timing.onchip_s,
            l.timing.bound.name()
        ));
    }
    dir.write_text("layers.csv", layers.as_bytes())?;
    dir.write_json(
        "config.json",
        json!({
            "accelerator": cfg,
            "capacities": caps,
            "onchip_bws": bws,
            "weight_dtype": weight_dtype,
        }),
    )?;
    println!(
        "{} sweep points; at configured capacity: {:.6e} s, {:.3} TOP/s",
        points.len(),
        perf.total_s,
        perf.effective_flops / 1e12
    );
    Ok(())
}

/// Groups `batch<i>/<name>` entries by `i`; entries without a prefix
/// belong to batch 0.
fn batches_from_container(entries: Vec<(String, Tensor)>) -> Result<Vec<Batch>, CliError> {
    let mut by_index: BTreeMap<usize, Batch> = BTreeMap::new();
    for (name, t) in entries {
        let (idx, input) = match name.split_once('/') {
            Some((prefix, rest)) if prefix.starts_with("batch") => {
                let i = prefix["batch".len()..]
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("bad batch entry name `{name}`")))?;
                (i, rest.to_string())
            }
            _ => (0, name),
        };
        by_index.entry(idx).or_default().insert(input, t);
    }
    Ok(by_index.into_values().collect())
}

pub fn quantize(model: &ModelArgs, calib: &Path, threshold: f64, opts: &QuantOptions, out: &Path) -> Result<(), CliError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(CliError::Usage(format!("threshold must be >= 0, got {threshold}")));
    }
    let mut hash = InputHash::default();
    let g = load(model, &mut hash)?;
    let bytes = read(calib)?;
    hash.add_bytes(&bytes);
    let batches = batches_from_container(read_container(&bytes)?)?;
    let outcome = quantize_model(&g, &batches, threshold, opts)?;
    let dir = OutDir::create(out, hash)?;
    let plan_value: serde_json::Value = serde_json::from_str(&outcome.plan.to_json()).expect("plan is JSON");
    dir.write_json("plan.json", plan_value)?;
    dir.write_text("report.csv", &csv_bytes(|b| write_report_csv(&outcome.report, b))?)?;
    let mut ranges = String::from("tensor,observed_min,observed_max,selected_min,selected_max,narrowed_min,narrowed_max\n");
    let c = &outcome.calibration;
    for (t, o) in &c.observed {
        let s = c.selected[t];
        let n = c.narrowed.ranges[t];
        ranges.push_str(&format!("{t},{:e},{:e},{:e},{:e},{:e},{:e}\n", o.0, o.1, s.0, s.1, n.0, n.1));
    }
    dir.write_text("ranges.csv", ranges.as_bytes())?;
    println!(
        "{} layers quantized, fallback: [{}], end-to-end SQNR {:.2} dB",
        outcome.plan.quantized_layers().count(),
        outcome.fallback.join(", "),
        outcome.report.end_to_end.sqnr_db
    );
    Ok(())
}

pub fn bench(kernel: &str, m: usize, n: usize, k: usize, repeats: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let kernels: Vec<GemmKernel> = if kernel == "all" {
        GemmKernel::ALL.to_vec()
    } else {
        vec![kernel.parse()?]
    };
    let mut hash = InputHash::default();
    hash.add_bytes(format!("bench {kernel} {m} {n} {k} {seed}").as_bytes());
    let mut csv = String::from("kernel,M,N,K,intensity,gops\n");
    for kern in kernels {
        let p = GemmProblem::new(kern, m, n, k, seed)?;
        let t = p.time(repeats)?;
        let gops = if t > 0.0 { p.ops() / t / 1e9 } else { f64::INFINITY };
        csv.push_str(&format!("{kern},{m},{n},{k},{:.6},{:.3}\n", gemm_intensity(m, n, k), gops));
        println!("{kern:>8} {m}x{n}x{k}: {gops:.3} GOp/s");
    }
    OutDir::create(out, hash)?.write_text("bench.csv", csv.as_bytes())?;
    Ok(())
}

fn random_inputs(g: &Graph, seed: u64) -> Result<Batch, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Batch::new();
    for name in g.inputs() {
        let spec = g.tensor(name).expect("validated graph");
        if spec.dtype != DType::F32 {
            return Err(CliError::Usage(format!("input `{name}` is {}; pass --inputs", spec.dtype.name())));
        }
        let data: Vec<f32> = (0..spec.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
        b.insert(name.clone(), Tensor::from_f32(spec.dims.clone(), data)?);
    }
    Ok(b)
}

pub fn run(
    model: &ModelArgs,
    inputs: Option<&Path>,
    plan: Option<&Path>,
    host: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let mut hash = InputHash::default();
    let g = load(model, &mut hash)?;
    let mut interp = match plan {
        Some(p) => {
            hash.add_file(p)?;
            let plan = QuantPlan::from_json(&read_text(p)?).map_err(|e| match e {
                inferlab_core::Error::Parse { line, column, msg, .. } => CliError::Core(inferlab_core::Error::Parse {
                    path: p.to_path_buf(),
                    line,
                    column,
                    msg,
                }),
                other => CliError::Core(other),
            })?;
            Interpreter::with_plan(&g, &plan)?
        }
        None => Interpreter::new(&g)?,
    };
    if host.is_some() {
        interp.set_host(accel(host, &mut hash)?)?;
    } else {
        interp.set_host(DEFAULT_HOST)?;
    }
    let batch = match inputs {
        Some(p) => {
            let bytes = read(p)?;
            hash.add_bytes(&bytes);
            read_container(&bytes)?.into_iter().collect()
        }
        None => {
            hash.add_bytes(format!("seed {seed}").as_bytes());
            random_inputs(&g, seed)?
        }
    };
    let mut obs = JsonLinesObserver::new(Vec::new());
    let result = interp.run(&batch, &mut [&mut obs])?;
    let trace = obs.finish()?;
    let dir = OutDir::create(out, hash)?;
    dir.write_binary("outputs.dliw", &write_container(result.outputs.iter().map(|(k, v)| (k.as_str(), v)))?)?;
    dir.write_text("trace.jsonl", &trace)?;
    dir.write_text("ops.csv", &csv_bytes(|b| result.report.write_aggregate_csv(b))?)?;
    println!(
        "{} ops executed in {:.6} s, {} outputs",
        result.report.records.len(),
        result.report.total_s,
        result.outputs.len()
    );
    Ok(())
}

fn load_corpus(dir: &Path, hash: &mut InputHash) -> Result<Vec<CorpusGraph>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| CliError::Io(dir.to_path_buf(), e))?.path();
        if p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "frequencies.json") {
            files.push(p);
        }
    }
    files.sort();
    let freq_path = dir.join("frequencies.json");
    let freqs: BTreeMap<String, u64> = if freq_path.is_file() {
        hash.add_file(&freq_path)?;
        serde_json::from_str(&read_text(&freq_path)?).map_err(|e| {
            CliError::Core(inferlab_core::Error::Parse {
                path: freq_path.clone(),
                line: e.line(),
                column: e.column(),
                msg: e.to_string(),
            })
        })?
    } else {
        BTreeMap::new()
    };
    files
        .iter()
        .map(|p| {
            hash.add_file(p)?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let graph = infer_shapes(&load_model(p)?)?;
            Ok(CorpusGraph {
                frequency: freqs.get(&name).copied().unwrap_or(1),
                name,
                graph,
            })
        })
        .collect()
}

pub fn mine(corpus: &Path, support: u64, max_size: usize, k: usize, accel_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut hash = InputHash::default();
    let graphs = load_corpus(corpus, &mut hash)?;
    let cfg = accel(accel_path, &mut hash)?;
    hash.add_bytes(format!("mine {support} {max_size} {k}").as_bytes());
    let patterns = mine_frequent_subgraphs(&graphs, support, max_size)?;
    let cands = evaluate_candidates(&graphs, &patterns, &cfg, &ElemBytes::declared(), &DEFAULT_ALLOWLIST)?;
    let ranked = top_k(&cands, k)?;
    let dir = OutDir::create(out, hash)?;
    dir.write_text("candidates.csv", &csv_bytes(|b| write_candidates_csv(&ranked, b))?)?;
    println!("{} graphs, {} frequent patterns, {} ranked", graphs.len(), patterns.len(), ranked.len());
    Ok(())
}

fn save_batches(path: &Path, batches: &[Batch]) -> Result<(), CliError> {
    let mut entries = BTreeMap::new();
    for (i, b) in batches.iter().enumerate() {
        for (name, t) in b {
            entries.insert(format!("batch{i}/{name}"), t.clone());
        }
    }
    let bytes = write_container(entries.iter().map(|(k, v)| (k.as_str(), v)))?;
    std::fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn save_inputs(path: &Path, b: &Batch) -> Result<(), CliError> {
    let bytes = write_container(b.iter().map(|(k, v)| (k.as_str(), v)))?;
    std::fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

pub fn fixture(name: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    let model = out.join("model.json");
    match name {
        "single_fc" => save_model(&fixtures::single_fc(10, 256, 512, true, seed), &model)?,
        "compute_fc" => save_model(&fixtures::compute_bound_fc(), &model)?,
        "recommendation" => save_model(&fixtures::recommendation(RecScale::ANALYSIS, seed), &model)?,
        "recommendation_tiny" => {
            save_model(&fixtures::recommendation(RecScale::TINY, seed), &model)?;
            save_inputs(&out.join("inputs.dliw"), &fixtures::recommendation_batch(RecScale::TINY, seed + 1))?;
        }
        "interaction" => save_model(&fixtures::recommendation_interaction(256, 8, 64), &model)?,
        "cv" => save_model(&fixtures::cv_large_activation(), &model)?,
        "toy_cnn" | "toy_cnn_sensitive" => {
            let opts = if name == "toy_cnn" { ToyCnnOptions::PLAIN } else { ToyCnnOptions::SENSITIVE };
            save_model(&fixtures::toy_cnn(opts, seed), &model)?;
            save_batches(&out.join("calib.dliw"), &fixtures::toy_cnn_batches(8, seed + 1))?;
            save_inputs(&out.join("inputs.dliw"), &fixtures::toy_cnn_batches(1, seed + 2)[0])?;
        }
        "corpus" => {
            for c in fixtures::planted_corpus(5, 12, seed) {
                save_model(&c.graph, out.join(format!("{}.json", c.name)))?;
            }
        }
        other => return Err(CliError::Usage(format!("unknown fixture `{other}`"))),
    }
    println!("wrote fixture `{name}` to {}", out.display());
    Ok(())
}
