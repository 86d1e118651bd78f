//! Per-operator cost inference: FLOPs, traffic by operand and arithmetic
//! intensity.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{conv_geometry, DType, Graph, Node, OpType, TensorSpec};

/// Operand role for traffic accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    ActIn,
    ActOut,
}

/// Traffic attributable to one operand slot of a node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorTraffic {
    pub tensor: String,
    pub role: Role,
    pub elems: u64,
    pub bytes: u64,
}

/// Cost of one node. One multiply-add counts as two FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCost {
    pub flops: u64,
    pub weight_bytes: u64,
    pub act_in_bytes: u64,
    pub act_out_bytes: u64,
    pub traffic: Vec<TensorTraffic>,
}

impl OpCost {
    fn elems(&self, pred: impl Fn(Role) -> bool) -> u64 {
        self.traffic.iter().filter(|t| pred(t.role)).map(|t| t.elems).sum()
    }

    pub fn weight_elems(&self) -> u64 {
        self.elems(|r| r == Role::Weight)
    }

    pub fn act_in_elems(&self) -> u64 {
        self.elems(|r| r == Role::ActIn)
    }

    pub fn act_elems(&self) -> u64 {
        self.elems(|r| r != Role::Weight)
    }

    pub fn act_bytes(&self) -> u64 {
        self.act_in_bytes + self.act_out_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.weight_bytes + self.act_bytes()
    }
}

/// `C[M, N] = A[M, K] · B[K, N]`, all dims positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GemmShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

impl GemmShape {
    pub fn new(m: u64, n: u64, k: u64) -> Result<Self> {
        if m == 0 || n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("GEMM dims must be >= 1, got {m}x{n}x{k}")));
        }
        Ok(GemmShape { m, n, k })
    }

    pub fn flops(&self) -> u64 {
        2 * self.m * self.n * self.k
    }
}

/// Element sizes used for traffic. By default each tensor uses its declared
/// dtype; overrides model deployment in another precision (for example int8
/// weights). Integer index tensors (i32) are never overridden.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ElemBytes {
    pub weight: Option<usize>,
    pub activation: Option<usize>,
}

impl ElemBytes {
    pub fn declared() -> Self {
        ElemBytes::default()
    }

    pub fn with_weight_dtype(dtype: DType) -> Self {
        ElemBytes {
            weight: Some(dtype.size()),
            activation: None,
        }
    }

    pub fn size(&self, spec: &TensorSpec, role: Role) -> u64 {
        if spec.dtype == DType::I32 {
            return 4;
        }
        let o = match role {
            Role::Weight => self.weight,
            _ => self.activation,
        };
        o.unwrap_or(spec.dtype.size()) as u64
    }
}

/// GEMM view of FC, Conv (one shape per group, `groups` copies) and BatchMatMul.
pub fn gemm_shape(node: &Node, g: &Graph) -> Result<Option<(GemmShape, u64)>> {
    let dims = |i: usize| -> Result<&[usize]> { Ok(&g.spec_for(&node.name, &node.inputs[i])?.dims) };
    Ok(match node.op {
        OpType::FC => {
            let x = dims(0)?;
            let w = dims(1)?;
            Some((GemmShape::new(x[0] as u64, w[0] as u64, w[1] as u64)?, 1))
        }
        OpType::Conv => {
            let geo = conv_geometry(node, g)?;
            Some((
                GemmShape::new(geo.m() as u64, geo.n_per_group() as u64, geo.k_per_group() as u64)?,
                geo.groups as u64,
            ))
        }
        OpType::BatchMatMul => {
            let a = dims(0)?;
            let out = &g.spec_for(&node.name, &node.outputs[0])?.dims;
            let ta = node.attr_int("trans_a").unwrap_or(0) != 0;
            let k = if ta { a[a.len() - 2] } else { a[a.len() - 1] };
            let batch: usize = a[..a.len() - 2].iter().product();
            let (m, n) = (out[out.len() - 2], out[out.len() - 1]);
            Some((GemmShape::new(m as u64, n as u64, k as u64)?, batch as u64))
        }
        _ => None,
    })
}

/// FLOPs and operand traffic of `node`. Shapes must have been inferred.
pub fn op_cost(node: &Node, g: &Graph, eb: &ElemBytes) -> Result<OpCost> {
    let spec = |t: &str| -> Result<&TensorSpec> {
        let s = g.spec_for(&node.name, t)?;
        if !s.has_dims() {
            return Err(Error::shape(&node.name, format!("tensor `{t}` has no inferred dims")));
        }
        Ok(s)
    };
    let mut traffic = Vec::with_capacity(node.inputs.len() + node.outputs.len());
    for t in &node.inputs {
        let s = spec(t)?;
        let role = if g.is_weight(t) { Role::Weight } else { Role::ActIn };
        traffic.push(TensorTraffic {
            tensor: t.clone(),
            role,
            elems: s.numel(),
            bytes: s.numel() * eb.size(s, role),
        });
    }
    for t in &node.outputs {
        let s = spec(t)?;
        traffic.push(TensorTraffic {
            tensor: t.clone(),
            role: Role::ActOut,
            elems: s.numel(),
            bytes: s.numel() * eb.size(s, Role::ActOut),
        });
    }
    let out_elems: u64 = spec(&node.outputs[0])?.numel();
    let flops = match node.op {
        OpType::FC | OpType::Conv | OpType::BatchMatMul => {
            let (shape, copies) = gemm_shape(node, g)?.expect("GEMM op");
            shape.flops() * copies
        }
        OpType::SparseLengthsSum => {
            let lookups = spec(&node.inputs[1])?.numel();
            let table = spec(&node.inputs[0])?;
            let d = table.dims[1] as u64;
            // Only the touched rows are read.
            let t = &mut traffic[0];
            t.elems = lookups * d;
            t.bytes = t.elems * eb.size(table, t.role);
            lookups * d
        }
        OpType::Concat | OpType::Split | OpType::Flatten | OpType::BatchGather => 0,
        OpType::Relu | OpType::Clip | OpType::Add | OpType::Mul => out_elems,
        OpType::Sum => (node.inputs.len() as u64).saturating_sub(1).max(1) * out_elems,
        OpType::SpatialBN => 2 * out_elems,
        OpType::Softmax => 3 * out_elems,
    };
    let sum = |r: Role| traffic.iter().filter(|t| t.role == r).map(|t| t.bytes).sum();
    Ok(OpCost {
        flops,
        weight_bytes: sum(Role::Weight),
        act_in_bytes: sum(Role::ActIn),
        act_out_bytes: sum(Role::ActOut),
        traffic,
    })
}

/// Costs of every node, in node declaration order.
pub fn graph_costs(g: &Graph, eb: &ElemBytes) -> Result<Vec<OpCost>> {
    g.nodes().iter().map(|n| op_cost(n, g, eb)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityMode {
    /// FLOPs per weight element.
    WeightsOnly,
    /// FLOPs per element of weights plus input and output activations.
    WeightsAndActs,
    /// FLOPs per input activation element.
    ActivationsOnly,
}

/// Arithmetic intensity in FLOPs per element of traffic. An op with FLOPs
/// but no traffic in the chosen view is `+inf`; an op with neither is 0.
pub fn arithmetic_intensity(c: &OpCost, mode: IntensityMode) -> f64 {
    let denom = match mode {
        IntensityMode::WeightsOnly => c.weight_elems(),
        IntensityMode::WeightsAndActs => c.weight_elems() + c.act_elems(),
        IntensityMode::ActivationsOnly => c.act_in_elems(),
    };
    match (c.flops, denom) {
        (0, 0) => 0.0,
        (_, 0) => f64::INFINITY,
        (f, d) => f as f64 / d as f64,
    }
}

/// Memory bandwidth (bytes/s) needed to keep `peak` FLOP/s busy at the
/// given FLOPs-per-byte intensity. Infinite intensity needs none.
pub fn bandwidth_to_saturate(intensity: f64, peak: f64) -> f64 {
    if intensity.is_infinite() {
        0.0
    } else {
        peak / intensity
    }
}

struct Ratio(f64);

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{:.6}", self.0)
        }
    }
}

/// Writes the per-node cost table as CSV:
/// `name,op,flops,weight_bytes,act_bytes,intensity_w,intensity_wa`.
pub fn write_cost_csv<W: Write>(g: &Graph, costs: &[OpCost], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| Error::InvalidArgument(format!("writing CSV: {e}"));
    w.write_record(["name", "op", "flops", "weight_bytes", "act_bytes", "intensity_w", "intensity_wa"])
        .map_err(io)?;
    for (node, c) in g.nodes().iter().zip(costs) {
        w.write_record([
            node.name.clone(),
            node.op.to_string(),
            c.flops.to_string(),
            c.weight_bytes.to_string(),
            c.act_bytes().to_string(),
            Ratio(arithmetic_intensity(c, IntensityMode::WeightsOnly)).to_string(),
            Ratio(arithmetic_intensity(c, IntensityMode::WeightsAndActs)).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
