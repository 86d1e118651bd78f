//! Operator-graph IR: tensor declarations, nodes, graphs and the
//! value type used to carry weights and activations.
//!
//! A [`Graph`] is a DAG of [`Node`]s connected by tensor names. Names are the
//! only identity; there are no numeric ids. Weights are tensors marked
//! constant and are never produced by a node.

mod io;
mod shape;
mod tensor;
mod validate;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{
    load_model, load_model_with_weights, load_weights, parse_model, read_container, save_model,
    save_weights, to_canonical_json, write_container,
};
pub use shape::{conv_geometry, infer_shapes, ConvGeometry};
pub use tensor::{Tensor, TensorData};
pub use validate::{validate_graph, Diagnostic, DiagnosticKind};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    U8,
    I8,
    I32,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::F32, DType::F16, DType::U8, DType::I8, DType::I32];

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::U8 | DType::I8 => 1,
        }
    }

    /// Code used by the binary weight container.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::U8 => 2,
            DType::I8 => 3,
            DType::I32 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        DType::ALL.iter().copied().find(|d| d.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::U8 => "u8",
            DType::I8 => "i8",
            DType::I32 => "i32",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpType {
    FC,
    Conv,
    SparseLengthsSum,
    Concat,
    Split,
    Flatten,
    BatchMatMul,
    BatchGather,
    Relu,
    Add,
    Mul,
    Clip,
    Sum,
    SpatialBN,
    Softmax,
}

impl OpType {
    pub const ALL: [OpType; 15] = [
        OpType::FC,
        OpType::Conv,
        OpType::SparseLengthsSum,
        OpType::Concat,
        OpType::Split,
        OpType::Flatten,
        OpType::BatchMatMul,
        OpType::BatchGather,
        OpType::Relu,
        OpType::Add,
        OpType::Mul,
        OpType::Clip,
        OpType::Sum,
        OpType::SpatialBN,
        OpType::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpType::FC => "FC",
            OpType::Conv => "Conv",
            OpType::SparseLengthsSum => "SparseLengthsSum",
            OpType::Concat => "Concat",
            OpType::Split => "Split",
            OpType::Flatten => "Flatten",
            OpType::BatchMatMul => "BatchMatMul",
            OpType::BatchGather => "BatchGather",
            OpType::Relu => "Relu",
            OpType::Add => "Add",
            OpType::Mul => "Mul",
            OpType::Clip => "Clip",
            OpType::Sum => "Sum",
            OpType::SpatialBN => "SpatialBN",
            OpType::Softmax => "Softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<OpType> {
        OpType::ALL.iter().copied().find(|o| o.name() == name)
    }

    /// Ops that only move or reshape data.
    pub fn is_data_movement(self) -> bool {
        matches!(
            self,
            OpType::Concat | OpType::Split | OpType::Flatten | OpType::BatchGather
        )
    }

    /// Ops whose inputs may be permuted without changing the result.
    pub fn is_commutative(self) -> bool {
        matches!(self, OpType::Add | OpType::Mul | OpType::Sum)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Floats(Vec<f64>),
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::Float(v)
    }
}

impl From<Vec<i64>> for AttrValue {
    fn from(v: Vec<i64>) -> Self {
        AttrValue::Ints(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    /// Empty until shape inference has run for intermediate tensors.
    pub dims: Vec<usize>,
    pub dtype: DType,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, dtype: DType) -> Self {
        TensorSpec {
            name: name.into(),
            dims,
            dtype,
        }
    }

    pub fn has_dims(&self) -> bool {
        !self.dims.is_empty()
    }

    pub fn numel(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn bytes(&self) -> u64 {
        self.numel() * self.dtype.size() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: OpType,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub attrs: BTreeMap<String, AttrValue>,
}

impl Node {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        op: OpType,
        inputs: impl IntoIterator<Item = S>,
        outputs: impl IntoIterator<Item = S>,
    ) -> Self {
        Node {
            name: name.into(),
            op,
            inputs: inputs.into_iter().map(Into::into).collect(),
            outputs: outputs.into_iter().map(Into::into).collect(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_float(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(*v as f64),
            AttrValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    /// Reads an integer-list attribute; a scalar is broadcast to `len` entries.
    pub fn attr_ints(&self, key: &str, len: usize) -> Option<Vec<i64>> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(vec![*v; len]),
            AttrValue::Ints(v) => Some(v.clone()),
            _ => None,
        }
    }
}

/// Operator DAG with tensor declarations and optional attached weight data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    tensors: Vec<TensorSpec>,
    index: HashMap<String, usize>,
    weights: Vec<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    nodes: Vec<Node>,
    weight_data: BTreeMap<String, Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_tensor(&mut self, spec: TensorSpec) -> &mut Self {
        self.index
            .entry(spec.name.clone())
            .or_insert(self.tensors.len());
        self.tensors.push(spec);
        self
    }

    pub fn add_input(&mut self, spec: TensorSpec) -> &mut Self {
        self.inputs.push(spec.name.clone());
        self.add_tensor(spec)
    }

    pub fn add_weight(&mut self, spec: TensorSpec, data: Option<Tensor>) -> &mut Self {
        self.weights.push(spec.name.clone());
        if let Some(t) = data {
            self.weight_data.insert(spec.name.clone(), t);
        }
        self.add_tensor(spec)
    }

    pub fn add_node(&mut self, node: Node) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn mark_output(&mut self, name: impl Into<String>) -> &mut Self {
        self.outputs.push(name.into());
        self
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut TensorSpec> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Like [`Graph::tensor`] but reports the referencing node on failure.
    pub fn spec_for(&self, node: &str, name: &str) -> Result<&TensorSpec> {
        self.tensor(name)
            .ok_or_else(|| Error::shape(node, format!("undeclared tensor `{name}`")))
    }

    pub fn weights(&self) -> &[String] {
        &self.weights
    }

    pub fn is_weight(&self, name: &str) -> bool {
        self.weights.iter().any(|w| w == name)
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn weight_data(&self, name: &str) -> Option<&Tensor> {
        self.weight_data.get(name)
    }

    pub fn weight_data_map(&self) -> &BTreeMap<String, Tensor> {
        &self.weight_data
    }

    pub fn attach_weight(&mut self, name: impl Into<String>, data: Tensor) {
        self.weight_data.insert(name.into(), data);
    }

    /// Map from tensor name to the index of the node producing it.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for out in &node.outputs {
                map.entry(out.as_str()).or_insert(i);
            }
        }
        map
    }

    /// Map from tensor name to the indices of consuming nodes, in node order.
    /// A node reading the same tensor twice appears twice.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                map.entry(inp.as_str()).or_default().push(i);
            }
        }
        map
    }

    /// Producer-to-consumer adjacency between node indices (deduplicated, sorted).
    pub fn successors(&self) -> Vec<Vec<usize>> {
        let producers = self.producers();
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if let Some(&p) = producers.get(inp.as_str()) {
                    succ[p].push(i);
                }
            }
        }
        for s in &mut succ {
            s.sort_unstable();
            s.dedup();
        }
        succ
    }

    /// Topological order of node indices. Among ready nodes the one declared
    /// first is scheduled first, so the order is deterministic.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let succ = self.successors();
        let mut indeg = vec![0usize; self.nodes.len()];
        for s in &succ {
            for &j in s {
                indeg[j] += 1;
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..self.nodes.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let diags = validate_graph(self);
            return Err(Error::Validation(diags));
        }
        Ok(order)
    }

    /// Nodes in topological order.
    pub fn sorted_nodes(&self) -> Result<Vec<&Node>> {
        Ok(self
            .topo_order()?
            .into_iter()
            .map(|i| &self.nodes[i])
            .collect())
    }

    /// Total bytes of all weight tensors at their declared dtype.
    pub fn weight_bytes(&self) -> u64 {
        self.weights
            .iter()
            .filter_map(|w| self.tensor(w))
            .map(TensorSpec::bytes)
            .sum()
    }

    pub fn param_count(&self) -> u64 {
        self.weights
            .iter()
            .filter_map(|w| self.tensor(w))
            .map(TensorSpec::numel)
            .sum()
    }
}
