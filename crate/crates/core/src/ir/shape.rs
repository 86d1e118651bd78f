//! Shape inference rules for every op.

use crate::error::{Error, Result};
use crate::ir::{Graph, Node, OpType};

/// Convolution geometry derived from input/weight dims and node attrs.
/// Works for 2-D (`[B,C,H,W]`) and 3-D (`[B,C,D,H,W]`) inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub in_spatial: Vec<usize>,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
    pub out_spatial: Vec<usize>,
}

impl ConvGeometry {
    pub fn from_dims(
        node: &str,
        input: &[usize],
        weight: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
        groups: usize,
    ) -> Result<Self> {
        if input.len() < 4 || input.len() > 5 {
            return Err(Error::shape(node, format!("conv input must be 4-D or 5-D, got {input:?}")));
        }
        let nsp = input.len() - 2;
        if weight.len() != input.len() {
            return Err(Error::shape(node, format!("conv weight rank {weight:?} does not match input {input:?}")));
        }
        if kernel.len() != nsp || stride.len() != nsp || pad.len() != nsp {
            return Err(Error::shape(node, format!("kernel/stride/pad need {nsp} entries")));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::shape(node, "stride must be positive"));
        }
        let (batch, cin) = (input[0], input[1]);
        let cout = weight[0];
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                node,
                format!("groups {groups} must divide input channels {cin} and output channels {cout}"),
            ));
        }
        if weight[1] != cin / groups {
            return Err(Error::shape(
                node,
                format!("weight expects {} channels per group, input gives {}", weight[1], cin / groups),
            ));
        }
        if &weight[2..] != kernel {
            return Err(Error::shape(
                node,
                format!("kernel attr {kernel:?} disagrees with weight dims {:?}", &weight[2..]),
            ));
        }
        let in_spatial = input[2..].to_vec();
        let mut out_spatial = Vec::with_capacity(nsp);
        for i in 0..nsp {
            let padded = in_spatial[i] + 2 * pad[i];
            if padded < kernel[i] {
                return Err(Error::shape(node, format!("kernel {kernel:?} larger than padded input")));
            }
            out_spatial.push((padded - kernel[i]) / stride[i] + 1);
        }
        Ok(ConvGeometry {
            batch,
            in_channels: cin,
            out_channels: cout,
            groups,
            in_spatial,
            kernel: kernel.to_vec(),
            stride: stride.to_vec(),
            pad: pad.to_vec(),
            out_spatial,
        })
    }

    /// GEMM rows: `B * prod(out_spatial)`.
    pub fn m(&self) -> usize {
        self.batch * self.out_spatial.iter().product::<usize>()
    }

    /// Reduction length per group: `C_i/G * prod(kernel)`.
    pub fn k_per_group(&self) -> usize {
        self.in_channels / self.groups * self.kernel.iter().product::<usize>()
    }

    /// Output channels per group.
    pub fn n_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn output_dims(&self) -> Vec<usize> {
        let mut d = vec![self.batch, self.out_channels];
        d.extend(&self.out_spatial);
        d
    }

    pub fn input_dims(&self) -> Vec<usize> {
        let mut d = vec![self.batch, self.in_channels];
        d.extend(&self.in_spatial);
        d
    }
}

fn usize_list(node: &Node, key: &str, len: usize, default: usize) -> Result<Vec<usize>> {
    match node.attr_ints(key, len) {
        None => Ok(vec![default; len]),
        Some(v) if v.len() == len && v.iter().all(|&x| x >= 0) => {
            Ok(v.into_iter().map(|x| x as usize).collect())
        }
        Some(v) => Err(Error::shape(&node.name, format!("attr `{key}` = {v:?} needs {len} non-negative entries"))),
    }
}

/// Conv geometry for a node whose input and weight dims are known.
pub fn conv_geometry(node: &Node, g: &Graph) -> Result<ConvGeometry> {
    let x = &g.spec_for(&node.name, &node.inputs[0])?.dims;
    let w = &g.spec_for(&node.name, &node.inputs[1])?.dims;
    if x.len() < 3 {
        return Err(Error::shape(&node.name, format!("conv input {x:?} has no spatial dims")));
    }
    let nsp = x.len() - 2;
    let kernel = usize_list(node, "kernel", nsp, 0)?;
    let stride = usize_list(node, "stride", nsp, 1)?;
    let pad = usize_list(node, "pad", nsp, 0)?;
    let groups = node.attr_int("group").unwrap_or(1);
    if groups < 1 {
        return Err(Error::shape(&node.name, "group must be >= 1"));
    }
    ConvGeometry::from_dims(&node.name, x, w, &kernel, &stride, &pad, groups as usize)
}

fn norm_axis(node: &Node, axis: i64, rank: usize) -> Result<usize> {
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    if a < 0 || a as usize >= rank.max(1) {
        return Err(Error::shape(&node.name, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast(node: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(node, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Output dims for one node given its input dims.
pub(crate) fn node_output_dims(node: &Node, g: &Graph) -> Result<Vec<Vec<usize>>> {
    let name = node.name.as_str();
    let dims = |i: usize| -> Result<&Vec<usize>> {
        let spec = g.spec_for(name, &node.inputs[i])?;
        if !spec.has_dims() {
            return Err(Error::shape(name, format!("input `{}` has no dims yet", spec.name)));
        }
        Ok(&spec.dims)
    };
    let out = match node.op {
        OpType::FC => {
            let x = dims(0)?;
            let w = dims(1)?;
            if x.len() < 2 {
                return Err(Error::shape(name, format!("FC input must be at least 2-D, got {x:?}")));
            }
            let m = x[0];
            let k: usize = x[1..].iter().product();
            if w.len() != 2 || w[1] != k {
                return Err(Error::shape(
                    name,
                    format!("FC inner dims disagree: X is {x:?} (K={k}), W must be [N,{k}] but is {w:?}"),
                ));
            }
            if node.inputs.len() == 3 {
                let b = dims(2)?;
                if b.as_slice() != [w[0]] {
                    return Err(Error::shape(name, format!("FC bias {b:?} must be [{}]", w[0])));
                }
            }
            vec![vec![m, w[0]]]
        }
        OpType::Conv => {
            let geo = conv_geometry(node, g)?;
            if node.inputs.len() == 3 {
                let b = dims(2)?;
                if b.as_slice() != [geo.out_channels] {
                    return Err(Error::shape(name, format!("Conv bias {b:?} must be [{}]", geo.out_channels)));
                }
            }
            vec![geo.output_dims()]
        }
        OpType::SparseLengthsSum => {
            let table = dims(0)?;
            let idx = dims(1)?;
            let lengths = dims(2)?;
            if table.len() != 2 || idx.len() != 1 || lengths.len() != 1 {
                return Err(Error::shape(
                    name,
                    format!("SparseLengthsSum expects table [R,D], indices [L], lengths [S]; got {table:?}, {idx:?}, {lengths:?}"),
                ));
            }
            vec![vec![lengths[0], table[1]]]
        }
        OpType::Concat => {
            let first = dims(0)?.clone();
            let axis = norm_axis(node, node.attr_int("axis").unwrap_or(1), first.len())?;
            let mut out = first.clone();
            out[axis] = 0;
            for i in 0..node.inputs.len() {
                let d = dims(i)?;
                if d.len() != first.len()
                    || d.iter().zip(&first).enumerate().any(|(j, (a, b))| j != axis && a != b)
                {
                    return Err(Error::shape(name, format!("Concat inputs {first:?} and {d:?} disagree off axis {axis}")));
                }
                out[axis] += d[axis];
            }
            vec![out]
        }
        OpType::Split => {
            let x = dims(0)?;
            let axis = norm_axis(node, node.attr_int("axis").unwrap_or(1), x.len())?;
            let parts = node.outputs.len();
            let sizes: Vec<usize> = match node.attr_ints("split", parts) {
                Some(s) => s.into_iter().map(|v| v.max(0) as usize).collect(),
                None => {
                    if x[axis] % parts != 0 {
                        return Err(Error::shape(name, format!("cannot split {} evenly into {parts}", x[axis])));
                    }
                    vec![x[axis] / parts; parts]
                }
            };
            if sizes.len() != parts || sizes.iter().sum::<usize>() != x[axis] || sizes.contains(&0) {
                return Err(Error::shape(name, format!("split sizes {sizes:?} do not partition {}", x[axis])));
            }
            sizes
                .into_iter()
                .map(|s| {
                    let mut d = x.clone();
                    d[axis] = s;
                    d
                })
                .collect()
        }
        OpType::Flatten => {
            let x = dims(0)?;
            let axis = node.attr_int("axis").unwrap_or(1);
            if axis < 0 || axis as usize > x.len() {
                return Err(Error::shape(name, format!("flatten axis {axis} invalid for {x:?}")));
            }
            let a = axis as usize;
            vec![vec![x[..a].iter().product(), x[a..].iter().product()]]
        }
        OpType::BatchMatMul => {
            let a = dims(0)?;
            let b = dims(1)?;
            if a.len() < 2 || b.len() < 2 {
                return Err(Error::shape(name, "BatchMatMul operands must be at least 2-D"));
            }
            let ta = node.attr_int("trans_a").unwrap_or(0) != 0;
            let tb = node.attr_int("trans_b").unwrap_or(0) != 0;
            let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
            let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
            let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k1 != k2 {
                return Err(Error::shape(name, format!("BatchMatMul reduction dims disagree: {a:?} x {b:?}")));
            }
            let batch_a = &a[..a.len() - 2];
            let batch_b = &b[..b.len() - 2];
            if batch_a != batch_b {
                return Err(Error::shape(name, format!("BatchMatMul batch dims {batch_a:?} vs {batch_b:?}")));
            }
            let mut out = batch_a.to_vec();
            out.extend([m, n]);
            vec![out]
        }
        OpType::BatchGather => {
            let data = dims(0)?;
            let idx = dims(1)?;
            if data.len() < 2 {
                return Err(Error::shape(name, "BatchGather data must be at least 2-D"));
            }
            let mut out = vec![data[0]];
            out.extend(idx.iter());
            out.extend(&data[2..]);
            vec![out]
        }
        OpType::Relu | OpType::Clip | OpType::Softmax => vec![dims(0)?.clone()],
        OpType::Add | OpType::Mul => vec![broadcast(name, dims(0)?, dims(1)?)?],
        OpType::Sum => {
            let first = dims(0)?.clone();
            for i in 1..node.inputs.len() {
                if dims(i)? != &first {
                    return Err(Error::shape(name, "Sum inputs must have identical dims"));
                }
            }
            vec![first]
        }
        OpType::SpatialBN => {
            let x = dims(0)?;
            if x.len() < 2 {
                return Err(Error::shape(name, "SpatialBN input needs a channel dim"));
            }
            for i in 1..5 {
                if dims(i)?.as_slice() != [x[1]] {
                    return Err(Error::shape(name, format!("SpatialBN param {} must be [{}]", node.inputs[i], x[1])));
                }
            }
            vec![x.clone()]
        }
    };
    Ok(out)
}

/// Fills in the dims of every intermediate tensor. Tensors that already
/// declare dims must agree with the inferred ones.
pub fn infer_shapes(g: &Graph) -> Result<Graph> {
    let mut out = g.clone();
    for idx in g.topo_order()? {
        let node = &g.nodes()[idx];
        let shapes = node_output_dims(node, &out)?;
        for (tname, dims) in node.outputs.iter().zip(shapes) {
            let spec = out
                .tensor_mut(tname)
                .ok_or_else(|| Error::shape(&node.name, format!("undeclared output `{tname}`")))?;
            if spec.has_dims() && spec.dims != dims {
                return Err(Error::shape(
                    &node.name,
                    format!("`{tname}` declared {:?} but inferred {dims:?}", spec.dims),
                ));
            }
            spec.dims = dims;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, TensorSpec};

    fn conv_graph(cin: usize, hw: usize, cout: usize, k: usize, stride: i64, pad: i64, group: i64) -> Graph {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![1, cin, hw, hw], DType::F32))
            .add_weight(
                TensorSpec::new("w", vec![cout, cin / group as usize, k, k], DType::F32),
                None,
            )
            .add_tensor(TensorSpec::new("y", vec![], DType::F32))
            .add_node(
                Node::new("conv", OpType::Conv, ["x", "w"], ["y"])
                    .with_attr("kernel", vec![k as i64, k as i64])
                    .with_attr("stride", stride)
                    .with_attr("pad", pad)
                    .with_attr("group", group),
            )
            .mark_output("y");
        g
    }

    #[test]
    fn conv_output_uses_floor_formula() {
        let g = infer_shapes(&conv_graph(3, 224, 64, 7, 2, 3, 1)).unwrap();
        assert_eq!(g.tensor("y").unwrap().dims, vec![1, 64, 112, 112]);
    }

    #[test]
    fn group_conv_has_per_group_width() {
        let g = conv_graph(16, 8, 16, 3, 1, 1, 4);
        let geo = conv_geometry(&g.nodes()[0], &g).unwrap();
        assert_eq!(geo.in_channels / geo.groups, 4);
        assert_eq!(geo.n_per_group(), 4);
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor("y").unwrap().dims, vec![1, 16, 8, 8]);
    }

    #[test]
    fn groups_must_divide_channels() {
        let mut g = conv_graph(16, 8, 16, 3, 1, 1, 4);
        g.nodes[0].attrs.insert("group".into(), 3i64.into());
        assert!(matches!(infer_shapes(&g), Err(Error::Shape { .. })));
    }

    #[test]
    fn fc_inner_dim_mismatch() {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![10, 512], DType::F32))
            .add_weight(TensorSpec::new("w", vec![512, 256], DType::F32), None)
            .add_tensor(TensorSpec::new("y", vec![], DType::F32))
            .add_node(Node::new("fc", OpType::FC, ["x", "w"], ["y"]));
        let err = infer_shapes(&g).unwrap_err().to_string();
        assert!(err.contains("inner dims"), "{err}");
    }

    #[test]
    fn three_d_conv() {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![2, 4, 8, 16, 16], DType::F32))
            .add_weight(TensorSpec::new("w", vec![8, 4, 3, 3, 3], DType::F32), None)
            .add_tensor(TensorSpec::new("y", vec![], DType::F32))
            .add_node(
                Node::new("c", OpType::Conv, ["x", "w"], ["y"])
                    .with_attr("kernel", vec![3, 3, 3])
                    .with_attr("stride", vec![1, 2, 2])
                    .with_attr("pad", 1),
            );
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor("y").unwrap().dims, vec![2, 8, 8, 8, 8]);
    }

    #[test]
    fn broadcasting() {
        assert_eq!(broadcast("n", &[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
        assert!(broadcast("n", &[4, 2], &[3]).is_err());
    }

    #[test]
    fn split_and_concat_round_trip_dims() {
        let mut g = Graph::new();
        g.add_input(TensorSpec::new("x", vec![2, 6], DType::F32))
            .add_tensor(TensorSpec::new("a", vec![], DType::F32))
            .add_tensor(TensorSpec::new("b", vec![], DType::F32))
            .add_tensor(TensorSpec::new("c", vec![], DType::F32))
            .add_node(Node::new("s", OpType::Split, ["x"], ["a", "b"]).with_attr("split", vec![2, 4]))
            .add_node(Node::new("k", OpType::Concat, ["b", "a"], ["c"]));
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor("a").unwrap().dims, vec![2, 2]);
        assert_eq!(g.tensor("b").unwrap().dims, vec![2, 4]);
        assert_eq!(g.tensor("c").unwrap().dims, vec![2, 6]);
    }
}
