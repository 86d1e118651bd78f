//! f32 reference implementations of the non-GEMM operators.

use crate::error::{Error, Result};
use crate::ir::{Node, Tensor};

fn norm_axis(node: &Node, axis: i64, rank: usize) -> Result<usize> {
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(Error::exec(&node.name, format!("axis {axis} invalid for rank {rank}")));
    }
    Ok(a as usize)
}

fn f32_of<'a>(node: &Node, t: &'a Tensor) -> Result<&'a [f32]> {
    t.as_f32()
        .ok_or_else(|| Error::exec(&node.name, format!("expected f32 input, got {}", t.dtype())))
}

pub(crate) fn relu(node: &Node, x: &Tensor) -> Result<Tensor> {
    let v = f32_of(node, x)?.iter().map(|&a| a.max(0.0)).collect();
    Tensor::from_f32(x.dims().to_vec(), v)
}

pub(crate) fn clip(node: &Node, x: &Tensor) -> Result<Tensor> {
    let lo = node.attr_float("min").unwrap_or(f64::NEG_INFINITY) as f32;
    let hi = node.attr_float("max").unwrap_or(f64::INFINITY) as f32;
    let v = f32_of(node, x)?.iter().map(|&a| a.max(lo).min(hi)).collect();
    Tensor::from_f32(x.dims().to_vec(), v)
}

/// Numpy-style broadcasting binary op.
pub(crate) fn broadcast_binary(
    node: &Node,
    a: &Tensor,
    b: &Tensor,
    out_dims: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let (av, bv) = (f32_of(node, a)?, f32_of(node, b)?);
    let rank = out_dims.len();
    let strides = |dims: &[usize]| -> Vec<usize> {
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..dims.len()).rev() {
            let o = rank - dims.len() + i;
            s[o] = if dims[i] == 1 { 0 } else { acc };
            acc *= dims[i];
        }
        s
    };
    let (sa, sb) = (strides(a.dims()), strides(b.dims()));
    let numel: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        out.push(f(av[ia], bv[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_f32(out_dims.to_vec(), out)
}

pub(crate) fn sum(node: &Node, xs: &[&Tensor]) -> Result<Tensor> {
    let mut acc = f32_of(node, xs[0])?.to_vec();
    for x in &xs[1..] {
        for (a, &b) in acc.iter_mut().zip(f32_of(node, x)?) {
            *a += b;
        }
    }
    Tensor::from_f32(xs[0].dims().to_vec(), acc)
}

/// `y = (x - mean) / sqrt(var + epsilon) * scale + bias`, per channel (axis 1).
pub(crate) fn spatial_bn(node: &Node, xs: &[&Tensor]) -> Result<Tensor> {
    let x = f32_of(node, xs[0])?;
    let params: Vec<Vec<f32>> = xs[1..5].iter().map(|t| t.to_f32_vec()).collect();
    let (scale, bias, mean, var) = (&params[0], &params[1], &params[2], &params[3]);
    let eps = node.attr_float("epsilon").unwrap_or(1e-5) as f32;
    let dims = xs[0].dims();
    let c = dims[1];
    let inner: usize = dims[2..].iter().product();
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let ch = (i / inner) % c;
        out.push((v - mean[ch]) / (var[ch] + eps).sqrt() * scale[ch] + bias[ch]);
    }
    Tensor::from_f32(dims.to_vec(), out)
}

/// Softmax over the flattened trailing dims starting at `axis` (default 1).
pub(crate) fn softmax(node: &Node, x: &Tensor) -> Result<Tensor> {
    let v = f32_of(node, x)?;
    let axis = norm_axis(node, node.attr_int("axis").unwrap_or(1), x.dims().len())?;
    let inner: usize = x.dims()[axis..].iter().product();
    let mut out = Vec::with_capacity(v.len());
    for row in v.chunks(inner.max(1)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = row.iter().map(|&a| ((a - m) as f64).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|&a| (a / s) as f32));
    }
    Tensor::from_f32(x.dims().to_vec(), out)
}

pub(crate) fn concat(node: &Node, xs: &[&Tensor], out_dims: &[usize]) -> Result<Tensor> {
    let rank = out_dims.len();
    let axis = norm_axis(node, node.attr_int("axis").unwrap_or(1), rank)?;
    let outer: usize = out_dims[..axis].iter().product();
    let mut out = Vec::with_capacity(out_dims.iter().product());
    let parts: Vec<(&[f32], usize)> = xs
        .iter()
        .map(|t| Ok((f32_of(node, t)?, t.dims()[axis..].iter().product::<usize>())))
        .collect::<Result<_>>()?;
    for o in 0..outer {
        for (data, block) in &parts {
            out.extend_from_slice(&data[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_f32(out_dims.to_vec(), out)
}

pub(crate) fn split(node: &Node, x: &Tensor, out_dims: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let v = f32_of(node, x)?;
    let rank = x.dims().len();
    let axis = norm_axis(node, node.attr_int("axis").unwrap_or(1), rank)?;
    let outer: usize = x.dims()[..axis].iter().product();
    let in_block: usize = x.dims()[axis..].iter().product();
    let mut offset = 0;
    let mut outs = Vec::with_capacity(out_dims.len());
    for d in out_dims {
        let block: usize = d[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * block);
        for o in 0..outer {
            data.extend_from_slice(&v[o * in_block + offset..o * in_block + offset + block]);
        }
        offset += block;
        outs.push(Tensor::from_f32(d.clone(), data)?);
    }
    Ok(outs)
}

/// Batched `A·B` with optional transposes; sums run over `k` ascending.
pub(crate) fn batch_matmul(node: &Node, a: &Tensor, b: &Tensor, out_dims: &[usize]) -> Result<Tensor> {
    let (av, bv) = (f32_of(node, a)?, f32_of(node, b)?);
    let ta = node.attr_int("trans_a").unwrap_or(0) != 0;
    let tb = node.attr_int("trans_b").unwrap_or(0) != 0;
    let ad = a.dims();
    let bd = b.dims();
    let (ar, ac) = (ad[ad.len() - 2], ad[ad.len() - 1]);
    let (br, bc) = (bd[bd.len() - 2], bd[bd.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let batch: usize = ad[..ad.len() - 2].iter().product();
    let mut out = vec![0f32; batch * m * n];
    for bi in 0..batch {
        let ab = &av[bi * ar * ac..(bi + 1) * ar * ac];
        let bb = &bv[bi * br * bc..(bi + 1) * br * bc];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0f32;
                for kk in 0..k {
                    let x = if ta { ab[kk * ac + i] } else { ab[i * ac + kk] };
                    let y = if tb { bb[j * bc + kk] } else { bb[kk * bc + j] };
                    s += x * y;
                }
                out[(bi * m + i) * n + j] = s;
            }
        }
    }
    Tensor::from_f32(out_dims.to_vec(), out)
}

/// `out[b, j..., rest] = data[b, idx[j...], rest]`.
pub(crate) fn batch_gather(node: &Node, data: &Tensor, idx: &Tensor, out_dims: &[usize]) -> Result<Tensor> {
    let v = f32_of(node, data)?;
    let ids = idx
        .to_index_vec()
        .ok_or_else(|| Error::exec(&node.name, "BatchGather indices must be integers"))?;
    let d = data.dims();
    let rows = d[1];
    let rest: usize = d[2..].iter().product();
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for b in 0..d[0] {
        for &i in &ids {
            if i < 0 || i as usize >= rows {
                return Err(Error::exec(&node.name, format!("gather index {i} out of range {rows}")));
            }
            let base = (b * rows + i as usize) * rest;
            out.extend_from_slice(&v[base..base + rest]);
        }
    }
    Tensor::from_f32(out_dims.to_vec(), out)
}
