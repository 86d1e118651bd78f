//! Convolution lowered to GEMM through im2col, plus direct depthwise kernels.
//!
//! im2col produces one `[M, Kg]` block per group, laid out `[G][M][Kg]`.
//! Row `m` enumerates `(batch, output position)` with output positions in
//! row-major order; column `kg` enumerates `(input channel within group,
//! kernel offset)` likewise. This matches the `[C_o, C_i/G, k...]` weight
//! layout, so group `g`'s weights are the contiguous rows
//! `g*C_o/G .. (g+1)*C_o/G` of the weight viewed as `[C_o, Kg]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ir::ConvGeometry;
use crate::kernels::gemm::{gemm_fp32, gemm_u8i8_acc32_raw};
use crate::kernels::pack::{PackElement, PackedMatrix, TileConfig};
use crate::kernels::pipeline::{
    apply_output_pipeline, apply_output_pipeline_f32, Bias, GemmOutput, OutputPipeline,
};

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

fn unravel(mut idx: usize, dims: &[usize], out: &mut [usize]) {
    for i in (0..dims.len()).rev() {
        out[i] = idx % dims[i];
        idx /= dims[i];
    }
}

/// Flat input offsets within one channel plane for every
/// `(output position, kernel offset)` pair, `None` where the tap reads padding.
fn tap_map(geo: &ConvGeometry) -> Vec<Option<usize>> {
    let nsp = geo.in_spatial.len();
    let out_pos: usize = geo.out_spatial.iter().product();
    let taps: usize = geo.kernel.iter().product();
    let in_strides = row_major_strides(&geo.in_spatial);
    let mut map = Vec::with_capacity(out_pos * taps);
    let mut oc = vec![0; nsp];
    let mut kc = vec![0; nsp];
    for o in 0..out_pos {
        unravel(o, &geo.out_spatial, &mut oc);
        for t in 0..taps {
            unravel(t, &geo.kernel, &mut kc);
            let mut off = 0usize;
            let mut inside = true;
            for d in 0..nsp {
                let pos = (oc[d] * geo.stride[d] + kc[d]) as isize - geo.pad[d] as isize;
                if pos < 0 || pos as usize >= geo.in_spatial[d] {
                    inside = false;
                    break;
                }
                off += pos as usize * in_strides[d];
            }
            map.push(inside.then_some(off));
        }
    }
    map
}

fn check_input(len: usize, geo: &ConvGeometry) -> Result<()> {
    let expect: usize = geo.input_dims().iter().product();
    if len != expect {
        return Err(Error::ShapeMismatch(format!(
            "conv input has {len} elements, geometry expects {:?}",
            geo.input_dims()
        )));
    }
    Ok(())
}

/// Materializes the lowered input, `[G][M][Kg]`. Padding taps hold `pad_value`
/// (the activation zero point for quantized inputs, `0.0` for float).
pub fn im2col<T: Copy + Send + Sync>(input: &[T], geo: &ConvGeometry, pad_value: T) -> Result<Vec<T>> {
    check_input(input.len(), geo)?;
    let map = tap_map(geo);
    let out_pos: usize = geo.out_spatial.iter().product();
    let taps: usize = geo.kernel.iter().product();
    let plane: usize = geo.in_spatial.iter().product();
    let cpg = geo.in_channels / geo.groups;
    let kg = geo.k_per_group();
    let m = geo.m();
    let mut out = vec![pad_value; geo.groups * m * kg];
    out.par_chunks_mut(kg).enumerate().for_each(|(row, dst)| {
        let g = row / m;
        let r = row % m;
        let (b, o) = (r / out_pos, r % out_pos);
        for c in 0..cpg {
            let base = (b * geo.in_channels + g * cpg + c) * plane;
            let taps_of_o = &map[o * taps..(o + 1) * taps];
            for (t, tap) in taps_of_o.iter().enumerate() {
                if let Some(off) = tap {
                    dst[c * taps + t] = input[base + off];
                }
            }
        }
    });
    Ok(out)
}

/// Packs conv weights `[C_o, C_i/G, k...]` into one matrix per group.
pub fn pack_conv_weights<T: PackElement>(
    w: &[T],
    geo: &ConvGeometry,
    tiles: TileConfig,
) -> Result<Vec<PackedMatrix<T>>> {
    let (npg, kg) = (geo.n_per_group(), geo.k_per_group());
    if w.len() != geo.out_channels * kg {
        return Err(Error::ShapeMismatch(format!(
            "conv weight has {} elements, expected {}x{kg}",
            w.len(),
            geo.out_channels
        )));
    }
    w.chunks(npg * kg)
        .map(|block| PackedMatrix::pack(block, npg, kg, tiles))
        .collect()
}

fn slice_channels<T: Clone>(v: &[T], lo: usize, hi: usize) -> Vec<T> {
    if v.len() == 1 {
        v.to_vec()
    } else {
        v[lo..hi].to_vec()
    }
}

/// Restricts per-channel pipeline parameters to output channels `lo..hi`.
pub fn slice_pipeline(p: &OutputPipeline, lo: usize, hi: usize) -> OutputPipeline {
    OutputPipeline {
        rescale: p.rescale.as_ref().map(|r| slice_channels(r, lo, hi)),
        bias: p.bias.as_ref().map(|b| match b {
            Bias::I32(v) => Bias::I32(v[lo..hi].to_vec()),
            Bias::F32(v) => Bias::F32(v[lo..hi].to_vec()),
        }),
        relu: p.relu,
        terminal: p.terminal.clone(),
    }
}

/// Scatters a `[M, n]` block (rows = batch x positions) into channels
/// `c0..c0+n` of an NC(spatial) output.
fn scatter<T: Copy>(block: &[T], n: usize, c0: usize, geo: &ConvGeometry, out: &mut [T]) {
    let out_pos: usize = geo.out_spatial.iter().product();
    for (r, row) in block.chunks(n).enumerate() {
        let (b, o) = (r / out_pos, r % out_pos);
        for (j, &v) in row.iter().enumerate() {
            out[(b * geo.out_channels + c0 + j) * out_pos + o] = v;
        }
    }
}

fn check_groups<T: PackElement>(packed: &[PackedMatrix<T>], geo: &ConvGeometry) -> Result<()> {
    if packed.len() != geo.groups
        || packed
            .iter()
            .any(|p| p.n() != geo.n_per_group() || p.k() != geo.k_per_group())
    {
        return Err(Error::ShapeMismatch(
            "packed conv weights do not match the geometry".into(),
        ));
    }
    Ok(())
}

/// Float convolution: im2col then one GEMM per group. Output is `[B, C_o, spatial...]`.
pub fn conv_f32(
    input: &[f32],
    geo: &ConvGeometry,
    packed: &[PackedMatrix<f32>],
    pipeline: &OutputPipeline,
) -> Result<Vec<f32>> {
    check_groups(packed, geo)?;
    let cols = im2col(input, geo, 0.0f32)?;
    let (m, kg, npg) = (geo.m(), geo.k_per_group(), geo.n_per_group());
    let mut out = vec![0f32; geo.output_dims().iter().product()];
    for (g, w) in packed.iter().enumerate() {
        let p = slice_pipeline(pipeline, g * npg, (g + 1) * npg);
        let block = gemm_fp32(&cols[g * m * kg..(g + 1) * m * kg], m, w, &p)?;
        scatter(&block, npg, g * npg, geo, &mut out);
    }
    Ok(out)
}

/// Quantized convolution (u8 activations, i8 weights, exact i32
/// accumulation). `zp_w` holds one zero point or one per output channel.
pub fn conv_u8i8(
    input: &[u8],
    zp_a: i32,
    geo: &ConvGeometry,
    packed: &[PackedMatrix<i8>],
    zp_w: &[i32],
    pipeline: &OutputPipeline,
) -> Result<GemmOutput> {
    check_groups(packed, geo)?;
    if !(0..=255).contains(&zp_a) {
        return Err(Error::Quant(format!("activation zero point {zp_a} outside u8")));
    }
    let cols = im2col(input, geo, zp_a as u8)?;
    let (m, kg, npg) = (geo.m(), geo.k_per_group(), geo.n_per_group());
    let mut acc = vec![0i32; m * geo.out_channels];
    for (g, w) in packed.iter().enumerate() {
        let zw = slice_channels(zp_w, g * npg, (g + 1) * npg);
        let block = gemm_u8i8_acc32_raw(&cols[g * m * kg..(g + 1) * m * kg], m, zp_a, w, &zw)?;
        for (r, row) in block.chunks(npg).enumerate() {
            acc[r * geo.out_channels + g * npg..][..npg].copy_from_slice(row);
        }
    }
    let result = apply_output_pipeline(&acc, geo.out_channels, pipeline)?;
    Ok(to_nchw(result, geo))
}

fn to_nchw(result: GemmOutput, geo: &ConvGeometry) -> GemmOutput {
    let total: usize = geo.output_dims().iter().product();
    let c = geo.out_channels;
    match result {
        GemmOutput::F32(v) => {
            let mut out = vec![0f32; total];
            scatter(&v, c, 0, geo, &mut out);
            GemmOutput::F32(out)
        }
        GemmOutput::U8(v) => {
            let mut out = vec![0u8; total];
            scatter(&v, c, 0, geo, &mut out);
            GemmOutput::U8(out)
        }
        GemmOutput::I32(v) => {
            let mut out = vec![0i32; total];
            scatter(&v, c, 0, geo, &mut out);
            GemmOutput::I32(out)
        }
    }
}

fn check_depthwise(geo: &ConvGeometry, weight_len: usize) -> Result<()> {
    if !geo.is_depthwise() {
        return Err(Error::ShapeMismatch(format!(
            "depthwise kernel needs groups == input channels == output channels, got {}/{}/{}",
            geo.groups, geo.in_channels, geo.out_channels
        )));
    }
    let taps: usize = geo.kernel.iter().product();
    if weight_len != geo.out_channels * taps {
        return Err(Error::ShapeMismatch(format!(
            "depthwise weight has {weight_len} elements, expected {}",
            geo.out_channels * taps
        )));
    }
    Ok(())
}

/// Direct depthwise convolution without materializing im2col. Taps are
/// accumulated in kernel order with padding read as `0.0`, the same
/// sequence the GEMM path uses, so results are bit-identical to [`conv_f32`].
pub fn depthwise_conv_f32(
    input: &[f32],
    geo: &ConvGeometry,
    weights: &[f32],
    pipeline: &OutputPipeline,
) -> Result<Vec<f32>> {
    check_input(input.len(), geo)?;
    check_depthwise(geo, weights.len())?;
    let map = tap_map(geo);
    let c = geo.out_channels;
    let taps: usize = geo.kernel.iter().product();
    let plane: usize = geo.in_spatial.iter().product();
    let out_pos: usize = geo.out_spatial.iter().product();
    let mut acc = vec![0f32; geo.m() * c];
    acc.par_chunks_mut(c).enumerate().for_each(|(r, row)| {
        let (b, o) = (r / out_pos, r % out_pos);
        let taps_of_o = &map[o * taps..(o + 1) * taps];
        for (ch, out) in row.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            let w = &weights[ch * taps..(ch + 1) * taps];
            let mut s = 0f32;
            for (tap, &wt) in taps_of_o.iter().zip(w) {
                let x = tap.map_or(0.0, |off| input[base + off]);
                s += x * wt;
            }
            *out = s;
        }
    });
    apply_output_pipeline_f32(&mut acc, c, pipeline)?;
    let mut out = vec![0f32; geo.output_dims().iter().product()];
    scatter(&acc, c, 0, geo, &mut out);
    Ok(out)
}

/// Direct quantized depthwise convolution. Accumulates
/// `Σ (a - zp_a)(w - zp_w)` in i32, equal to the corrected GEMM path.
pub fn depthwise_conv_u8i8(
    input: &[u8],
    zp_a: i32,
    geo: &ConvGeometry,
    weights: &[i8],
    zp_w: &[i32],
    pipeline: &OutputPipeline,
) -> Result<GemmOutput> {
    check_input(input.len(), geo)?;
    check_depthwise(geo, weights.len())?;
    let c = geo.out_channels;
    if zp_w.len() != 1 && zp_w.len() != c {
        return Err(Error::ShapeMismatch(format!("{} weight zero points for {c} channels", zp_w.len())));
    }
    let map = tap_map(geo);
    let taps: usize = geo.kernel.iter().product();
    let plane: usize = geo.in_spatial.iter().product();
    let out_pos: usize = geo.out_spatial.iter().product();
    let mut acc = vec![0i32; geo.m() * c];
    acc.par_chunks_mut(c).enumerate().for_each(|(r, row)| {
        let (b, o) = (r / out_pos, r % out_pos);
        let taps_of_o = &map[o * taps..(o + 1) * taps];
        for (ch, out) in row.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            let zw = if zp_w.len() == 1 { zp_w[0] } else { zp_w[ch] };
            let w = &weights[ch * taps..(ch + 1) * taps];
            let mut s = 0i32;
            for (tap, &wt) in taps_of_o.iter().zip(w) {
                let x = tap.map_or(zp_a, |off| input[base + off] as i32);
                s += (x - zp_a) * (wt as i32 - zw);
            }
            *out = s;
        }
    });
    let result = apply_output_pipeline(&acc, c, pipeline)?;
    Ok(to_nchw(result, geo))
}
