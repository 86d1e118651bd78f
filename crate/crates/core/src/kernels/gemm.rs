//! Dense GEMM kernels over pre-packed weights: `C[M, N] = A[M, K] · Wᵀ`.
//!
//! Every kernel partitions output rows across workers; a row is always
//! computed by one worker with the same arithmetic sequence, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::fp16::fp16_to_fp32;
use crate::kernels::pack::PackedMatrix;
use crate::kernels::pipeline::{
    apply_output_pipeline, apply_output_pipeline_f32, GemmOutput, OutputPipeline,
};
use crate::kernels::sparse::SparseResidual;

/// Largest reduction length for which `Σ (a - zp_a)(w - zp_w)` is
/// guaranteed to fit in an i32 (`255 * 255 * K < 2^31`).
pub const MAX_K_ACC32: usize = 33_025;

/// Below this many multiply-accumulates kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

fn check_a(len: usize, m: usize, k: usize) -> Result<()> {
    if m == 0 || len != m * k {
        return Err(Error::ShapeMismatch(format!(
            "A has {len} elements, expected {m}x{k}"
        )));
    }
    Ok(())
}

fn for_each_row<T: Send>(out: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Reference f32 GEMM. For each output the products are accumulated with
/// `k` ascending within a tile and tiles ascending, i.e. plain ascending `k`.
pub fn gemm_fp32(
    a: &[f32],
    m: usize,
    b: &PackedMatrix<f32>,
    pipeline: &OutputPipeline,
) -> Result<Vec<f32>> {
    let (n, k) = (b.n(), b.k());
    check_a(a.len(), m, k)?;
    let mut c = vec![0f32; m * n];
    for_each_row(&mut c, n, m * n * k, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0f32;
            let mut off = 0;
            for chunk in b.row_chunks(j) {
                for (x, &w) in arow[off..off + chunk.len()].iter().zip(chunk) {
                    acc += x * w;
                }
                off += chunk.len();
            }
            *out = acc;
        }
    });
    apply_output_pipeline_f32(&mut c, n, pipeline)?;
    Ok(c)
}

/// f32 GEMM with weights stored as binary16. Weights are widened exactly
/// on load, so the result equals [`gemm_fp32`] on the widened weights.
pub fn gemm_fp16w(
    a: &[f32],
    m: usize,
    b: &PackedMatrix<u16>,
    pipeline: &OutputPipeline,
) -> Result<Vec<f32>> {
    let (n, k) = (b.n(), b.k());
    check_a(a.len(), m, k)?;
    let mut c = vec![0f32; m * n];
    for_each_row(&mut c, n, m * n * k, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0f32;
            let mut off = 0;
            for chunk in b.row_chunks(j) {
                for (x, &w) in arow[off..off + chunk.len()].iter().zip(chunk) {
                    acc += x * fp16_to_fp32(w);
                }
                off += chunk.len();
            }
            *out = acc;
        }
    });
    apply_output_pipeline_f32(&mut c, n, pipeline)?;
    Ok(c)
}

fn check_quant_args(k: usize, zp_a: i32, zp_w: &[i32], n: usize) -> Result<()> {
    if k > MAX_K_ACC32 {
        return Err(Error::InvalidArgument(format!(
            "K={k} exceeds {MAX_K_ACC32}, the exact i32 accumulation limit"
        )));
    }
    if !(0..=255).contains(&zp_a) {
        return Err(Error::Quant(format!("activation zero point {zp_a} outside u8")));
    }
    if zp_w.len() != 1 && zp_w.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} weight zero points for N={n}",
            zp_w.len()
        )));
    }
    if zp_w.iter().any(|z| !(-128..=127).contains(z)) {
        return Err(Error::Quant("weight zero point outside i8".into()));
    }
    Ok(())
}

#[inline]
fn zp_at(zp_w: &[i32], j: usize) -> i32 {
    if zp_w.len() == 1 {
        zp_w[0]
    } else {
        zp_w[j]
    }
}

/// Zero-point corrected accumulators:
/// `Σ_k a·w − zp_w·rowsum(A) − zp_a·colsum(W) + K·zp_a·zp_w`.
pub fn gemm_u8i8_acc32_raw(
    a: &[u8],
    m: usize,
    zp_a: i32,
    b: &PackedMatrix<i8>,
    zp_w: &[i32],
) -> Result<Vec<i32>> {
    let (n, k) = (b.n(), b.k());
    check_a(a.len(), m, k)?;
    check_quant_args(k, zp_a, zp_w, n)?;
    let col_sums = b
        .col_sums()
        .ok_or_else(|| Error::InvalidArgument("packed i8 matrix lacks column sums".into()))?;
    let mut c = vec![0i32; m * n];
    for_each_row(&mut c, n, m * n * k, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        let row_sum: i32 = arow.iter().map(|&x| x as i32).sum();
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0i32;
            let mut off = 0;
            for chunk in b.row_chunks(j) {
                for (&x, &w) in arow[off..off + chunk.len()].iter().zip(chunk) {
                    acc = acc.wrapping_add(x as i32 * w as i32);
                }
                off += chunk.len();
            }
            let zw = zp_at(zp_w, j);
            *out = acc
                .wrapping_sub(zw.wrapping_mul(row_sum))
                .wrapping_sub(zp_a.wrapping_mul(col_sums[j]))
                .wrapping_add((k as i32).wrapping_mul(zp_a).wrapping_mul(zw));
        }
    });
    Ok(c)
}

/// u8 × i8 GEMM with exact 32-bit accumulation followed by `pipeline`.
pub fn gemm_u8i8_acc32(
    a: &[u8],
    m: usize,
    zp_a: i32,
    b: &PackedMatrix<i8>,
    zp_w: &[i32],
    pipeline: &OutputPipeline,
) -> Result<GemmOutput> {
    let acc = gemm_u8i8_acc32_raw(a, m, zp_a, b, zp_w)?;
    apply_output_pipeline(&acc, b.n(), pipeline)
}

/// Accumulators of the 16-bit path with the number of saturating additions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Acc16Output {
    pub acc: Vec<i32>,
    pub saturations: u64,
}

pub const DEFAULT_SPILL_PERIOD: usize = 256;

/// Emulates i8-acc16: adjacent `k` pairs form exact `u8·i8 + u8·i8` sums
/// (at most `2·255·64 < 2^15` in magnitude for 7-bit weights), which are
/// added into an i16 accumulator with saturation. Every `spill_period`
/// multiply-accumulates the i16 value is spilled into an i32 and reset.
/// Zero-point corrections are applied afterwards in i32.
pub fn gemm_u8i8_acc16(
    a: &[u8],
    m: usize,
    zp_a: i32,
    b_main: &PackedMatrix<i8>,
    zp_w: &[i32],
    spill_period: usize,
) -> Result<Acc16Output> {
    let (n, k) = (b_main.n(), b_main.k());
    check_a(a.len(), m, k)?;
    check_quant_args(k, zp_a, zp_w, n)?;
    if spill_period < 2 || spill_period % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "spill period {spill_period} must be even and >= 2"
        )));
    }
    if let Some(bad) = b_main.storage().iter().find(|&&w| !(-64..=63).contains(&w)) {
        return Err(Error::Quant(format!(
            "main weight {bad} outside the 7-bit range [-64, 63]"
        )));
    }
    let col_sums = b_main
        .col_sums()
        .ok_or_else(|| Error::InvalidArgument("packed i8 matrix lacks column sums".into()))?;

    let mut c = vec![0i32; m * n];
    let mut sat_rows = vec![0u64; m];
    let body = |i: usize, row: &mut [i32], sat: &mut u64| {
        let arow = &a[i * k..(i + 1) * k];
        let row_sum: i32 = arow.iter().map(|&x| x as i32).sum();
        let mut wrow = vec![0i8; k];
        for (j, out) in row.iter_mut().enumerate() {
            b_main.read_row(j, &mut wrow);
            let mut acc32 = 0i32;
            let mut acc16 = 0i16;
            let mut macs = 0usize;
            let mut kk = 0;
            while kk < k {
                let (pair, width) = if kk + 1 < k {
                    (
                        arow[kk] as i32 * wrow[kk] as i32 + arow[kk + 1] as i32 * wrow[kk + 1] as i32,
                        2,
                    )
                } else {
                    (arow[kk] as i32 * wrow[kk] as i32, 1)
                };
                let sum = acc16 as i32 + pair;
                acc16 = if sum > i16::MAX as i32 {
                    *sat += 1;
                    i16::MAX
                } else if sum < i16::MIN as i32 {
                    *sat += 1;
                    i16::MIN
                } else {
                    sum as i16
                };
                macs += width;
                kk += width;
                if macs == spill_period {
                    acc32 += acc16 as i32;
                    acc16 = 0;
                    macs = 0;
                }
            }
            acc32 += acc16 as i32;
            let zw = zp_at(zp_w, j);
            *out = acc32
                .wrapping_sub(zw.wrapping_mul(row_sum))
                .wrapping_sub(zp_a.wrapping_mul(col_sums[j]))
                .wrapping_add((k as i32).wrapping_mul(zp_a).wrapping_mul(zw));
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .zip(sat_rows.par_iter_mut())
            .enumerate()
            .for_each(|(i, (row, sat))| body(i, row, sat));
    } else {
        c.chunks_mut(n)
            .zip(sat_rows.iter_mut())
            .enumerate()
            .for_each(|(i, (row, sat))| body(i, row, sat));
    }
    Ok(Acc16Output {
        acc: c,
        saturations: sat_rows.iter().sum(),
    })
}

/// Exact contribution of the sparse outlier residual:
/// `C[m, n] = Σ_k (A[m, k] − zp_a) · R[n, k]`.
pub fn spmm_outlier(a: &[u8], m: usize, zp_a: i32, r: &SparseResidual) -> Result<Vec<i32>> {
    let (n, k) = (r.n(), r.k());
    check_a(a.len(), m, k)?;
    let mut c = vec![0i32; m * n];
    for (i, row) in c.chunks_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0i32;
            for (kk, v) in r.column(j) {
                acc = acc.wrapping_add((arow[kk as usize] as i32 - zp_a).wrapping_mul(v));
            }
            *out = acc;
        }
    }
    Ok(c)
}
