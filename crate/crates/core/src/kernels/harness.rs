//! Seeded GEMM problems for benchmarking the kernels.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    f32_slice_to_fp16, gemm_fp16w, gemm_fp32, gemm_u8i8_acc16, gemm_u8i8_acc32_raw, pack_weights, OutputPipeline,
    PackedMatrix, TileConfig, DEFAULT_SPILL_PERIOD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemmKernel {
    Fp32,
    Fp16w,
    I8Acc32,
    I8Acc16,
}

impl GemmKernel {
    pub const ALL: [GemmKernel; 4] = [GemmKernel::Fp32, GemmKernel::Fp16w, GemmKernel::I8Acc32, GemmKernel::I8Acc16];

    pub fn name(self) -> &'static str {
        match self {
            GemmKernel::Fp32 => "fp32",
            GemmKernel::Fp16w => "fp16w",
            GemmKernel::I8Acc32 => "i8acc32",
            GemmKernel::I8Acc16 => "i8acc16",
        }
    }
}

impl fmt::Display for GemmKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GemmKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GemmKernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown kernel `{s}` (fp32, fp16w, i8acc32, i8acc16)")))
    }
}

/// `2NMK / (NK + MK)`: operations per element of the two operands.
pub fn gemm_intensity(m: usize, n: usize, k: usize) -> f64 {
    let (m, n, k) = (m as f64, n as f64, k as f64);
    2.0 * n * m * k / (n * k + m * k)
}

enum Operands {
    F32 { a: Vec<f32>, b: PackedMatrix<f32> },
    F16 { a: Vec<f32>, b: PackedMatrix<u16> },
    I8 { a: Vec<u8>, b: PackedMatrix<i8>, acc16: bool },
}

/// Random operands packed for one kernel.
pub struct GemmProblem {
    pub kernel: GemmKernel,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    ops: Operands,
}

impl GemmProblem {
    pub fn new(kernel: GemmKernel, m: usize, n: usize, k: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("GEMM dims must be positive, got {m}x{n}x{k}")));
        }
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let tiles = TileConfig::default();
        let ops = match kernel {
            GemmKernel::Fp32 | GemmKernel::Fp16w => {
                let a: Vec<f32> = (0..m * k).map(|_| r.gen_range(-1.0..1.0)).collect();
                let w: Vec<f32> = (0..n * k).map(|_| r.gen_range(-1.0..1.0)).collect();
                if kernel == GemmKernel::Fp32 {
                    Operands::F32 { a, b: pack_weights(&w, n, k, tiles)? }
                } else {
                    Operands::F16 { a, b: pack_weights(&f32_slice_to_fp16(&w), n, k, tiles)? }
                }
            }
            GemmKernel::I8Acc32 | GemmKernel::I8Acc16 => {
                let acc16 = kernel == GemmKernel::I8Acc16;
                let a: Vec<u8> = (0..m * k).map(|_| r.gen()).collect();
                let w: Vec<i8> = (0..n * k)
                    .map(|_| if acc16 { r.gen_range(-64..=63) } else { r.gen() })
                    .collect();
                Operands::I8 { a, b: pack_weights(&w, n, k, tiles)?, acc16 }
            }
        };
        Ok(GemmProblem { kernel, m, n, k, ops })
    }

    /// Runs the kernel once and returns a checksum of the result.
    pub fn run(&self) -> Result<u64> {
        let pipe = OutputPipeline::default();
        let sum = match &self.ops {
            Operands::F32 { a, b } => checksum_f32(&gemm_fp32(a, self.m, b, &pipe)?),
            Operands::F16 { a, b } => checksum_f32(&gemm_fp16w(a, self.m, b, &pipe)?),
            Operands::I8 { a, b, acc16: false } => checksum_i32(&gemm_u8i8_acc32_raw(a, self.m, 0, b, &[0])?),
            Operands::I8 { a, b, acc16: true } => {
                checksum_i32(&gemm_u8i8_acc16(a, self.m, 0, b, &[0], DEFAULT_SPILL_PERIOD)?.acc)
            }
        };
        Ok(sum)
    }

    pub fn ops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64
    }

    /// Median wall time of `repeats` runs after one warm-up run.
    pub fn time(&self, repeats: usize) -> Result<f64> {
        self.run()?;
        let mut t = Vec::with_capacity(repeats.max(1));
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            std::hint::black_box(self.run()?);
            t.push(start.elapsed().as_secs_f64());
        }
        t.sort_by(f64::total_cmp);
        Ok(t[t.len() / 2])
    }
}

fn checksum_f32(v: &[f32]) -> u64 {
    v.iter().fold(0xcbf29ce484222325, |h, x| (h ^ x.to_bits() as u64).wrapping_mul(0x100000001b3))
}

fn checksum_i32(v: &[i32]) -> u64 {
    v.iter().fold(0xcbf29ce484222325, |h, x| (h ^ *x as u32 as u64).wrapping_mul(0x100000001b3))
}
