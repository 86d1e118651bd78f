use crate::error::{Error, Result};
use crate::kernels::SparseResidual;

/// Default 7-bit window for the dense part.
pub const MAIN_RANGE: (i32, i32) = (-64, 63);

/// `W = main + outliers` with `main` clamped to a narrow window and the
/// residual kept sparse along the reduction dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSplit {
    pub main: Vec<i8>,
    pub outliers: SparseResidual,
    /// Fraction of entries with a nonzero residual.
    pub density: f64,
}

/// Splits an i8 weight matrix `[N, K]` at the 7-bit boundary.
pub fn split_outliers(wq: &[i8], n: usize, k: usize) -> Result<OutlierSplit> {
    let wide: Vec<i32> = wq.iter().map(|&v| v as i32).collect();
    split_outliers_wide(&wide, n, k, MAIN_RANGE)
}

/// Splits integer weights of any width. Outlier-aware quantization uses this
/// with codes beyond the i8 range, which the i32 residual carries exactly.
pub fn split_outliers_wide(wq: &[i32], n: usize, k: usize, window: (i32, i32)) -> Result<OutlierSplit> {
    let (lo, hi) = window;
    if lo > hi || lo < i8::MIN as i32 || hi > i8::MAX as i32 {
        return Err(Error::Quant(format!("main window [{lo}, {hi}] must lie within i8")));
    }
    if wq.len() != n * k {
        return Err(Error::ShapeMismatch(format!("{} weights for [{n}, {k}]", wq.len())));
    }
    let main: Vec<i8> = wq.iter().map(|&v| v.clamp(lo, hi) as i8).collect();
    let residual: Vec<i32> = wq.iter().zip(&main).map(|(&v, &m)| v - m as i32).collect();
    let outliers = SparseResidual::from_dense(&residual, n, k)?;
    let density = outliers.density();
    Ok(OutlierSplit {
        main,
        outliers,
        density,
    })
}
