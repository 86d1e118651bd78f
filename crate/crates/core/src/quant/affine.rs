use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::params::{choose_qparams_minmax, QDtype, QParams};

/// How a tensor is sliced into independently quantized parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QGranularity {
    PerTensor,
    /// One parameter set per index along `axis` (output channel for weights).
    PerChannel { axis: usize },
    /// Consecutive runs of `group_size` indices along `axis` share parameters.
    PerGroup { axis: usize, group_size: usize },
    /// One parameter set per leading-dimension row (embedding tables).
    PerRow,
}

impl QGranularity {
    pub fn name(&self) -> &'static str {
        match self {
            QGranularity::PerTensor => "per_tensor",
            QGranularity::PerChannel { .. } => "per_channel",
            QGranularity::PerGroup { .. } => "per_group",
            QGranularity::PerRow => "per_row",
        }
    }

    /// Number of slices for a tensor of `dims`.
    pub fn slices(&self, dims: &[usize]) -> Result<usize> {
        let axis_len = |axis: usize| {
            dims.get(axis).copied().ok_or_else(|| {
                Error::Quant(format!("axis {axis} invalid for rank-{} tensor", dims.len()))
            })
        };
        match *self {
            QGranularity::PerTensor => Ok(1),
            QGranularity::PerChannel { axis } => axis_len(axis),
            QGranularity::PerGroup { axis, group_size } => {
                let n = axis_len(axis)?;
                if group_size == 0 {
                    return Err(Error::Quant("group size must be positive".into()));
                }
                Ok(n.div_ceil(group_size))
            }
            QGranularity::PerRow => axis_len(0),
        }
    }

    /// Slice index of every element, in row-major order.
    pub fn slice_map(&self, dims: &[usize]) -> Result<Vec<usize>> {
        self.slices(dims)?;
        let numel: usize = dims.iter().product();
        let (axis, group) = match *self {
            QGranularity::PerTensor => return Ok(vec![0; numel]),
            QGranularity::PerChannel { axis } => (axis, 1),
            QGranularity::PerGroup { axis, group_size } => (axis, group_size),
            QGranularity::PerRow => (0, 1),
        };
        let inner: usize = dims[axis + 1..].iter().product();
        Ok((0..numel).map(|i| (i / inner) % dims[axis] / group).collect())
    }
}

fn check(x: &[f32], dims: &[usize]) -> Result<()> {
    if x.len() != dims.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!("{} values for dims {dims:?}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot quantize non-finite values".into()));
    }
    Ok(())
}

/// Min/max parameters for every slice of `x`.
pub fn minmax_params(
    x: &[f32],
    dims: &[usize],
    granularity: QGranularity,
    target: QDtype,
    symmetric: bool,
) -> Result<Vec<QParams>> {
    check(x, dims)?;
    let n = granularity.slices(dims)?;
    let map = granularity.slice_map(dims)?;
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for (&v, &s) in x.iter().zip(&map) {
        lo[s] = lo[s].min(v as f64);
        hi[s] = hi[s].max(v as f64);
    }
    lo.iter()
        .zip(&hi)
        .map(|(&a, &b)| {
            let (a, b) = if a > b { (0.0, 0.0) } else { (a, b) };
            choose_qparams_minmax(a, b, target, symmetric)
        })
        .collect()
}

/// `clamp(round_half_even(x / scale) + zero_point, qmin, qmax)` with the
/// parameters of each element's slice.
pub fn quantize_affine(x: &[f32], dims: &[usize], params: &[QParams], granularity: QGranularity) -> Result<Vec<i32>> {
    check(x, dims)?;
    let n = granularity.slices(dims)?;
    if params.len() != n {
        return Err(Error::Quant(format!(
            "{} parameter sets given, {} granularity needs {n}",
            params.len(),
            granularity.name()
        )));
    }
    let map = granularity.slice_map(dims)?;
    Ok(x.iter().zip(&map).map(|(&v, &s)| params[s].quantize(v)).collect())
}

/// `scale * (q - zero_point)` per element.
pub fn dequantize_affine(q: &[i32], dims: &[usize], params: &[QParams], granularity: QGranularity) -> Result<Vec<f32>> {
    let map = granularity.slice_map(dims)?;
    if map.len() != q.len() || params.len() != granularity.slices(dims)? {
        return Err(Error::ShapeMismatch("quantized data does not match dims/params".into()));
    }
    Ok(q.iter().zip(&map).map(|(&v, &s)| params[s].dequantize(v)).collect())
}

/// Exact squared error `Σ (x - dequant(quant(x)))²`, accumulated in f64.
pub fn quantization_l2_error(x: &[f32], dims: &[usize], params: &[QParams], granularity: QGranularity) -> Result<f64> {
    let q = quantize_affine(x, dims, params, granularity)?;
    let d = dequantize_affine(&q, dims, params, granularity)?;
    Ok(x.iter().zip(&d).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_maps_to_zero_point() {
        for zp in [-5, 0, 17, 128] {
            let q = QParams {
                scale: 0.37,
                zero_point: zp,
                qmin: -128,
                qmax: 255,
                symmetric: false,
            };
            assert_eq!(quantize_affine(&[0.0], &[1], &[q], QGranularity::PerTensor).unwrap(), vec![zp]);
        }
    }

    #[test]
    fn slice_maps() {
        let dims = [2, 3, 2];
        let ch = QGranularity::PerChannel { axis: 1 }.slice_map(&dims).unwrap();
        assert_eq!(ch, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        let grp = QGranularity::PerGroup { axis: 1, group_size: 2 }.slice_map(&dims).unwrap();
        assert_eq!(grp, vec![0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1]);
        let row = QGranularity::PerRow.slice_map(&dims).unwrap();
        assert_eq!(row, vec![0; 6].into_iter().chain(vec![1; 6]).collect::<Vec<_>>());
        assert!(QGranularity::PerChannel { axis: 3 }.slices(&dims).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let q = choose_qparams_minmax(-1.0, 1.0, QDtype::U8, false).unwrap();
        assert!(matches!(
            quantize_affine(&[f32::NAN], &[1], &[q], QGranularity::PerTensor),
            Err(Error::Numeric(_))
        ));
    }
}
