use crate::error::{Error, Result};

/// Outlier residual of an `[N, K]` weight matrix in compressed form: for
/// each output column `n` the nonzero `(k, value)` pairs, `k` strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseResidual {
    n: usize,
    k: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<i32>,
}

impl SparseResidual {
    pub fn empty(n: usize, k: usize) -> Self {
        SparseResidual {
            n,
            k,
            offsets: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from raw compressed arrays, checking every structural invariant.
    pub fn new(
        n: usize,
        k: usize,
        offsets: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<i32>,
    ) -> Result<Self> {
        if offsets.len() != n + 1 || offsets[0] != 0 {
            return Err(Error::InvalidArgument(format!(
                "residual needs {} offsets starting at 0",
                n + 1
            )));
        }
        if indices.len() != values.len() || *offsets.last().unwrap() != indices.len() {
            return Err(Error::InvalidArgument(
                "residual offsets, indices and values disagree".into(),
            ));
        }
        for col in 0..n {
            let (lo, hi) = (offsets[col], offsets[col + 1]);
            if lo > hi {
                return Err(Error::InvalidArgument("residual offsets decrease".into()));
            }
            let idx = &indices[lo..hi];
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= k) {
                return Err(Error::InvalidArgument(format!(
                    "residual index {bad} out of range for K={k}"
                )));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "residual indices of column {col} not strictly increasing"
                )));
            }
        }
        Ok(SparseResidual {
            n,
            k,
            offsets,
            indices,
            values,
        })
    }

    /// Compresses a dense row-major `[N, K]` residual, dropping zeros.
    pub fn from_dense(dense: &[i32], n: usize, k: usize) -> Result<Self> {
        if dense.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "dense residual has {} elements, expected {n}x{k}",
                dense.len()
            )));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for row in dense.chunks(k.max(1)).take(n) {
            for (kk, &v) in row.iter().enumerate() {
                if v != 0 {
                    indices.push(kk as u32);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Ok(SparseResidual {
            n,
            k,
            offsets,
            indices,
            values,
        })
    }

    pub fn to_dense(&self) -> Vec<i32> {
        let mut out = vec![0; self.n * self.k];
        for j in 0..self.n {
            for (kk, v) in self.column(j) {
                out[j * self.k + kk as usize] = v;
            }
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzero fraction of the dense matrix.
    pub fn density(&self) -> f64 {
        if self.n * self.k == 0 {
            0.0
        } else {
            self.nnz() as f64 / (self.n * self.k) as f64
        }
    }

    /// `(k, value)` pairs of output column `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (u32, i32)> + '_ {
        let (lo, hi) = (self.offsets[j], self.offsets[j + 1]);
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }
}
