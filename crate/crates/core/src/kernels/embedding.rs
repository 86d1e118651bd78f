use rayon::prelude::*;

use crate::error::{Error, Result};

/// Embedding table stored with one u8 code per entry and a float scale and
/// bias per row: `value = q * scale + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowQuantizedTable {
    pub rows: usize,
    pub dim: usize,
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub biases: Vec<f32>,
}

impl RowQuantizedTable {
    /// Quantizes a row-major `[rows, dim]` f32 table. Per row the scale is
    /// `(max - min) / 255` (1 for a constant row) and the bias is `min`.
    pub fn quantize(data: &[f32], rows: usize, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding table has {} entries, expected {rows}x{dim} with dim >= 1",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding table contains non-finite values".into()));
        }
        let mut codes = Vec::with_capacity(data.len());
        let mut scales = Vec::with_capacity(rows);
        let mut biases = Vec::with_capacity(rows);
        for row in data.chunks(dim) {
            let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let range = hi as f64 - lo as f64;
            let scale = if range > 0.0 { (range / 255.0) as f32 } else { 1.0 };
            let scale = if scale > 0.0 { scale } else { f32::MIN_POSITIVE };
            for &v in row {
                let q = ((v as f64 - lo as f64) / scale as f64).round_ties_even();
                codes.push(q.clamp(0.0, 255.0) as u8);
            }
            scales.push(scale);
            biases.push(lo);
        }
        Ok(RowQuantizedTable {
            rows,
            dim,
            codes,
            scales,
            biases,
        })
    }

    pub fn dequantize_row(&self, r: usize, out: &mut [f32]) {
        let (s, b) = (self.scales[r], self.biases[r]);
        for (o, &q) in out.iter_mut().zip(&self.codes[r * self.dim..(r + 1) * self.dim]) {
            *o = q as f32 * s + b;
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0f32; self.rows * self.dim];
        for r in 0..self.rows {
            self.dequantize_row(r, &mut out[r * self.dim..(r + 1) * self.dim]);
        }
        out
    }

    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 8 * self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingTable {
    F32 { rows: usize, dim: usize, data: Vec<f32> },
    RowQuantized(RowQuantizedTable),
}

impl EmbeddingTable {
    pub fn f32(data: Vec<f32>, rows: usize, dim: usize) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding table has {} entries, expected {rows}x{dim}",
                data.len()
            )));
        }
        Ok(EmbeddingTable::F32 { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        match self {
            EmbeddingTable::F32 { rows, .. } => *rows,
            EmbeddingTable::RowQuantized(t) => t.rows,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingTable::F32 { dim, .. } => *dim,
            EmbeddingTable::RowQuantized(t) => t.dim,
        }
    }
}

/// Pooled embedding lookup: segment `s` sums the rows named by the next
/// `lengths[s]` indices. Rows are added in index order in f32; quantized
/// rows are dequantized first.
pub fn sparse_lengths_sum(table: &EmbeddingTable, indices: &[i64], lengths: &[i64]) -> Result<Vec<f32>> {
    let (rows, dim) = (table.rows(), table.dim());
    if let Some(&bad) = lengths.iter().find(|&&l| l < 0) {
        return Err(Error::InvalidArgument(format!("negative segment length {bad}")));
    }
    let total: i64 = lengths.iter().sum();
    if total as usize != indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "lengths sum to {total} but {} indices were given",
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i < 0 || i as usize >= rows) {
        return Err(Error::InvalidArgument(format!(
            "embedding index {bad} out of bounds for {rows} rows"
        )));
    }
    let mut starts = Vec::with_capacity(lengths.len());
    let mut acc = 0usize;
    for &l in lengths {
        starts.push(acc);
        acc += l as usize;
    }
    let mut out = vec![0f32; lengths.len() * dim];
    out.par_chunks_mut(dim.max(1))
        .zip(starts.par_iter().zip(lengths.par_iter()))
        .for_each(|(dst, (&start, &len))| {
            let mut buf = vec![0f32; dim];
            for &idx in &indices[start..start + len as usize] {
                let r = idx as usize;
                let row: &[f32] = match table {
                    EmbeddingTable::F32 { data, .. } => &data[r * dim..(r + 1) * dim],
                    EmbeddingTable::RowQuantized(t) => {
                        t.dequantize_row(r, &mut buf);
                        &buf
                    }
                };
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += v;
                }
            }
        });
    Ok(out)
}
