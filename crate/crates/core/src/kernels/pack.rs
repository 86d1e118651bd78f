use crate::error::{Error, Result};

/// Tile sizes used when packing a `[N, K]` weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    /// Rows of W (output features) per tile.
    pub row_block: usize,
    /// Columns of W (reduction) per tile.
    pub col_block: usize,
}

impl TileConfig {
    pub const fn new(row_block: usize, col_block: usize) -> Self {
        TileConfig {
            row_block,
            col_block,
        }
    }
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig::new(8, 64)
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for u16 {}
    impl Sealed for i8 {}
}

/// Element types that can be packed. Integer weights also get row sums.
pub trait PackElement: sealed::Sealed + Copy + Default + Send + Sync + 'static {
    fn integer_value(self) -> Option<i32>;
}

impl PackElement for f32 {
    fn integer_value(self) -> Option<i32> {
        None
    }
}

impl PackElement for u16 {
    fn integer_value(self) -> Option<i32> {
        None
    }
}

impl PackElement for i8 {
    fn integer_value(self) -> Option<i32> {
        Some(self as i32)
    }
}

/// A `[N, K]` weight matrix (FC convention, `C = A · Wᵀ`) stored tile by tile.
///
/// Tiles are ordered by row block, then column block; each tile is
/// row-major with no padding, so partial edge tiles are simply smaller.
/// For integer weights the per-output sums `Σ_k W[n, k]` are kept for
/// zero-point correction (they are the column sums of `Wᵀ`).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix<T> {
    n: usize,
    k: usize,
    tiles: TileConfig,
    data: Vec<T>,
    col_sums: Option<Vec<i32>>,
}

impl<T: PackElement> PackedMatrix<T> {
    pub fn pack(w: &[T], n: usize, k: usize, tiles: TileConfig) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot pack a {n}x{k} matrix"
            )));
        }
        if tiles.row_block == 0 || tiles.col_block == 0 {
            return Err(Error::InvalidArgument("tile sizes must be >= 1".into()));
        }
        if w.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} elements, expected {n}x{k}",
                w.len()
            )));
        }
        let mut data = Vec::with_capacity(n * k);
        for r0 in (0..n).step_by(tiles.row_block) {
            let r1 = (r0 + tiles.row_block).min(n);
            for c0 in (0..k).step_by(tiles.col_block) {
                let c1 = (c0 + tiles.col_block).min(k);
                for r in r0..r1 {
                    data.extend_from_slice(&w[r * k + c0..r * k + c1]);
                }
            }
        }
        let col_sums = T::default().integer_value().map(|_| {
            (0..n)
                .map(|r| {
                    w[r * k..(r + 1) * k]
                        .iter()
                        .map(|v| v.integer_value().unwrap())
                        .sum()
                })
                .collect()
        });
        Ok(PackedMatrix {
            n,
            k,
            tiles,
            data,
            col_sums,
        })
    }

    /// Output features (rows of W).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Reduction length (columns of W).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tiles(&self) -> TileConfig {
        self.tiles
    }

    pub fn storage(&self) -> &[T] {
        &self.data
    }

    pub fn col_sums(&self) -> Option<&[i32]> {
        self.col_sums.as_deref()
    }

    /// Bytes of packed weight storage (excluding sums).
    pub fn storage_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    fn rows_in_block(&self, rb: usize) -> usize {
        (self.n - rb * self.tiles.row_block).min(self.tiles.row_block)
    }

    /// Contiguous slices of row `r` of W, one per column tile, in ascending `k`.
    pub fn row_chunks(&self, r: usize) -> impl Iterator<Item = &[T]> + '_ {
        let rb = r / self.tiles.row_block;
        let rows = self.rows_in_block(rb);
        let block_base = rb * self.tiles.row_block * self.k;
        let local = r - rb * self.tiles.row_block;
        (0..self.k).step_by(self.tiles.col_block).map(move |c0| {
            let cols = (self.k - c0).min(self.tiles.col_block);
            let start = block_base + rows * c0 + local * cols;
            &self.data[start..start + cols]
        })
    }

    /// Copies row `r` of W into `buf` (length K).
    pub fn read_row(&self, r: usize, buf: &mut [T]) {
        let mut off = 0;
        for chunk in self.row_chunks(r) {
            buf[off..off + chunk.len()].copy_from_slice(chunk);
            off += chunk.len();
        }
    }

    /// Restores the original row-major `[N, K]` matrix.
    pub fn unpack(&self) -> Vec<T> {
        let mut out = vec![T::default(); self.n * self.k];
        for r in 0..self.n {
            self.read_row(r, &mut out[r * self.k..(r + 1) * self.k]);
        }
        out
    }
}

/// Packs `w` (`[N, K]`, row-major). Integer weights carry row sums.
pub fn pack_weights<T: PackElement>(
    w: &[T],
    n: usize,
    k: usize,
    tiles: TileConfig,
) -> Result<PackedMatrix<T>> {
    PackedMatrix::pack(w, n, k, tiles)
}
