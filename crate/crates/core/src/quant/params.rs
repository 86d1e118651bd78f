//! Quantization parameters, histograms and range selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer target of a quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QDtype {
    U8,
    I8,
}

impl QDtype {
    pub fn qmin(self) -> i32 {
        match self {
            QDtype::U8 => 0,
            QDtype::I8 => -128,
        }
    }

    pub fn qmax(self) -> i32 {
        match self {
            QDtype::U8 => 255,
            QDtype::I8 => 127,
        }
    }
}

/// Affine map `real = scale * (q - zero_point)` with `q ∈ [qmin, qmax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub symmetric: bool,
}

impl QParams {
    pub fn new(scale: f32, zero_point: i32, target: QDtype, symmetric: bool) -> Result<Self> {
        let q = QParams {
            scale,
            zero_point,
            qmin: target.qmin(),
            qmax: target.qmax(),
            symmetric,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Quant(format!("scale {} must be positive and finite", self.scale)));
        }
        if self.qmin > self.qmax || self.zero_point < self.qmin || self.zero_point > self.qmax {
            return Err(Error::Quant(format!(
                "zero point {} outside [{}, {}]",
                self.zero_point, self.qmin, self.qmax
            )));
        }
        Ok(())
    }

    /// `clamp(round_half_even(x / scale) + zero_point, qmin, qmax)`.
    #[inline]
    pub fn quantize(&self, x: f32) -> i32 {
        let q = (x as f64 / self.scale as f64).round_ties_even() + self.zero_point as f64;
        q.clamp(self.qmin as f64, self.qmax as f64) as i32
    }

    #[inline]
    pub fn dequantize(&self, q: i32) -> f32 {
        (q - self.zero_point) as f32 * self.scale
    }

    /// Smallest and largest representable real values.
    pub fn range(&self) -> (f64, f64) {
        let s = self.scale as f64;
        (
            s * (self.qmin - self.zero_point) as f64,
            s * (self.qmax - self.zero_point) as f64,
        )
    }
}

/// Parameters covering `[min, max]`, widened to contain 0 so that zero is
/// exactly representable.
///
/// Asymmetric: `scale = (max - min) / (qmax - qmin)`,
/// `zero_point = round(qmin - min * (qmax - qmin) / (max - min))`.
/// Symmetric: `scale = max(|min|, |max|) / qmax'` with `zero_point` 0 for
/// signed targets and 128 (`qmax' = 127`) for u8. An all-zero range gets
/// scale 1 and the zero point the same formulas give for a zero minimum.
pub fn choose_qparams_minmax(min: f64, max: f64, target: QDtype, symmetric: bool) -> Result<QParams> {
    if !min.is_finite() || !max.is_finite() || min > max {
        return Err(Error::Quant(format!("invalid range [{min}, {max}]")));
    }
    let (lo, hi) = (min.min(0.0), max.max(0.0));
    let (qmin, qmax) = (target.qmin(), target.qmax());
    let params = if symmetric {
        let (zp, levels) = match target {
            QDtype::I8 => (0, qmax as f64),
            QDtype::U8 => (128, 127.0),
        };
        let amax = lo.abs().max(hi.abs());
        let scale = if amax > 0.0 { (amax / levels) as f32 } else { 1.0 };
        QParams {
            scale: positive(scale),
            zero_point: zp,
            qmin,
            qmax,
            symmetric,
        }
    } else if hi == lo {
        QParams {
            scale: 1.0,
            zero_point: qmin,
            qmin,
            qmax,
            symmetric,
        }
    } else {
        let levels = (qmax - qmin) as f64;
        let scale = ((hi - lo) / levels) as f32;
        let zp = (qmin as f64 - lo * levels / (hi - lo)).round_ties_even();
        QParams {
            scale: positive(scale),
            zero_point: (zp as i32).clamp(qmin, qmax),
            qmin,
            qmax,
            symmetric,
        }
    };
    Ok(params)
}

fn positive(scale: f32) -> f32 {
    if scale > 0.0 {
        scale
    } else {
        f32::MIN_POSITIVE
    }
}

pub const DEFAULT_BINS: usize = 2048;

/// Uniform-bin histogram with cumulative moments for fast range scoring.
/// Mass is assumed uniform within each bin; a zero-width histogram is a
/// point mass at `min`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    min: f64,
    max: f64,
    counts: Vec<u64>,
    /// Cumulative mass and first/second moments at each edge.
    cum: Vec<[f64; 3]>,
}

impl Histogram {
    pub fn from_counts(min: f64, max: f64, counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() || !(min <= max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Quant(format!(
                "histogram needs bins and a finite range, got {} bins over [{min}, {max}]",
                counts.len()
            )));
        }
        let mut h = Histogram {
            min,
            max,
            counts,
            cum: Vec::new(),
        };
        h.cum = h.build_moments();
        Ok(h)
    }

    /// Histogram of `values` over their own `[min, max]`.
    pub fn from_values(values: &[f32], bins: usize) -> Result<Self> {
        let (lo, hi) = observed_range(values)?;
        Self::from_values_in(values, bins, lo, hi)
    }

    /// Histogram over a fixed range (values outside are clamped to the end bins).
    pub fn from_values_in(values: &[f32], bins: usize, min: f64, max: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Quant("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins];
        let width = (max - min) / bins as f64;
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite value in calibration data".into()));
            }
            let b = if width > 0.0 {
                (((v as f64 - min) / width).floor().max(0.0) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self::from_counts(min, max, counts)
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.bins() as f64
    }

    pub fn edge(&self, i: usize) -> f64 {
        if i == self.bins() {
            self.max
        } else {
            self.min + i as f64 * self.width()
        }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins()).map(|i| self.edge(i)).collect()
    }

    fn build_moments(&self) -> Vec<[f64; 3]> {
        let mut cum = Vec::with_capacity(self.bins() + 1);
        let mut acc = [0f64; 3];
        cum.push(acc);
        for (i, &c) in self.counts.iter().enumerate() {
            let (a, b) = (self.edge(i), self.edge(i + 1));
            let c = c as f64;
            acc[0] += c;
            acc[1] += c * (a + b) / 2.0;
            acc[2] += c * (a * a + a * b + b * b) / 3.0;
            cum.push(acc);
        }
        cum
    }

    /// Mass, first and second moment of everything below `t` (at or
    /// below when `inclusive`, which only matters for a point mass).
    fn moments_below(&self, t: f64, inclusive: bool) -> [f64; 3] {
        if self.width() == 0.0 {
            let hit = if inclusive { self.min <= t } else { self.min < t };
            return if hit { self.cum[self.bins()] } else { [0.0; 3] };
        }
        if t <= self.min {
            return [0.0; 3];
        }
        if t >= self.max {
            return self.cum[self.bins()];
        }
        let w = self.width();
        let j = (((t - self.min) / w).floor() as usize).min(self.bins() - 1);
        let a = self.edge(j);
        let b = self.edge(j + 1);
        let c = self.counts[j] as f64 * ((t - a) / (b - a)).clamp(0.0, 1.0);
        let base = self.cum[j];
        [
            base[0] + c,
            base[1] + c * (a + t) / 2.0,
            base[2] + c * (a * a + a * t + t * t) / 3.0,
        ]
    }
}

fn observed_range(values: &[f32]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Quant("cannot build a histogram from no values".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value in calibration data".into()));
        }
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    Ok((lo, hi))
}

/// Estimated squared error of quantizing the histogram's mass with `q`:
/// values outside the representable range contribute their squared
/// distance to the nearest end, values inside contribute `scale² / 12`.
pub fn estimate_l2_error(h: &Histogram, q: &QParams) -> f64 {
    let (lo, hi) = q.range();
    let total = h.cum[h.bins()];
    let below = h.moments_below(lo, false);
    let upto_hi = h.moments_below(hi, true);
    let clip_low = below[2] - 2.0 * lo * below[1] + lo * lo * below[0];
    let above = [total[0] - upto_hi[0], total[1] - upto_hi[1], total[2] - upto_hi[2]];
    let clip_high = above[2] - 2.0 * hi * above[1] + hi * hi * above[0];
    let inside = (upto_hi[0] - below[0]).max(0.0);
    let s = q.scale as f64;
    clip_low.max(0.0) + clip_high.max(0.0) + inside * s * s / 12.0
}

/// Candidate clip ranges: every bin edge (plus 0) at or below zero paired
/// with every edge (plus 0) at or above zero, or `[-t, t]` for every edge
/// magnitude when symmetric.
pub fn l2_candidates(h: &Histogram, symmetric: bool) -> Vec<(f64, f64)> {
    let edges = h.edges();
    if symmetric {
        let mut ts: Vec<f64> = edges.iter().map(|e| e.abs()).filter(|&t| t > 0.0).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        if ts.is_empty() {
            ts.push(0.0);
        }
        ts.into_iter().map(|t| (-t, t)).collect()
    } else {
        let mut lows: Vec<f64> = edges.iter().copied().filter(|&e| e <= 0.0).collect();
        let mut highs: Vec<f64> = edges.iter().copied().filter(|&e| e >= 0.0).collect();
        lows.push(0.0);
        highs.push(0.0);
        lows.sort_by(f64::total_cmp);
        lows.dedup();
        highs.sort_by(f64::total_cmp);
        highs.dedup();
        let mut out = Vec::with_capacity(lows.len() * highs.len());
        for &a in &lows {
            for &b in &highs {
                if b > a || (lows.len() == 1 && highs.len() == 1) {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Range minimizing [`estimate_l2_error`] over [`l2_candidates`]. Ties go to
/// the smallest range, then the smallest lower bound.
pub fn choose_qparams_l2(h: &Histogram, target: QDtype, symmetric: bool) -> Result<QParams> {
    if h.total() == 0 {
        return Err(Error::Quant("histogram is empty".into()));
    }
    let mut best: Option<(f64, f64, f64, QParams)> = None;
    for (a, b) in l2_candidates(h, symmetric) {
        let q = choose_qparams_minmax(a, b, target, symmetric)?;
        let err = estimate_l2_error(h, &q);
        let better = match &best {
            None => true,
            Some((e, lo, hi, _)) => err < *e || (err == *e && (b - a, a) < (hi - lo, *lo)),
        };
        if better {
            best = Some((err, a, b, q));
        }
    }
    Ok(best.expect("at least one candidate").3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_examples() {
        let q = choose_qparams_minmax(-1.0, 1.0, QDtype::U8, false).unwrap();
        assert_eq!((q.scale, q.zero_point), ((2.0f64 / 255.0) as f32, 128));
        let q = choose_qparams_minmax(-2.0, 1.5, QDtype::I8, true).unwrap();
        assert_eq!((q.scale, q.zero_point), ((2.0f64 / 127.0) as f32, 0));
        let q = choose_qparams_minmax(0.0, 0.0, QDtype::I8, true).unwrap();
        assert_eq!((q.scale, q.zero_point), (1.0, 0));
        let q = choose_qparams_minmax(0.0, 0.0, QDtype::U8, false).unwrap();
        assert_eq!((q.scale, q.zero_point), (1.0, 0));
    }

    #[test]
    fn range_is_widened_to_zero() {
        let q = choose_qparams_minmax(2.0, 4.0, QDtype::U8, false).unwrap();
        assert_eq!(q.zero_point, 0);
        assert_eq!(q.quantize(0.0), 0);
        let q = choose_qparams_minmax(-4.0, -2.0, QDtype::U8, false).unwrap();
        assert_eq!(q.zero_point, 255);
    }

    #[test]
    fn point_mass_gives_tight_symmetric_range() {
        let h = Histogram::from_values(&[0.75; 100], 2).unwrap();
        let q = choose_qparams_l2(&h, QDtype::I8, true).unwrap();
        let s = q.scale as f64;
        assert!((q.range().1 - 0.75).abs() < s);
        let err = estimate_l2_error(&h, &q);
        assert!(err <= 100.0 * s * s / 12.0 + 1e-12);
    }

    #[test]
    fn uniform_histogram_keeps_nearly_full_range() {
        let h = Histogram::from_counts(-1.0, 1.0, vec![10; 2048]).unwrap();
        let l2 = choose_qparams_l2(&h, QDtype::U8, false).unwrap();
        let mm = choose_qparams_minmax(-1.0, 1.0, QDtype::U8, false).unwrap();
        let (lo, hi) = l2.range();
        assert!(lo <= -0.95 && hi >= 0.95, "{lo} {hi}");
        assert!(estimate_l2_error(&h, &l2) <= estimate_l2_error(&h, &mm));
    }

    #[test]
    fn moments_cover_whole_mass() {
        let h = Histogram::from_counts(-1.0, 1.0, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(h.moments_below(5.0, false)[0], 10.0);
        assert_eq!(h.moments_below(-5.0, false)[0], 0.0);
        assert!((h.moments_below(0.25, false)[0] - 4.5).abs() < 1e-12);
    }
}
