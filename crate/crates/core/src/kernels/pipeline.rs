//! Output pipeline fused after the GEMM main loop.
//!
//! Stage order is fixed: dequantize-rescale, bias, Relu, then exactly one
//! terminal stage. An integer bias is added to the accumulator before the
//! rescale (it is quantized with scale `s_a * s_w`); a float bias is added
//! after it.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Bias {
    /// Quantized with scale `s_a * s_w`, added in the accumulator domain.
    I32(Vec<i32>),
    /// Real-valued, added after rescaling.
    F32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Terminal {
    /// Real-valued output.
    F32,
    /// Raw 32-bit accumulators (no rescale allowed).
    PassthroughI32,
    /// Requantize to u8: `clamp(round(real / out_scale) + zero_point, qmin, qmax)`.
    RequantizeU8 {
        out_scale: f32,
        zero_point: i32,
        qmin: i32,
        qmax: i32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputPipeline {
    /// Per-tensor (one entry) or per-output-channel multipliers `s_a * s_w`.
    pub rescale: Option<Vec<f32>>,
    pub bias: Option<Bias>,
    pub relu: bool,
    pub terminal: Terminal,
}

impl Default for OutputPipeline {
    fn default() -> Self {
        OutputPipeline {
            rescale: None,
            bias: None,
            relu: false,
            terminal: Terminal::F32,
        }
    }
}

/// Result of a GEMM after its output pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum GemmOutput {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl GemmOutput {
    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            GemmOutput::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match self {
            GemmOutput::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match self {
            GemmOutput::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GemmOutput::U8(v) => v.len(),
            GemmOutput::I32(v) => v.len(),
            GemmOutput::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl OutputPipeline {
    /// Float epilogue: optional bias and Relu.
    pub fn float(bias: Option<Vec<f32>>, relu: bool) -> Self {
        OutputPipeline {
            rescale: None,
            bias: bias.map(Bias::F32),
            relu,
            terminal: Terminal::F32,
        }
    }

    pub fn passthrough() -> Self {
        OutputPipeline {
            terminal: Terminal::PassthroughI32,
            ..Default::default()
        }
    }

    pub fn dequantize(rescale: Vec<f32>, bias: Option<Bias>, relu: bool) -> Self {
        OutputPipeline {
            rescale: Some(rescale),
            bias,
            relu,
            terminal: Terminal::F32,
        }
    }

    pub fn requantize(
        rescale: Vec<f32>,
        bias: Option<Bias>,
        relu: bool,
        out_scale: f32,
        zero_point: i32,
    ) -> Self {
        OutputPipeline {
            rescale: Some(rescale),
            bias,
            relu,
            terminal: Terminal::RequantizeU8 {
                out_scale,
                zero_point,
                qmin: 0,
                qmax: 255,
            },
        }
    }

    fn check_len(what: &str, len: usize, n: usize) -> Result<()> {
        if len == 1 || len == n {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what} has {len} entries, expected 1 or {n}"
            )))
        }
    }

    fn validate(&self, n: usize, integer_acc: bool) -> Result<()> {
        if let Some(r) = &self.rescale {
            Self::check_len("rescale", r.len(), n)?;
            if r.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::Quant("rescale multipliers must be positive".into()));
            }
        }
        match &self.bias {
            Some(Bias::I32(b)) => {
                if !integer_acc {
                    return Err(Error::InvalidArgument(
                        "integer bias on a float accumulator".into(),
                    ));
                }
                Self::check_len("bias", b.len(), n)?
            }
            Some(Bias::F32(b)) => Self::check_len("bias", b.len(), n)?,
            None => {}
        }
        match (&self.terminal, integer_acc, self.rescale.is_some()) {
            (Terminal::PassthroughI32, true, false) => {}
            (Terminal::PassthroughI32, _, _) => {
                return Err(Error::InvalidArgument(
                    "passthrough-i32 needs an integer accumulator and no rescale".into(),
                ))
            }
            (Terminal::F32 | Terminal::RequantizeU8 { .. }, true, false) => {
                return Err(Error::Quant(
                    "missing dequantization scales for integer accumulator".into(),
                ))
            }
            (_, false, true) => {
                return Err(Error::InvalidArgument(
                    "rescale applies only to integer accumulators".into(),
                ))
            }
            _ => {}
        }
        if matches!(self.bias, Some(Bias::F32(_)))
            && matches!(self.terminal, Terminal::PassthroughI32)
        {
            return Err(Error::InvalidArgument(
                "float bias with passthrough-i32".into(),
            ));
        }
        if let Terminal::RequantizeU8 {
            out_scale,
            qmin,
            qmax,
            zero_point,
        } = self.terminal
        {
            if !(out_scale.is_finite() && out_scale > 0.0) {
                return Err(Error::Quant("missing or invalid output scale".into()));
            }
            if qmin > qmax || zero_point < qmin || zero_point > qmax {
                return Err(Error::Quant("output zero point outside [qmin, qmax]".into()));
            }
        }
        Ok(())
    }
}

fn pick<T: Copy>(v: &[T], j: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[j]
    }
}

#[inline]
fn requantize_value(real: f64, out_scale: f32, zp: i32, relu: bool, qmin: i32, qmax: i32) -> i32 {
    let q = (real / out_scale as f64).round_ties_even() + zp as f64;
    let q = if relu { q.max(zp as f64) } else { q };
    q.clamp(qmin as f64, qmax as f64) as i32
}

/// Applies `p` to a row-major `[M, N]` block of 32-bit accumulators.
pub fn apply_output_pipeline(acc: &[i32], n: usize, p: &OutputPipeline) -> Result<GemmOutput> {
    if n == 0 || acc.len() % n != 0 {
        return Err(Error::ShapeMismatch(format!(
            "accumulator of {} elements is not a multiple of N={n}",
            acc.len()
        )));
    }
    p.validate(n, true)?;
    let ibias = |j: usize| -> i64 {
        match &p.bias {
            Some(Bias::I32(b)) => pick(b, j) as i64,
            _ => 0,
        }
    };
    let fbias = |j: usize| -> f64 {
        match &p.bias {
            Some(Bias::F32(b)) => pick(b, j) as f64,
            _ => 0.0,
        }
    };
    match &p.terminal {
        Terminal::PassthroughI32 => {
            let out = acc
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let v = (a as i64 + ibias(i % n)).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
                    if p.relu {
                        v.max(0)
                    } else {
                        v
                    }
                })
                .collect();
            Ok(GemmOutput::I32(out))
        }
        Terminal::F32 => {
            let scales = p.rescale.as_ref().unwrap();
            let out = acc
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let j = i % n;
                    let real = (a as i64 + ibias(j)) as f64 * pick(scales, j) as f64 + fbias(j);
                    let v = real as f32;
                    if p.relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect();
            Ok(GemmOutput::F32(out))
        }
        &Terminal::RequantizeU8 {
            out_scale,
            zero_point,
            qmin,
            qmax,
        } => {
            let scales = p.rescale.as_ref().unwrap();
            let out = acc
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let j = i % n;
                    let real = (a as i64 + ibias(j)) as f64 * pick(scales, j) as f64 + fbias(j);
                    requantize_value(real, out_scale, zero_point, p.relu, qmin, qmax) as u8
                })
                .collect();
            Ok(GemmOutput::U8(out))
        }
    }
}

/// Float epilogue for `[M, N]` float accumulators: bias then Relu.
pub fn apply_output_pipeline_f32(acc: &mut [f32], n: usize, p: &OutputPipeline) -> Result<()> {
    if n == 0 || acc.len() % n != 0 {
        return Err(Error::ShapeMismatch(format!(
            "accumulator of {} elements is not a multiple of N={n}",
            acc.len()
        )));
    }
    p.validate(n, false)?;
    if !matches!(p.terminal, Terminal::F32) {
        return Err(Error::InvalidArgument(
            "float GEMM supports only the f32 terminal stage".into(),
        ));
    }
    if let Some(Bias::F32(b)) = &p.bias {
        for row in acc.chunks_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += pick(b, j);
            }
        }
    }
    if p.relu {
        for v in acc.iter_mut() {
            *v = v.max(0.0);
        }
    }
    Ok(())
}
