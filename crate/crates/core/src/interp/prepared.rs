//! Per-layer state built once before execution: packed weights for f32
//! layers and fully quantized operands for integer layers.

use crate::error::{Error, Result};
use crate::ir::{conv_geometry, ConvGeometry, Graph, Node, OpType, Tensor, TensorData};
use crate::kernels::{
    apply_output_pipeline, conv_f32, conv_u8i8, depthwise_conv_f32, depthwise_conv_u8i8, gemm_fp16w,
    gemm_fp32, gemm_u8i8_acc32_raw, pack_conv_weights, pack_weights, sparse_lengths_sum, spmm_outlier,
    Bias, EmbeddingTable, GemmOutput, OutputPipeline, PackedMatrix, RowQuantizedTable, SparseResidual,
    TileConfig,
};
use crate::quant::{split_outliers_wide, LayerPlan, QParams, MAIN_RANGE};

pub(crate) enum Prepared {
    FcF32 {
        w: PackedMatrix<f32>,
        bias: Option<Vec<f32>>,
    },
    FcF16 {
        w: PackedMatrix<u16>,
        bias: Option<Vec<f32>>,
    },
    ConvF32 {
        geo: ConvGeometry,
        packed: Vec<PackedMatrix<f32>>,
        bias: Option<Vec<f32>>,
    },
    DepthwiseF32 {
        geo: ConvGeometry,
        w: Vec<f32>,
        bias: Option<Vec<f32>>,
    },
    Sls {
        table: EmbeddingTable,
    },
    Quant(QuantLayer),
}

pub(crate) struct QuantLayer {
    input: QParams,
    output: QParams,
    weight: Vec<QParams>,
    rescale: Vec<f32>,
    bias: Option<Vec<i32>>,
    kind: QuantKind,
}

enum QuantKind {
    Fc {
        packed: PackedMatrix<i8>,
        residual: Option<SparseResidual>,
    },
    Conv {
        geo: ConvGeometry,
        packed: Vec<PackedMatrix<i8>>,
    },
    Depthwise {
        geo: ConvGeometry,
        w: Vec<i8>,
    },
}

/// Summary of how a layer was quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayerInfo {
    pub input: QParams,
    pub output: QParams,
    pub weight: Vec<QParams>,
    /// Nonzero outlier entries when the layer uses the outlier split.
    pub outliers: Option<usize>,
}

fn weight<'a>(node: &Node, g: &'a Graph, i: usize) -> Result<&'a Tensor> {
    let name = &node.inputs[i];
    g.weight_data(name)
        .ok_or_else(|| Error::exec(&node.name, format!("missing weight data for `{name}`")))
}

fn bias_f32(node: &Node, g: &Graph) -> Result<Option<Vec<f32>>> {
    if node.inputs.len() > 2 {
        Ok(Some(weight(node, g, 2)?.to_f32_vec()))
    } else {
        Ok(None)
    }
}

fn param(layer: &LayerPlan, role: &str) -> Result<QParams> {
    let e = layer
        .params
        .iter()
        .find(|p| p.role == role)
        .ok_or_else(|| Error::InvalidArgument(format!("plan/graph mismatch: layer `{}` lacks `{role}` params", layer.name)))?;
    let q = QParams {
        scale: e.scale,
        zero_point: e.zero_point,
        qmin: e.qmin,
        qmax: e.qmax,
        symmetric: layer.symmetric,
    };
    q.validate()?;
    Ok(q)
}

fn weight_params(layer: &LayerPlan, channels: usize) -> Result<Vec<QParams>> {
    if layer.params.iter().any(|p| p.role == "weight") {
        return Ok(vec![param(layer, "weight")?; channels]);
    }
    (0..channels).map(|c| param(layer, &format!("weight[{c}]"))).collect()
}

impl Prepared {
    pub(crate) fn new(node: &Node, g: &Graph, layer: Option<&LayerPlan>) -> Result<Option<Prepared>> {
        if let Some(layer) = layer {
            return Self::quantized(node, g, layer).map(Some);
        }
        let p = match node.op {
            OpType::FC => {
                let w = weight(node, g, 1)?;
                let (n, k) = (w.dims()[0], w.dims()[1]);
                let bias = bias_f32(node, g)?;
                match w.data() {
                    TensorData::F16(bits) => Prepared::FcF16 {
                        w: pack_weights(bits, n, k, TileConfig::default())?,
                        bias,
                    },
                    _ => Prepared::FcF32 {
                        w: pack_weights(&w.to_f32_vec(), n, k, TileConfig::default())?,
                        bias,
                    },
                }
            }
            OpType::Conv => {
                let geo = conv_geometry(node, g)?;
                let w = weight(node, g, 1)?.to_f32_vec();
                let bias = bias_f32(node, g)?;
                if geo.is_depthwise() {
                    Prepared::DepthwiseF32 { geo, w, bias }
                } else {
                    let packed = pack_conv_weights(&w, &geo, TileConfig::default())?;
                    Prepared::ConvF32 { geo, packed, bias }
                }
            }
            OpType::SparseLengthsSum => {
                let t = weight(node, g, 0)?;
                let (rows, dim) = (t.dims()[0], t.dims()[1]);
                Prepared::Sls {
                    table: EmbeddingTable::f32(t.to_f32_vec(), rows, dim)?,
                }
            }
            _ => return Ok(None),
        };
        Ok(Some(p))
    }

    fn quantized(node: &Node, g: &Graph, layer: &LayerPlan) -> Result<Prepared> {
        if node.op == OpType::SparseLengthsSum {
            let t = weight(node, g, 0)?;
            let (rows, dim) = (t.dims()[0], t.dims()[1]);
            let q = RowQuantizedTable::quantize(&t.to_f32_vec(), rows, dim)?;
            return Ok(Prepared::Sls {
                table: EmbeddingTable::RowQuantized(q),
            });
        }
        let input = param(layer, "input")?;
        let output = param(layer, "output")?;
        if input.qmin != 0 || input.qmax != 255 || output.qmin != 0 || output.qmax != 255 {
            return Err(Error::Quant(format!("layer `{}`: activations must be u8", layer.name)));
        }
        let w = weight(node, g, 1)?;
        let wf = w.to_f32_vec();
        let channels = w.dims()[0];
        let per_ch = wf.len() / channels;
        let wq = weight_params(layer, channels)?;
        if wq.iter().any(|q| q.qmin < i8::MIN as i32 || q.qmax > i8::MAX as i32) {
            return Err(Error::Quant(format!("layer `{}`: weights must be i8", layer.name)));
        }
        let outlier = layer.outliers;
        let mut codes = Vec::with_capacity(wf.len());
        for (c, row) in wf.chunks(per_ch).enumerate() {
            let q = &wq[c];
            for &v in row {
                if outlier {
                    let r = (v as f64 / q.scale as f64).round_ties_even() + q.zero_point as f64;
                    codes.push(r.clamp(-(1 << 24) as f64, (1 << 24) as f64) as i32);
                } else {
                    codes.push(q.quantize(v));
                }
            }
        }
        let rescale: Vec<f32> = wq
            .iter()
            .map(|q| (input.scale as f64 * q.scale as f64) as f32)
            .collect();
        let bias = match bias_f32(node, g)? {
            Some(b) => Some(
                b.iter()
                    .zip(&rescale)
                    .map(|(&v, &s)| (v as f64 / s as f64).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect(),
            ),
            None => None,
        };
        let kind = match node.op {
            OpType::FC => {
                let (n, k) = (channels, per_ch);
                let (main, residual) = if outlier {
                    let s = split_outliers_wide(&codes, n, k, MAIN_RANGE)?;
                    (s.main, Some(s.outliers))
                } else {
                    (codes.iter().map(|&c| c as i8).collect(), None)
                };
                QuantKind::Fc {
                    packed: pack_weights(&main, n, k, TileConfig::default())?,
                    residual,
                }
            }
            OpType::Conv => {
                if outlier {
                    return Err(Error::Quant(format!("layer `{}`: outlier split is only supported for FC", layer.name)));
                }
                let geo = conv_geometry(node, g)?;
                let main: Vec<i8> = codes.iter().map(|&c| c as i8).collect();
                if geo.is_depthwise() {
                    QuantKind::Depthwise { geo, w: main }
                } else {
                    let packed = pack_conv_weights(&main, &geo, TileConfig::default())?;
                    QuantKind::Conv { geo, packed }
                }
            }
            op => return Err(Error::InvalidArgument(format!("{op} cannot be quantized"))),
        };
        Ok(Prepared::Quant(QuantLayer {
            input,
            output,
            weight: wq,
            rescale,
            bias,
            kind,
        }))
    }

    pub(crate) fn quant_info(&self) -> Option<QuantLayerInfo> {
        match self {
            Prepared::Quant(q) => Some(QuantLayerInfo {
                input: q.input,
                output: q.output,
                weight: q.weight.clone(),
                outliers: match &q.kind {
                    QuantKind::Fc { residual: Some(r), .. } => Some(r.nnz()),
                    _ => None,
                },
            }),
            _ => None,
        }
    }

    pub(crate) fn run(&self, node: &Node, ins: &[&Tensor], out_dims: &[usize]) -> Result<Tensor> {
        let f32_in = |t: &Tensor| -> Vec<f32> { t.to_f32_vec() };
        let out = match self {
            Prepared::FcF32 { w, bias } => {
                let x = f32_in(ins[0]);
                gemm_fp32(&x, out_dims[0], w, &OutputPipeline::float(bias.clone(), false))?
            }
            Prepared::FcF16 { w, bias } => {
                let x = f32_in(ins[0]);
                gemm_fp16w(&x, out_dims[0], w, &OutputPipeline::float(bias.clone(), false))?
            }
            Prepared::ConvF32 { geo, packed, bias } => {
                conv_f32(&f32_in(ins[0]), geo, packed, &OutputPipeline::float(bias.clone(), false))?
            }
            Prepared::DepthwiseF32 { geo, w, bias } => {
                depthwise_conv_f32(&f32_in(ins[0]), geo, w, &OutputPipeline::float(bias.clone(), false))?
            }
            Prepared::Sls { table } => {
                let idx = ins[1]
                    .to_index_vec()
                    .ok_or_else(|| Error::exec(&node.name, "indices must be integers"))?;
                let len = ins[2]
                    .to_index_vec()
                    .ok_or_else(|| Error::exec(&node.name, "lengths must be integers"))?;
                sparse_lengths_sum(table, &idx, &len).map_err(|e| Error::exec(&node.name, e.to_string()))?
            }
            Prepared::Quant(q) => q.run(&f32_in(ins[0]), out_dims)?,
        };
        Tensor::from_f32(out_dims.to_vec(), out)
    }
}

impl QuantLayer {
    fn pipeline(&self) -> OutputPipeline {
        OutputPipeline::requantize(
            self.rescale.clone(),
            self.bias.clone().map(Bias::I32),
            false,
            self.output.scale,
            self.output.zero_point,
        )
    }

    fn run(&self, x: &[f32], out_dims: &[usize]) -> Result<Vec<f32>> {
        let xq: Vec<u8> = x.iter().map(|&v| self.input.quantize(v) as u8).collect();
        let zp_a = self.input.zero_point;
        let zp_w: Vec<i32> = self.weight.iter().map(|q| q.zero_point).collect();
        let result = match &self.kind {
            QuantKind::Fc { packed, residual } => {
                let m = out_dims[0];
                let mut acc = gemm_u8i8_acc32_raw(&xq, m, zp_a, packed, &zp_w)?;
                if let Some(r) = residual {
                    for (a, b) in acc.iter_mut().zip(spmm_outlier(&xq, m, zp_a, r)?) {
                        *a = a.wrapping_add(b);
                    }
                }
                apply_output_pipeline(&acc, packed.n(), &self.pipeline())?
            }
            QuantKind::Conv { geo, packed } => conv_u8i8(&xq, zp_a, geo, packed, &zp_w, &self.pipeline())?,
            QuantKind::Depthwise { geo, w } => depthwise_conv_u8i8(&xq, zp_a, geo, w, &zp_w, &self.pipeline())?,
        };
        match result {
            GemmOutput::U8(q) => Ok(q.iter().map(|&v| self.output.dequantize(v as i32)).collect()),
            _ => Err(Error::Quant("requantize stage produced no u8 output".into())),
        }
    }
}
