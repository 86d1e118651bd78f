//! Reduced-precision kernels over pre-packed weights.

pub mod conv;
pub mod embedding;
pub mod fp16;
pub mod gemm;
pub mod harness;
pub mod pack;
pub mod pipeline;
pub mod sparse;

pub use conv::{
    conv_f32, conv_u8i8, depthwise_conv_f32, depthwise_conv_u8i8, im2col, pack_conv_weights,
};
pub use embedding::{sparse_lengths_sum, EmbeddingTable, RowQuantizedTable};
pub use fp16::{f32_slice_to_fp16, fp16_to_fp32, fp32_to_fp16};
pub use harness::{gemm_intensity, GemmKernel, GemmProblem};
pub use gemm::{
    gemm_fp16w, gemm_fp32, gemm_u8i8_acc16, gemm_u8i8_acc32, gemm_u8i8_acc32_raw, spmm_outlier,
    Acc16Output, DEFAULT_SPILL_PERIOD, MAX_K_ACC32,
};
pub use pack::{pack_weights, PackElement, PackedMatrix, TileConfig};
pub use pipeline::{apply_output_pipeline, apply_output_pipeline_f32, Bias, GemmOutput, OutputPipeline, Terminal};
pub use sparse::SparseResidual;
