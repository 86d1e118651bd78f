//! Post-training quantization: parameter selection, granularity, outlier
//! splitting, range narrowing and selective fallback.

mod affine;
mod calibrate;
mod narrow;
mod outlier;
mod params;
mod plan;

pub use affine::{
    dequantize_affine, minmax_params, quantization_l2_error, quantize_affine, QGranularity,
};
pub use calibrate::{
    build_plan, calibrate, end_to_end_error, profile_quant_error, quantize_model, Batch, Calibration,
    QuantOptions, QuantizeOutcome,
};
pub use narrow::{consumer_window, net_aware_narrow, NarrowResult, Range};
pub use outlier::{split_outliers, split_outliers_wide, OutlierSplit, MAIN_RANGE};
pub use params::{
    choose_qparams_l2, choose_qparams_minmax, estimate_l2_error, l2_candidates, Histogram, QDtype,
    QParams, DEFAULT_BINS,
};
pub use plan::{
    selective_plan, write_report_csv, ErrorReport, LayerError, LayerPlan, ParamEntry, QuantPlan,
};

use crate::error::Result;
use crate::kernels::RowQuantizedTable;

/// Per-row u8 quantization of a `[rows, dim]` embedding table.
pub fn quantize_embedding_rows(table: &[f32], rows: usize, dim: usize) -> Result<RowQuantizedTable> {
    RowQuantizedTable::quantize(table, rows, dim)
}
