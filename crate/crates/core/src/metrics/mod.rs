//! FLOPs and size accounting, compression ratios and the proxy Fréchet
//! distance.

mod fid;
mod flops;
mod report;
mod size;

pub use fid::{embed_chunked, frechet_distance, proxy_fid, COVARIANCE_SHRINKAGE};
pub use flops::{
    calibrate, count_flops, count_flops_at, layer_flops, Calibration, FlopConvention, GigaPrefix, TransposedGrid,
    ACT_OPS_PER_ELEMENT, ADD_OPS_PER_ELEMENT, CALIBRATION_TARGET_GFLOPS, NORM_OPS_PER_ELEMENT,
};
pub use report::{compression_ratios, render_table, CompressionReport, ModelStats};
pub use size::{model_size, to_mib, SizePolicy, MIB};
