//! Toolkit for few-shot parcel segmentation over satellite image time series:
//! cloud screening, composites, region priors, a region-variance consistency
//! loss with analytic gradients, few-shot data utilities and metrics.

pub mod cli;
pub mod cloud_screen;
pub mod composite;
pub mod cube;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod metrics;
pub mod par;
pub mod region_loss;
pub mod region_prior;
pub mod rng;
pub mod synth;
pub mod tensor_io;
pub mod trainer;

pub use cloud_screen::{cloud_mask, frame_quality, select_clear_frames, CloudParams, FrameQuality};
pub use composite::{composite_mean, composite_median, fuse_rgb, to_uint8, FusedRgb, Stretch};
pub use cube::{Band, BandMap, SitsCube};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MiouReport};
pub use par::Exec;
pub use region_loss::{
    pixel_ce_loss, region_smooth_loss, region_smooth_loss_grad, total_loss, LogitsCube, LossConfig, LossReport,
    RegionLoss, RegionSmoothLoss, VarianceMode,
};
pub use region_prior::{build_region_map, fallback_regions, region_index, resize_nearest, MaskStack, RegionMap};
pub use rng::SeededRng;
pub use tensor_io::{load_tensor, save_tensor, DType, TensorContainer, TensorData};
