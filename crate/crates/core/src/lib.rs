//! Stereo matching with a learned, edge-aware recursive cost aggregation.
//!
//! A census/colour cost volume is smoothed by a four-pass recursive domain
//! transform whose per-pixel feedback weights come from a small CNN. Every
//! stage has an analytic backward pass so the CNN trains end to end against
//! a softmax loss on the aggregated volume.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod costvol;
pub mod dtfilter;
pub mod dtgrad;
pub mod error;
pub mod evalbench;
pub mod grid;
pub mod imageio;
pub mod matcher;
pub mod predictor;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use costvol::{build_cost_volume, build_cost_volume_right, CostParams, CostVolume};
pub use dtfilter::{dt_2d, filter_cost_volume, DtParams, WeightMaps};
pub use error::{Error, Result};
pub use evalbench::{bad_pixel_rate, benchmark, EvalReport, TimingReport};
pub use grid::Plane;
pub use imageio::{DisparityMap, Image, PixelStatus, StereoPair};
pub use matcher::{match_stereo, PipelineConfig};
pub use predictor::{init_params, PredictorParams};
pub use scalar::Real;
pub use trainer::{train, Dataset, TrainConfig};

pub type PlaneF32 = Plane<f32>;
pub type PlaneF64 = Plane<f64>;
pub type ImageF32 = Image<f32>;
pub type ImageF64 = Image<f64>;
pub type StereoPairF32 = StereoPair<f32>;
pub type StereoPairF64 = StereoPair<f64>;
pub type CostVolumeF32 = CostVolume<f32>;
pub type CostVolumeF64 = CostVolume<f64>;
pub type WeightMapsF32 = WeightMaps<f32>;
pub type WeightMapsF64 = WeightMaps<f64>;
pub type PredictorParamsF32 = PredictorParams<f32>;
pub type PredictorParamsF64 = PredictorParams<f64>;
