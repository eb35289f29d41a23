//! Training objective, Adam, the fitting loop and PSF calibration by grid
//! search.

pub mod adam;
pub mod grid;
pub mod loss;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use grid::{psf_grid_search, select_candidate, Candidate, GridSearchConfig, GridSearchResult};
pub use loss::{l2, ssim, tv, LossWeights};
pub use train::{estimate, init_model, sampling_for, train, LossRecord, TrainConfig, TrainReport};
