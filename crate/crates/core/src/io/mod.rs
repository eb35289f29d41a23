//! File formats: PFM/PGM rasters, INI-style configs, sidecar metadata, CSV.

pub mod ini;
pub mod meta;
pub mod pfm;
pub mod pgm;
pub mod range;
