//! Synthetic binocular gaze datasets and the tooling around them: a
//! parametric eye/head/screen scene, a procedural renderer, the roll-crop-pad
//! preprocessing chain, a small CNN regressor trained from scratch and a
//! leave-one-out / calibration evaluation protocol.

pub mod dataset;
pub mod estimator;
pub mod preprocess;
pub mod protocol;
pub mod raster;
pub mod scene;
