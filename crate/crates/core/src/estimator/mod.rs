//! Convolutional gaze regressor: conv blocks, global average pooling and
//! three fully connected layers ending in the two screen coordinates.
//!
//! All parameters live in one flat vector; [`Layout`] maps layers onto it.
//! That keeps gradients, momentum buffers and finite-difference checks
//! trivially aligned with the weights.

mod features;
mod network;
mod persist;
mod ridge;
mod train;

pub use features::{extract_features, FeatureMode, FeatureVector, DOWNSAMPLE, IMAGE_FEATURE_HEIGHT, IMAGE_FEATURE_WIDTH, LANDMARK_FEATURES};
pub use network::{forward, forward_batch, gradients, loss, Gradients};
pub use persist::{load_weights, read_weights, save_weights, WEIGHTS_FORMAT_VERSION};
pub use ridge::{ridge_fit, ridge_predict, RidgeModel};
pub use train::{fine_tune, init_random, train, Init, TrainOutcome, TrainingSample};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("shape mismatch at {layer}: expected {expected}, got {got}")]
    Shape { layer: String, expected: usize, got: usize },
    #[error("non-finite values produced by {layer}")]
    NonFinite { layer: String },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("fine-tuning needs pretrained or fine-tuned weights, got provenance '{0}'")]
    Provenance(String),
    #[error("canvas must be {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    CanvasSize { expected_w: u32, expected_h: u32, got_w: u32, got_h: u32 },
    #[error("landmark features need 6 canvas landmarks, got {0}")]
    MissingLandmarks(usize),
    #[error("rank-deficient system: {0}")]
    Rank(String),
    #[error("architecture hash mismatch: file has {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("unsupported weight format version {found}, expected {expected}")]
    Version { expected: u32, found: u64 },
    #[error("corrupt weight file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("i/o on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

pub type Result<T, E = EstimatorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 3x3 convolution with zero padding of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub stride: usize,
    /// Identity shortcut added before the activation.
    pub skip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub input: InputShape,
    pub conv: Vec<ConvBlockSpec>,
    /// Sizes of the three fully connected layers; the last must be 2.
    pub fc: [usize; 3],
    pub activation: Activation,
}

impl ArchitectureSpec {
    /// Three stride-2 blocks (8, 16 then 32 channels) and FC 64-32-2 over the
    /// downsampled canvas. Two blocks see about seven feature cells, less than
    /// one eye, and cannot resolve horizontal gaze.
    pub fn image_default() -> Self {
        Self {
            input: InputShape { channels: 1, height: IMAGE_FEATURE_HEIGHT, width: IMAGE_FEATURE_WIDTH },
            conv: vec![
                ConvBlockSpec { out_channels: 8, stride: 2, skip: false },
                ConvBlockSpec { out_channels: 16, stride: 2, skip: false },
                ConvBlockSpec { out_channels: 32, stride: 2, skip: false },
            ],
            fc: [64, 32, 2],
            activation: Activation::Relu,
        }
    }

    /// No convolutions: the landmark vector feeds the FC head directly.
    pub fn landmark_default() -> Self {
        Self {
            input: InputShape { channels: LANDMARK_FEATURES, height: 1, width: 1 },
            conv: Vec::new(),
            fc: [32, 16, 2],
            activation: Activation::Relu,
        }
    }

    pub fn for_mode(mode: FeatureMode) -> Self {
        match mode {
            FeatureMode::Image => Self::image_default(),
            FeatureMode::Landmarks => Self::landmark_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EstimatorError::Architecture(m));
        if self.input.is_empty() {
            return bad(format!("input shape {:?} is empty", self.input));
        }
        if self.fc[2] != 2 {
            return bad(format!("final layer must output 2 values, got {}", self.fc[2]));
        }
        if self.fc.iter().any(|&n| n == 0) {
            return bad("fully connected layers need at least one unit".into());
        }
        let mut ch = self.input.channels;
        for (i, block) in self.conv.iter().enumerate() {
            if block.out_channels == 0 || block.stride == 0 {
                return bad(format!("conv block {i} needs channels >= 1 and stride >= 1"));
            }
            if block.skip && (block.stride != 1 || block.out_channels != ch) {
                return bad(format!(
                    "conv block {i}: identity skip needs stride 1 and equal channels ({ch} -> {})",
                    block.out_channels
                ));
            }
            ch = block.out_channels;
        }
        Ok(())
    }

    /// `(channels, height, width)` after each conv block, starting with the input.
    pub fn feature_maps(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = vec![(self.input.channels, self.input.height, self.input.width)];
        for block in &self.conv {
            let &(_, h, w) = shapes.last().unwrap();
            shapes.push((block.out_channels, conv_out(h, block.stride), conv_out(w, block.stride)));
        }
        shapes
    }

    pub fn pooled_len(&self) -> usize {
        self.feature_maps().last().unwrap().0
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub(crate) fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// `[start, end)` offsets of one layer's weights and biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub weights: (usize, usize),
    pub bias: (usize, usize),
}

/// Offsets of each layer's parameters in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub(crate) conv: Vec<ParamRange>,
    pub(crate) fc: Vec<ParamRange>,
    /// `(inputs, outputs)` of each dense layer.
    pub(crate) fc_dims: Vec<(usize, usize)>,
    pub(crate) total: usize,
}

impl Layout {
    pub fn new(spec: &ArchitectureSpec) -> Self {
        let mut offset = 0;
        let mut take = |n: usize| {
            let r = (offset, offset + n);
            offset += n;
            r
        };
        let maps = spec.feature_maps();
        let conv = spec
            .conv
            .iter()
            .zip(&maps)
            .map(|(block, &(c_in, _, _))| ParamRange {
                weights: take(block.out_channels * c_in * KERNEL * KERNEL),
                bias: take(block.out_channels),
            })
            .collect();
        let mut fc_dims = Vec::new();
        let mut inputs = spec.pooled_len();
        for &n in &spec.fc {
            fc_dims.push((inputs, n));
            inputs = n;
        }
        let fc = fc_dims
            .iter()
            .map(|&(i, o)| ParamRange { weights: take(i * o), bias: take(o) })
            .collect();
        Self { conv, fc, fc_dims, total: offset }
    }

    pub fn parameter_count(&self) -> usize {
        self.total
    }

    pub fn conv_ranges(&self) -> &[ParamRange] {
        &self.conv
    }

    pub fn fc_ranges(&self) -> &[ParamRange] {
        &self.fc
    }
}

/// Where a weight set came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Provenance {
    Random,
    Pretrained(String),
    Finetuned(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Random => f.write_str("random"),
            Provenance::Pretrained(c) => write!(f, "pretrained:{c}"),
            Provenance::Finetuned(u) => write!(f, "finetuned:{u}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "random" => Ok(Provenance::Random),
            Some(("pretrained", c)) => Ok(Provenance::Pretrained(c.to_string())),
            Some(("finetuned", u)) => Ok(Provenance::Finetuned(u.to_string())),
            _ => Err(format!("unknown provenance tag '{s}'")),
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every parameter of one regressor instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    architecture: ArchitectureSpec,
    layout: Layout,
    pub provenance: Provenance,
    params: Vec<f64>,
}

impl ModelWeights {
    pub fn zeros(architecture: ArchitectureSpec) -> Result<Self> {
        architecture.validate()?;
        let layout = Layout::new(&architecture);
        let params = vec![0.0; layout.total];
        Ok(Self { architecture, layout, provenance: Provenance::Random, params })
    }

    pub fn from_params(architecture: ArchitectureSpec, params: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let mut w = Self::zeros(architecture)?;
        if params.len() != w.params.len() {
            return Err(EstimatorError::Shape { layer: "parameters".into(), expected: w.params.len(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(EstimatorError::NonFinite { layer: "parameters".into() });
        }
        w.params = params;
        w.provenance = provenance;
        Ok(w)
    }

    pub fn architecture(&self) -> &ArchitectureSpec {
        &self.architecture
    }

    pub fn architecture_hash(&self) -> String {
        self.architecture.hash()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn conv_weights(&self, i: usize) -> &[f64] {
        let r = self.layout.conv[i].weights;
        &self.params[r.0..r.1]
    }

    pub(crate) fn conv_bias(&self, i: usize) -> &[f64] {
        let r = self.layout.conv[i].bias;
        &self.params[r.0..r.1]
    }

    pub(crate) fn fc_weights(&self, i: usize) -> &[f64] {
        let r = self.layout.fc[i].weights;
        &self.params[r.0..r.1]
    }

    pub(crate) fn fc_bias(&self, i: usize) -> &[f64] {
        let r = self.layout.fc[i].bias;
        &self.params[r.0..r.1]
    }

    /// SHA-256 over the architecture hash and the exact parameter bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.architecture_hash().as_bytes());
        h.update(self.provenance.to_string().as_bytes());
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn training() -> Self {
        Self { learning_rate: 1e-2, momentum: 0.9, epochs: 200, batch_size: 32, seed: 0 }
    }

    pub fn fine_tuning() -> Self {
        Self { learning_rate: 1e-3, ..Self::training() }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EstimatorError::Hyperparams(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EstimatorError::Hyperparams(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(EstimatorError::Hyperparams("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EstimatorError::Hyperparams("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let spec = ArchitectureSpec::image_default();
        spec.validate().unwrap();
        assert_eq!(spec.feature_maps(), vec![(1, 17, 78), (8, 9, 39), (16, 5, 20), (32, 3, 10)]);
        let layout = Layout::new(&spec);
        let expected = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 64 + 64) + (64 * 32 + 32) + (32 * 2 + 2);
        assert_eq!(layout.parameter_count(), expected);
    }

    #[test]
    fn validation_rules() {
        let mut spec = ArchitectureSpec::image_default();
        spec.fc[2] = 3;
        assert!(spec.validate().is_err());
        let mut spec = ArchitectureSpec::image_default();
        spec.conv[0].skip = true;
        assert!(spec.validate().is_err());
        let mut spec = ArchitectureSpec::image_default();
        spec.conv.push(ConvBlockSpec { out_channels: 32, stride: 1, skip: true });
        spec.validate().unwrap();
        // a skip block keeps the shape of its input
        let maps = spec.feature_maps();
        assert_eq!(maps[3], maps[4]);
    }

    #[test]
    fn provenance_tags_round_trip() {
        for p in [Provenance::Random, Provenance::Pretrained("U-20".into()), Provenance::Finetuned("7".into())] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
        assert!("pretrained".parse::<Provenance>().is_err());
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = ArchitectureSpec::image_default();
        let mut b = a.clone();
        b.fc[0] = 65;
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn hyperparam_validation() {
        Hyperparams::training().validate().unwrap();
        assert!(Hyperparams { learning_rate: 0.0, ..Hyperparams::training() }.validate().is_err());
        assert!(Hyperparams { epochs: 0, ..Hyperparams::training() }.validate().is_err());
    }
}
