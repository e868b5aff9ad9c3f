//! Turns a generated cohort into network-ready evaluation data: render each
//! sample, add sensor noise, preprocess onto the canvas and extract features.

use nalgebra::Point2;
use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimator::{extract_features, EstimatorError, FeatureMode, TrainingSample};
use crate::preprocess::{preprocess, CanvasImage, LandmarkSet, PreprocessConfig, PreprocessError};
use crate::raster::{add_noise, render_sample, Annotation, Raster, RasterError};
use crate::scene::{Cohort, ProfileId, SceneSample, UserParams};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample {sample}: {source}")]
    Render { sample: String, #[source] source: RasterError },
    #[error("sample {sample}: {source}")]
    Preprocess { sample: String, #[source] source: PreprocessError },
    #[error("sample {sample}: {source}")]
    Features { sample: String, #[source] source: EstimatorError },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Deterministic per-sample seed derived from the user's appearance seed.
pub fn sample_seed(appearance_seed: u64, session_id: usize, point_index: usize, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(appearance_seed.to_le_bytes());
    h.update((session_id as u64).to_le_bytes());
    h.update((point_index as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// A rendered frame before and after preprocessing.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub raw: Raster,
    pub annotation: Annotation,
    /// Landmarks actually handed to preprocessing.
    pub labelled: LandmarkSet,
    pub canvas: CanvasImage,
}

/// Rendered and noise-corrupted camera frame plus its annotation.
pub fn render_frame(cohort: &Cohort, user: &UserParams, sample: &SceneSample) -> Result<(Raster, Annotation)> {
    let id = || sample.id();
    let seed = |purpose| sample_seed(user.appearance_seed, sample.session_id, sample.target.index, purpose);
    let (raster, annotation) = render_sample(sample, cohort.profile.resolution_px, seed("style"))
        .map_err(|source| DatasetError::Render { sample: id(), source })?;
    let noisy = add_noise(&raster, cohort.profile.noise_sigma, seed("noise"))
        .map_err(|source| DatasetError::Render { sample: id(), source })?;
    Ok((noisy, annotation))
}

/// Annotation as a labeller would report it: outer corners perturbed by the
/// profile's label jitter, everything else exact.
pub fn labelled_landmarks(cohort: &Cohort, user: &UserParams, sample: &SceneSample, annotation: &Annotation) -> LandmarkSet {
    let mut set = annotation.landmark_set();
    let sigma = cohort.profile.label_jitter_px;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(user.appearance_seed, sample.session_id, sample.target.index, "labels"));
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        for p in [&mut set.outer_left, &mut set.outer_right] {
            p.x += normal.sample(&mut rng);
            p.y += normal.sample(&mut rng);
        }
    }
    set
}

pub fn prepare_frame(cohort: &Cohort, user: &UserParams, sample: &SceneSample, config: &PreprocessConfig) -> Result<PreparedFrame> {
    let (raw, annotation) = render_frame(cohort, user, sample)?;
    let labelled = labelled_landmarks(cohort, user, sample, &annotation);
    let canvas = preprocess(&raw, &labelled, config).map_err(|source| DatasetError::Preprocess { sample: sample.id(), source })?;
    Ok(PreparedFrame { raw, annotation, labelled, canvas })
}

/// Screen millimetres to `[-1, 1]` per axis.
pub fn normalize_target(p: Point2<f64>, screen_mm: (f64, f64)) -> [f64; 2] {
    [2.0 * p.x / screen_mm.0 - 1.0, 2.0 * p.y / screen_mm.1 - 1.0]
}

pub fn denormalize_target(p: [f64; 2], screen_mm: (f64, f64)) -> Point2<f64> {
    Point2::new((p[0] + 1.0) / 2.0 * screen_mm.0, (p[1] + 1.0) / 2.0 * screen_mm.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub point_index: usize,
    pub features: Vec<f64>,
    pub true_mm: Point2<f64>,
    /// Distance used to turn planar error into an angle.
    pub distance_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSession {
    pub session_id: usize,
    pub grid_points: usize,
    pub samples: Vec<EvalSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalUser {
    pub user_id: usize,
    pub sessions: Vec<EvalSession>,
}

impl EvalUser {
    pub fn samples(&self) -> impl Iterator<Item = (&EvalSession, &EvalSample)> + '_ {
        self.sessions.iter().flat_map(|s| s.samples.iter().map(move |x| (s, x)))
    }

    pub fn sample_count(&self) -> usize {
        self.sessions.iter().map(|s| s.samples.len()).sum()
    }
}

/// Featurized cohort ready for the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDataset {
    pub name: String,
    pub profile: Option<ProfileId>,
    pub mode: FeatureMode,
    pub screen_mm: (f64, f64),
    pub users: Vec<EvalUser>,
}

impl EvalDataset {
    pub fn sample_count(&self) -> usize {
        self.users.iter().map(EvalUser::sample_count).sum()
    }

    pub fn training_sample(&self, s: &EvalSample) -> TrainingSample {
        TrainingSample { features: s.features.clone(), target: normalize_target(s.true_mm, self.screen_mm) }
    }

    pub fn user(&self, user_id: usize) -> Option<&EvalUser> {
        self.users.iter().find(|u| u.user_id == user_id)
    }
}

/// Distance from the subject's eyes to the fixated target.
pub fn viewing_distance(sample: &SceneSample) -> f64 {
    (sample.target.position_mm - sample.head_pose.position_mm).norm()
}

pub fn build_dataset(cohort: &Cohort, mode: FeatureMode, config: &PreprocessConfig) -> Result<EvalDataset> {
    let users = cohort
        .users
        .par_iter()
        .map(|u| {
            let sessions = u
                .sessions
                .iter()
                .map(|session| {
                    let samples = session
                        .samples
                        .iter()
                        .map(|s| {
                            let frame = prepare_frame(cohort, &u.params, s, config)?;
                            let features = extract_features(&frame.canvas, mode)
                                .map_err(|source| DatasetError::Features { sample: s.id(), source })?;
                            Ok(EvalSample {
                                point_index: s.target.index,
                                features: features.values,
                                true_mm: s.target.position_screen_mm,
                                distance_mm: viewing_distance(s),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(EvalSession { session_id: session.session_id, grid_points: session.grid_points, samples })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalUser { user_id: u.params.user_id, sessions })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalDataset {
        name: format!("profile-{}", cohort.profile.id),
        profile: Some(cohort.profile.id),
        mode,
        screen_mm: (cohort.scene.screen.width_mm, cohort.scene.screen.height_mm),
        users,
    })
}
