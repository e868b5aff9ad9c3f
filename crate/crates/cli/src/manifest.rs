//! On-disk dataset layout shared by generated and imported cohorts.
//!
//! ```text
//! <dataset>/manifest.json
//! <dataset>/u{user}/s{session}/p{point}.pgm         camera frame
//! <dataset>/canvas/u{user}/s{session}/p{point}.pgm  preprocessed canvas
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use gazesynth::dataset::{EvalDataset, EvalSample, EvalSession, EvalUser};
use gazesynth::estimator::{extract_features, FeatureMode};
use gazesynth::preprocess::{AffineTransform2D, CanvasImage, LandmarkSet};
use gazesynth::raster::{Annotation, Raster};
use gazesynth::scene::{ProfileConfig, ProfileId, SceneSample, UserParams};
use nalgebra::Point2;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generated { master_seed: u64, profile_config: Box<ProfileConfig> },
    /// Path of the import manifest as given on the command line.
    Imported { manifest: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub profile: ProfileId,
    pub source: DatasetSource,
    pub screen_mm: (f64, f64),
    pub users: Vec<ManifestUser>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestUser {
    pub user_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<UserParams>,
    pub sessions: Vec<ManifestSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSession {
    pub session_id: usize,
    pub grid_points: usize,
    pub samples: Vec<ManifestSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub scene: SceneSample,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub point_index: usize,
    /// Camera frame, relative to the dataset directory.
    pub image: String,
    /// Canvas, relative to the dataset directory.
    pub canvas: String,
    pub true_mm: Point2<f64>,
    pub distance_mm: f64,
    /// Labelled `[left, right]` outer corners in the camera frame.
    pub outer_corners: [Point2<f64>; 2],
    pub canvas_transform: AffineTransform2D,
    pub canvas_landmarks: LandmarkSet,
    pub border_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl DatasetManifest {
    pub fn sample_count(&self) -> usize {
        self.samples().count()
    }

    pub fn samples(&self) -> impl Iterator<Item = &ManifestSample> + '_ {
        self.users.iter().flat_map(|u| &u.sessions).flat_map(|s| &s.samples)
    }
}

/// Directory of the dataset for `profile` under an output root.
pub fn dataset_dir(out: &Path, profile: ProfileId) -> PathBuf {
    out.join("datasets").join(format!("profile-{profile}"))
}

pub fn frame_path(user: usize, session: usize, point: usize) -> String {
    format!("u{user}/s{session}/p{point}.pgm")
}

pub fn canvas_path(user: usize, session: usize, point: usize) -> String {
    format!("canvas/{}", frame_path(user, session, point))
}

/// Writes `raster` to `dir/rel`, creating parent directories.
pub fn write_image(dir: &Path, rel: &str, raster: &Raster) -> anyhow::Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    raster.write_pgm(&path)?;
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> anyhow::Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: DatasetManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(
        m.format_version == MANIFEST_FORMAT_VERSION,
        "{}: format version {} is not supported (expected {MANIFEST_FORMAT_VERSION})",
        path.display(),
        m.format_version
    );
    Ok(m)
}

/// Reads the stored canvas of one sample back into a [`CanvasImage`].
pub fn read_canvas(dir: &Path, sample: &ManifestSample) -> anyhow::Result<CanvasImage> {
    let raster = Raster::read(&dir.join(&sample.canvas))?;
    Ok(CanvasImage {
        raster,
        transform: sample.canvas_transform,
        landmarks: sample.canvas_landmarks.clone(),
        border_fraction: sample.border_fraction,
    })
}

/// Loads a stored dataset and featurizes its canvases.
pub fn load_dataset(dir: &Path, mode: FeatureMode) -> anyhow::Result<EvalDataset> {
    let manifest = read_manifest(dir)?;
    let mut users = Vec::with_capacity(manifest.users.len());
    for u in &manifest.users {
        let mut sessions = Vec::with_capacity(u.sessions.len());
        for s in &u.sessions {
            let mut samples = Vec::with_capacity(s.samples.len());
            for x in &s.samples {
                let canvas = read_canvas(dir, x)?;
                let features = extract_features(&canvas, mode).with_context(|| format!("features of {}", x.canvas))?;
                samples.push(EvalSample { point_index: x.point_index, features: features.values, true_mm: x.true_mm, distance_mm: x.distance_mm });
            }
            sessions.push(EvalSession { session_id: s.session_id, grid_points: s.grid_points, samples });
        }
        users.push(EvalUser { user_id: u.user_id, sessions });
    }
    if users.is_empty() {
        bail!("dataset {} has no users", dir.display());
    }
    Ok(EvalDataset { name: manifest.name, profile: Some(manifest.profile), mode, screen_mm: manifest.screen_mm, users })
}
