//! Externally labelled frames brought into the workbench through the same
//! preprocessing chain as generated ones.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{ensure, Context};
use gazesynth::preprocess::{preprocess, LandmarkSet, PreprocessConfig};
use gazesynth::raster::Raster;
use gazesynth::scene::ProfileId;
use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::manifest::{
    canvas_path, frame_path, write_image, DatasetManifest, DatasetSource, ManifestSample, ManifestSession, ManifestUser,
    MANIFEST_FORMAT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportManifest {
    pub screen_mm: (f64, f64),
    pub records: Vec<ImportRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportRecord {
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    pub outer_left: Point2<f64>,
    pub outer_right: Point2<f64>,
    pub true_mm: Point2<f64>,
    /// Distance used to express errors as angles.
    pub distance_mm: f64,
    pub user_id: usize,
    pub session_id: usize,
    /// Defaults to the record's position within its session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordFailure {
    pub index: usize,
    pub image: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct ImportOutcome {
    pub manifest: DatasetManifest,
    pub failures: Vec<RecordFailure>,
}

pub fn read_import_manifest(path: &Path) -> anyhow::Result<ImportManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading import manifest {}", path.display()))?;
    let m: ImportManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing import manifest {}", path.display()))?;
    ensure!(
        m.screen_mm.0 > 0.0 && m.screen_mm.1 > 0.0 && m.screen_mm.0.is_finite() && m.screen_mm.1.is_finite(),
        "screen_mm must be positive, got {:?}",
        m.screen_mm
    );
    Ok(m)
}

fn import_record(base: &Path, r: &ImportRecord, config: &PreprocessConfig) -> anyhow::Result<(Raster, gazesynth::preprocess::CanvasImage)> {
    ensure!(r.distance_mm > 0.0 && r.distance_mm.is_finite(), "distance_mm must be positive, got {}", r.distance_mm);
    ensure!(r.true_mm.x.is_finite() && r.true_mm.y.is_finite(), "true_mm is not finite");
    let path = base.join(&r.image);
    ensure!(path.is_file(), "image {} does not exist", path.display());
    let raster = Raster::read(&path)?;
    for (name, p) in [("outer_left", r.outer_left), ("outer_right", r.outer_right)] {
        ensure!(
            raster.contains(&p),
            "{name} ({}, {}) lies outside the {}x{} image",
            p.x,
            p.y,
            raster.width(),
            raster.height()
        );
    }
    let canvas = preprocess(&raster, &LandmarkSet::corners_only(r.outer_left, r.outer_right), config)?;
    Ok((raster, canvas))
}

/// Preprocesses every record and writes the resulting dataset into `dir`.
/// Bad records are collected, not fatal.
pub fn import_dataset(
    manifest_path: &Path,
    import: &ImportManifest,
    profile: ProfileId,
    config: &PreprocessConfig,
    dir: &Path,
) -> anyhow::Result<ImportOutcome> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut failures = Vec::new();
    let mut users: BTreeMap<usize, BTreeMap<usize, Vec<ManifestSample>>> = BTreeMap::new();
    for (index, r) in import.records.iter().enumerate() {
        let session = users.entry(r.user_id).or_default().entry(r.session_id).or_default();
        let point_index = r.point_index.unwrap_or(session.len());
        if session.iter().any(|s| s.point_index == point_index) {
            failures.push(RecordFailure {
                index,
                image: r.image.clone(),
                reason: format!("duplicate point {point_index} in user {} session {}", r.user_id, r.session_id),
            });
            continue;
        }
        match import_record(base, r, config) {
            Ok((raw, canvas)) => {
                let image = frame_path(r.user_id, r.session_id, point_index);
                let canvas_rel = canvas_path(r.user_id, r.session_id, point_index);
                write_image(dir, &image, &raw)?;
                write_image(dir, &canvas_rel, &canvas.raster)?;
                session.push(ManifestSample {
                    point_index,
                    image,
                    canvas: canvas_rel,
                    true_mm: r.true_mm,
                    distance_mm: r.distance_mm,
                    outer_corners: [r.outer_left, r.outer_right],
                    canvas_transform: canvas.transform,
                    canvas_landmarks: canvas.landmarks,
                    border_fraction: canvas.border_fraction,
                    ground_truth: None,
                });
            }
            Err(e) => failures.push(RecordFailure { index, image: r.image.clone(), reason: format!("{e:#}") }),
        }
    }
    let users = users
        .into_iter()
        .map(|(user_id, sessions)| ManifestUser {
            user_id,
            params: None,
            sessions: sessions
                .into_iter()
                .filter(|(_, samples)| !samples.is_empty())
                .map(|(session_id, samples)| ManifestSession { session_id, grid_points: samples.len(), samples })
                .collect(),
        })
        .filter(|u| !u.sessions.is_empty())
        .collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        name: format!("profile-{profile}"),
        profile,
        source: DatasetSource::Imported { manifest: manifest_path.display().to_string() },
        screen_mm: import.screen_mm,
        users,
    };
    Ok(ImportOutcome { manifest, failures })
}
