use serde::{Deserialize, Serialize};

use super::{EstimatorError, Result};
use crate::preprocess::{CanvasImage, CANVAS_HEIGHT, CANVAS_WIDTH};

/// Box size of the canvas downsample.
pub const DOWNSAMPLE: usize = 5;
pub const IMAGE_FEATURE_WIDTH: usize = CANVAS_WIDTH as usize / DOWNSAMPLE;
pub const IMAGE_FEATURE_HEIGHT: usize = CANVAS_HEIGHT as usize / DOWNSAMPLE;
/// Six canvas landmarks as `(x, y)` plus the border fraction.
pub const LANDMARK_FEATURES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// 5x box-averaged canvas scaled to `[0, 1]`.
    Image,
    /// Normalized canvas landmarks and the padding fraction.
    Landmarks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub provenance: FeatureMode,
}

pub fn extract_features(canvas: &CanvasImage, mode: FeatureMode) -> Result<FeatureVector> {
    let r = &canvas.raster;
    if r.width() != CANVAS_WIDTH || r.height() != CANVAS_HEIGHT {
        return Err(EstimatorError::CanvasSize {
            expected_w: CANVAS_WIDTH,
            expected_h: CANVAS_HEIGHT,
            got_w: r.width(),
            got_h: r.height(),
        });
    }
    let values = match mode {
        FeatureMode::Image => {
            let px = r.pixels();
            let stride = CANVAS_WIDTH as usize;
            let scale = 1.0 / (255.0 * (DOWNSAMPLE * DOWNSAMPLE) as f64);
            let mut out = vec![0.0; IMAGE_FEATURE_WIDTH * IMAGE_FEATURE_HEIGHT];
            for (cy, row) in out.chunks_mut(IMAGE_FEATURE_WIDTH).enumerate() {
                for (cx, cell) in row.iter_mut().enumerate() {
                    let mut sum = 0u32;
                    for y in cy * DOWNSAMPLE..(cy + 1) * DOWNSAMPLE {
                        let line = &px[y * stride + cx * DOWNSAMPLE..y * stride + (cx + 1) * DOWNSAMPLE];
                        sum += line.iter().map(|&v| u32::from(v)).sum::<u32>();
                    }
                    *cell = f64::from(sum) * scale;
                }
            }
            out
        }
        FeatureMode::Landmarks => {
            let lm = &canvas.landmarks;
            if lm.extra.len() != 4 {
                return Err(EstimatorError::MissingLandmarks(2 + lm.extra.len()));
            }
            let mut out: Vec<f64> = lm
                .points()
                .flat_map(|p| [p.x / f64::from(CANVAS_WIDTH), p.y / f64::from(CANVAS_HEIGHT)])
                .collect();
            out.push(canvas.border_fraction);
            out
        }
    };
    Ok(FeatureVector { values, provenance: mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{AffineTransform2D, LandmarkSet};
    use crate::raster::Raster;
    use nalgebra::Point2;

    fn canvas(fill: u8) -> CanvasImage {
        CanvasImage {
            raster: Raster::new(CANVAS_WIDTH, CANVAS_HEIGHT, fill).unwrap(),
            transform: AffineTransform2D::identity(),
            landmarks: LandmarkSet::corners_only(Point2::new(39.0, 42.0), Point2::new(351.0, 42.0)),
            border_fraction: 0.25,
        }
    }

    #[test]
    fn constant_canvases() {
        let zero = extract_features(&canvas(0), FeatureMode::Image).unwrap();
        assert_eq!(zero.values.len(), 1326);
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let full = extract_features(&canvas(255), FeatureMode::Image).unwrap();
        assert!(full.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn single_pixel_cell() {
        let mut c = canvas(0);
        c.raster.set(5 * 7 + 3, 5 * 2 + 1, 255);
        let f = extract_features(&c, FeatureMode::Image).unwrap();
        for (i, &v) in f.values.iter().enumerate() {
            if i == 2 * IMAGE_FEATURE_WIDTH + 7 {
                assert!((v - 0.04).abs() < 1e-15);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn landmark_mode() {
        let mut c = canvas(0);
        assert!(matches!(extract_features(&c, FeatureMode::Landmarks), Err(EstimatorError::MissingLandmarks(2))));
        c.landmarks.extra = vec![Point2::new(195.0, 42.5); 4];
        let f = extract_features(&c, FeatureMode::Landmarks).unwrap();
        assert_eq!(f.values.len(), LANDMARK_FEATURES);
        assert_eq!(f.values[0], 0.1);
        assert_eq!(f.values[2], 0.9);
        assert_eq!(f.values[4], 0.5);
        assert_eq!(f.values[12], 0.25);
    }

    #[test]
    fn wrong_canvas_size() {
        let mut c = canvas(0);
        c.raster = Raster::new(100, 85, 0).unwrap();
        assert!(matches!(extract_features(&c, FeatureMode::Image), Err(EstimatorError::CanvasSize { .. })));
    }
}
