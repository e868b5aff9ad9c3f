//! Eye-strip normalization: level the outer corners, crop a box sized by
//! their distance, then pad with black to a fixed canvas.
//!
//! No stage ever rescales the image, so the amount of padding tracks how far
//! the subject sits from the camera.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;

pub const CANVAS_WIDTH: u32 = 390;
pub const CANVAS_HEIGHT: u32 = 85;

/// Maximum corner height difference accepted by [`crop_eyes`].
pub const LEVEL_TOLERANCE_PX: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("outer eye corners coincide at ({0:.3}, {1:.3})")]
    DegenerateCorners(f64, f64),
    #[error("outer corners are not level (dy = {0:.3} px); normalize roll first")]
    NotLevel(f64),
    #[error("crop of {0}x{1} px is too small")]
    CropTooSmall(i64, i64),
    #[error("crop of {0}x{1} px does not fit the {CANVAS_WIDTH}x{CANVAS_HEIGHT} canvas; subject too close")]
    Oversize(u32, u32),
    #[error("transform is not invertible")]
    Singular,
    #[error("invalid preprocessing config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, #[source] source: Box<PreprocessError> },
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// 2x3 matrix mapping source pixel coordinates to destination coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub matrix: [[f64; 3]; 2],
}

impl AffineTransform2D {
    pub fn identity() -> Self {
        Self { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { matrix: [[1.0, 0.0, dx], [0.0, 1.0, dy]] }
    }

    /// Rotation by `angle_rad` about `center`, in image coordinates (y down,
    /// so positive angles turn clockwise on screen).
    pub fn rotation_about(center: Point2<f64>, angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        Self {
            matrix: [
                [c, -s, center.x - (c * center.x - s * center.y)],
                [s, c, center.y - (s * center.x + c * center.y)],
            ],
        }
    }

    pub fn apply(&self, p: Point2<f64>) -> Point2<f64> {
        let m = &self.matrix;
        Point2::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    /// `next ∘ self`: apply `self` first.
    pub fn then(&self, next: &Self) -> Self {
        let a = &next.matrix;
        let b = &self.matrix;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Self { matrix: m }
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(PreprocessError::Singular);
        }
        let m = &self.matrix;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(Self {
            matrix: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        })
    }
}

/// Outer corners drive the pipeline; `extra` points are carried through every transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub outer_left: Point2<f64>,
    pub outer_right: Point2<f64>,
    pub extra: Vec<Point2<f64>>,
}

impl LandmarkSet {
    pub fn corners_only(outer_left: Point2<f64>, outer_right: Point2<f64>) -> Self {
        Self { outer_left, outer_right, extra: Vec::new() }
    }

    pub fn transformed(&self, t: &AffineTransform2D) -> Self {
        Self {
            outer_left: t.apply(self.outer_left),
            outer_right: t.apply(self.outer_right),
            extra: self.extra.iter().map(|&p| t.apply(p)).collect(),
        }
    }

    pub fn points(&self) -> impl Iterator<Item = Point2<f64>> + '_ {
        [self.outer_left, self.outer_right].into_iter().chain(self.extra.iter().copied())
    }

    pub fn corner_midpoint(&self) -> Point2<f64> {
        nalgebra::center(&self.outer_left, &self.outer_right)
    }

    pub fn corner_distance(&self) -> f64 {
        (self.outer_right - self.outer_left).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanvasImage {
    pub raster: Raster,
    /// Original image coordinates to canvas coordinates.
    pub transform: AffineTransform2D,
    pub landmarks: LandmarkSet,
    pub border_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Crop width as a multiple of the outer-corner distance.
    pub crop_factor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { crop_factor: 1.5 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_factor > 0.0 && self.crop_factor.is_finite()) {
            return Err(PreprocessError::Config(format!("crop factor must be positive, got {}", self.crop_factor)));
        }
        Ok(())
    }
}

/// Signed angle of the outer-corner line in degrees, in `(-90, 90]`;
/// positive when the right corner is lower (image y grows downward).
pub fn roll_angle(outer_left: Point2<f64>, outer_right: Point2<f64>) -> Result<f64> {
    let d = outer_right - outer_left;
    if d.x == 0.0 && d.y == 0.0 {
        return Err(PreprocessError::DegenerateCorners(outer_left.x, outer_left.y));
    }
    let mut deg = d.y.atan2(d.x).to_degrees();
    if deg > 90.0 {
        deg -= 180.0;
    } else if deg <= -90.0 {
        deg += 180.0;
    }
    Ok(deg)
}

fn bilinear(src: &Raster, p: Point2<f64>) -> u8 {
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    let fx = p.x - x0;
    let fy = p.y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    let v00 = f64::from(src.get_or_zero(xi, yi));
    let v10 = f64::from(src.get_or_zero(xi + 1, yi));
    let v01 = f64::from(src.get_or_zero(xi, yi + 1));
    let v11 = f64::from(src.get_or_zero(xi + 1, yi + 1));
    let v = (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10 + (1.0 - fx) * fy * v01 + fx * fy * v11;
    v.round().clamp(0.0, 255.0) as u8
}

/// Resamples `src` through `transform` (source to destination) onto a frame
/// of the same size, filling uncovered pixels with 0.
pub fn warp_affine(src: &Raster, transform: &AffineTransform2D) -> Result<Raster> {
    warp_window(src, &transform.inverse()?, (0, 0, i64::from(src.width()), i64::from(src.height())))
}

/// The `(x0, y0, w, h)` window of `warp_affine`'s output, with pixels outside
/// the source frame set to 0.
fn warp_window(src: &Raster, inv: &AffineTransform2D, (x0, y0, w, h): (i64, i64, i64, i64)) -> Result<Raster> {
    let (fw, fh) = (i64::from(src.width()), i64::from(src.height()));
    let mut pixels = Vec::with_capacity((w * h) as usize);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = (0..fw).contains(&x) && (0..fh).contains(&y);
            pixels.push(if inside { bilinear(src, inv.apply(Point2::new(x as f64, y as f64))) } else { 0 });
        }
    }
    Ok(Raster::from_pixels(w as u32, h as u32, pixels).expect("window dimensions are positive"))
}

/// Rotates the image about the corner midpoint so the outer corners share a row.
pub fn normalize_roll(raster: &Raster, landmarks: &LandmarkSet) -> Result<(Raster, LandmarkSet, AffineTransform2D)> {
    let roll = roll_angle(landmarks.outer_left, landmarks.outer_right)?;
    let transform = AffineTransform2D::rotation_about(landmarks.corner_midpoint(), -roll.to_radians());
    let out = warp_affine(raster, &transform)?;
    Ok((out, landmarks.transformed(&transform), transform))
}

/// Crop size for a given outer-corner distance.
pub fn crop_size(corner_distance: f64, crop_factor: f64) -> (i64, i64) {
    let w = (crop_factor * corner_distance).round();
    let h = (w * f64::from(CANVAS_HEIGHT) / f64::from(CANVAS_WIDTH)).round();
    (w as i64, h as i64)
}

/// `(x0, y0, w, h)` of the crop box in the leveled image.
fn crop_window(landmarks: &LandmarkSet, config: &PreprocessConfig) -> Result<(i64, i64, i64, i64)> {
    let dy = landmarks.outer_right.y - landmarks.outer_left.y;
    if dy.abs() >= LEVEL_TOLERANCE_PX {
        return Err(PreprocessError::NotLevel(dy));
    }
    let (w, h) = crop_size(landmarks.corner_distance(), config.crop_factor);
    if w < 2 || h < 2 {
        return Err(PreprocessError::CropTooSmall(w, h));
    }
    let mid = landmarks.corner_midpoint();
    let x0 = (mid.x - (w - 1) as f64 / 2.0).round() as i64;
    let y0 = (mid.y - (h - 1) as f64 / 2.0).round() as i64;
    Ok((x0, y0, w, h))
}

/// Cuts a canvas-aspect box centered on the corner midpoint, zero-filling
/// whatever falls outside the source.
pub fn crop_eyes(
    raster: &Raster,
    landmarks: &LandmarkSet,
    config: &PreprocessConfig,
) -> Result<(Raster, LandmarkSet, AffineTransform2D)> {
    let (x0, y0, w, h) = crop_window(landmarks, config)?;
    let mut pixels = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            pixels.push(raster.get_or_zero(x0 + x, y0 + y));
        }
    }
    let out = Raster::from_pixels(w as u32, h as u32, pixels).expect("crop dimensions checked");
    let transform = AffineTransform2D::translation(-x0 as f64, -y0 as f64);
    Ok((out, landmarks.transformed(&transform), transform))
}

/// Centers `raster` on a black canvas; odd remainders go right and bottom.
pub fn pad_to_canvas(raster: &Raster, landmarks: &LandmarkSet) -> Result<CanvasImage> {
    let (w, h) = (raster.width(), raster.height());
    if w > CANVAS_WIDTH || h > CANVAS_HEIGHT {
        return Err(PreprocessError::Oversize(w, h));
    }
    let left = (CANVAS_WIDTH - w) / 2;
    let top = (CANVAS_HEIGHT - h) / 2;
    let mut canvas = Raster::new(CANVAS_WIDTH, CANVAS_HEIGHT, 0).expect("canvas is non-empty");
    for y in 0..h {
        for x in 0..w {
            canvas.set(x + left, y + top, raster.get(x, y));
        }
    }
    let transform = AffineTransform2D::translation(f64::from(left), f64::from(top));
    Ok(CanvasImage {
        raster: canvas,
        transform,
        landmarks: landmarks.transformed(&transform),
        border_fraction: 1.0 - f64::from(w * h) / f64::from(CANVAS_WIDTH * CANVAS_HEIGHT),
    })
}

/// Full pipeline with a single composed transform.
pub fn preprocess(raster: &Raster, landmarks: &LandmarkSet, config: &PreprocessConfig) -> Result<CanvasImage> {
    let stage = |stage: &'static str| move |e: PreprocessError| PreprocessError::Stage { stage, source: Box::new(e) };
    config.validate()?;
    // Rotation and crop fused: only the crop window of the leveled image is resampled.
    let roll = roll_angle(landmarks.outer_left, landmarks.outer_right).map_err(stage("roll"))?;
    let t_roll = AffineTransform2D::rotation_about(landmarks.corner_midpoint(), -roll.to_radians());
    let inv_roll = t_roll.inverse().map_err(stage("roll"))?;
    let lm_level = landmarks.transformed(&t_roll);
    let window = crop_window(&lm_level, config).map_err(stage("crop"))?;
    let cropped = warp_window(raster, &inv_roll, window)?;
    let t_crop = AffineTransform2D::translation(-window.0 as f64, -window.1 as f64);
    let lm_crop = lm_level.transformed(&t_crop);
    let mut canvas = pad_to_canvas(&cropped, &lm_crop).map_err(stage("pad"))?;
    let composed = t_roll.then(&t_crop).then(&canvas.transform);
    canvas.landmarks = landmarks.transformed(&composed);
    canvas.transform = composed;
    Ok(canvas)
}
