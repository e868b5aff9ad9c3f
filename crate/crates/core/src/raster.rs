//! Procedural grayscale eye-strip renderer and 8-bit raster buffers.

use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use nalgebra::{Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{roll_angle, LandmarkSet};
use crate::scene::{EyeLandmarks, SceneSample};

pub const BACKGROUND_LEVEL: u8 = 120;
pub const SCLERA_LEVEL: u8 = 230;
pub const IRIS_LEVEL: u8 = 80;
pub const PUPIL_LEVEL: u8 = 20;
pub const TEXTURE_AMPLITUDE: i16 = 8;

/// Sclera semi-minor axis as a fraction of the semi-major axis.
const SCLERA_ASPECT: f64 = 0.38;
const PUPIL_TO_IRIS: f64 = 0.4;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster must have non-zero size, got {0}x{1}")]
    EmptySize(u32, u32),
    #[error("pixel buffer holds {got} values, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("landmark {name} at ({x:.2}, {y:.2}) is outside the {width}x{height} frame")]
    OutOfFrame { name: String, x: f64, y: f64, width: u32, height: u32 },
    #[error("noise sigma must be >= 0, got {0}")]
    Sigma(f64),
    #[error("image i/o on {path}: {source}")]
    Image { path: String, #[source] source: image::ImageError },
    #[error("i/o on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, fill: u8) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptySize(width, height));
        }
        Ok(Self { width, height, pixels: vec![fill; width as usize * height as usize] })
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptySize(width, height));
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RasterError::BufferSize { got: pixels.len(), expected });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    /// Pixel value, or 0 outside the frame.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64) -> u8 {
        if x < 0 || y < 0 || x >= i64::from(self.width) || y >= i64::from(self.height) {
            0
        } else {
            self.get(x as u32, y as u32)
        }
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= f64::from(self.width - 1) && p.y <= f64::from(self.height - 1)
    }

    /// Writes a binary (P5) PGM with maxval 255.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let io = |e| RasterError::Io { path: path.display().to_string(), source: e };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        self.encode_pgm(&mut out)
            .map_err(|e| RasterError::Image { path: path.display().to_string(), source: e })?;
        out.flush().map_err(io)
    }

    pub fn encode_pgm<W: Write>(&self, out: W) -> image::ImageResult<()> {
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.pixels, self.width, self.height, ExtendedColorType::L8)
    }

    /// Reads any image the decoder understands, reducing color to luma.
    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| RasterError::Image { path: path.display().to_string(), source: e })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::from_pixels(w, h, img.into_raw())
    }
}

/// Landmarks carried alongside a rendered frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample_id: String,
    pub left: EyeAnnotation,
    pub right: EyeAnnotation,
    /// Roll of the outer-corner line in the image.
    pub roll_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeAnnotation {
    pub outer_corner: Point2<f64>,
    pub inner_corner: Point2<f64>,
    pub iris_center: Point2<f64>,
}

impl Annotation {
    /// Outer corners plus `[left inner, right inner, left iris, right iris]`.
    pub fn landmark_set(&self) -> LandmarkSet {
        LandmarkSet {
            outer_left: self.left.outer_corner,
            outer_right: self.right.outer_corner,
            extra: vec![
                self.left.inner_corner,
                self.right.inner_corner,
                self.left.iris_center,
                self.right.iris_center,
            ],
        }
    }

    fn named(&self) -> [(&'static str, Point2<f64>); 6] {
        [
            ("left.outer_corner", self.left.outer_corner),
            ("left.inner_corner", self.left.inner_corner),
            ("left.iris_center", self.left.iris_center),
            ("right.outer_corner", self.right.outer_corner),
            ("right.inner_corner", self.right.inner_corner),
            ("right.iris_center", self.right.iris_center),
        ]
    }
}

struct EyeShape {
    sclera_center: Point2<f64>,
    major_dir: Vector2<f64>,
    semi_major: f64,
    semi_minor: f64,
    iris_center: Point2<f64>,
    iris_radius: f64,
    pupil_radius: f64,
}

impl EyeShape {
    fn new(lm: &EyeLandmarks<Point2<f64>>, iris_radius: f64) -> Self {
        let axis = lm.outer_corner - lm.inner_corner;
        let semi_major = axis.norm() / 2.0;
        Self {
            sclera_center: nalgebra::center(&lm.outer_corner, &lm.inner_corner),
            major_dir: axis / axis.norm(),
            semi_major,
            semi_minor: semi_major * SCLERA_ASPECT,
            iris_center: lm.iris_center,
            iris_radius,
            pupil_radius: iris_radius * PUPIL_TO_IRIS,
        }
    }

    /// Base intensity at `p` if the eye covers it.
    fn level(&self, p: Point2<f64>) -> Option<u8> {
        let d = (p - self.iris_center).norm();
        if d <= self.pupil_radius {
            return Some(PUPIL_LEVEL);
        }
        if d <= self.iris_radius {
            return Some(IRIS_LEVEL);
        }
        let v = p - self.sclera_center;
        let a = v.dot(&self.major_dir) / self.semi_major;
        let b = (v.x * -self.major_dir.y + v.y * self.major_dir.x) / self.semi_minor;
        (a * a + b * b <= 1.0).then_some(SCLERA_LEVEL)
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let r = self.semi_major.max(self.iris_radius + (self.iris_center - self.sclera_center).norm());
        (self.sclera_center.x - r, self.sclera_center.y - r, self.sclera_center.x + r, self.sclera_center.y + r)
    }
}

/// Draws both eyes of `sample` on a textured background.
///
/// Pixel `(i, j)` has its center at coordinates `(i, j)`, the same convention
/// the landmarks use.
pub fn render_sample(sample: &SceneSample, resolution: (u32, u32), style_seed: u64) -> Result<(Raster, Annotation)> {
    let (width, height) = resolution;
    let mut raster = Raster::new(width, height, BACKGROUND_LEVEL)?;
    let lm = &sample.landmarks_2d;
    let eye = |e: &EyeLandmarks<Point2<f64>>| EyeAnnotation {
        outer_corner: e.outer_corner,
        inner_corner: e.inner_corner,
        iris_center: e.iris_center,
    };
    let roll_deg = roll_angle(lm.left.outer_corner, lm.right.outer_corner).unwrap_or(0.0);
    let annotation = Annotation { sample_id: sample.id(), left: eye(&lm.left), right: eye(&lm.right), roll_deg };
    for (name, p) in annotation.named() {
        if !raster.contains(&p) {
            return Err(RasterError::OutOfFrame { name: name.to_string(), x: p.x, y: p.y, width, height });
        }
    }

    let shapes = [
        EyeShape::new(&lm.left, sample.iris_radius_px.left),
        EyeShape::new(&lm.right, sample.iris_radius_px.right),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let mut texture = vec![0i16; raster.pixels.len()];
    for t in texture.iter_mut() {
        *t = rng.gen_range(-TEXTURE_AMPLITUDE..=TEXTURE_AMPLITUDE);
    }
    let mut base = vec![BACKGROUND_LEVEL; raster.pixels.len()];
    for shape in &shapes {
        let (x0, y0, x1, y1) = shape.bounds();
        let xs = (x0.floor().max(0.0) as u32)..=(x1.ceil().min(f64::from(width - 1)) as u32);
        let ys = (y0.floor().max(0.0) as u32)..=(y1.ceil().min(f64::from(height - 1)) as u32);
        for y in ys {
            for x in xs.clone() {
                let idx = y as usize * width as usize + x as usize;
                if let Some(level) = shape.level(Point2::new(f64::from(x), f64::from(y))) {
                    // iris and pupil win over the other eye's sclera
                    if level < base[idx] || base[idx] == BACKGROUND_LEVEL {
                        base[idx] = level;
                    }
                }
            }
        }
    }
    for ((px, &b), &t) in raster.pixels.iter_mut().zip(&base).zip(&texture) {
        *px = (i16::from(b) + t).clamp(0, 255) as u8;
    }
    Ok((raster, annotation))
}

/// Additive Gaussian intensity noise, rounded and clamped to `[0, 255]`.
pub fn add_noise(raster: &Raster, sigma: f64, seed: u64) -> Result<Raster> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(RasterError::Sigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(raster.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = raster
        .pixels
        .iter()
        .map(|&p| (f64::from(p) + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Raster { width: raster.width, height: raster.height, pixels })
}
