//! Parametric 3D scene: screen, pinhole camera, binocular eye model and head
//! poses, plus the generators that turn them into annotated fixation samples.
//!
//! World frame: the screen lies in the plane `z = 0`, `x` grows to the right
//! and `y` grows downward as seen by a camera looking out of the screen, and
//! `z` points from the screen toward the subject. Eyes are named by the side
//! of the image they appear on, so the `left` eye has the smaller head-local
//! `x` coordinate.

use nalgebra::{Point2, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Half-width of the palpebral fissure as a multiple of the eyeball radius.
const CORNER_HALF_WIDTH_RATIO: f64 = 1.25;
/// How far in front of the eyeball center the corners sit, in eyeball radii.
const CORNER_DEPTH_RATIO: f64 = 0.5;
/// Minimum subject distance from the screen plane.
const MIN_SUBJECT_DISTANCE_MM: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("projection error: point at camera depth {depth_mm:.3} mm is not in front of the camera")]
    Projection { depth_mm: f64 },
    #[error("session {session_id}, point {point_index}: {source}")]
    Sample {
        session_id: usize,
        point_index: usize,
        #[source]
        source: Box<SceneError>,
    },
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenConfig {
    pub width_mm: f64,
    pub height_mm: f64,
    /// Top-left corner of the screen in world coordinates.
    pub origin_mm: Vec3,
    /// Camera position relative to the screen center.
    pub camera_offset_mm: Vec3,
}

impl ScreenConfig {
    pub fn centered(width_mm: f64, height_mm: f64, camera_offset_mm: Vec3) -> Self {
        Self {
            width_mm,
            height_mm,
            origin_mm: Vec3::new(-width_mm / 2.0, -height_mm / 2.0, 0.0),
            camera_offset_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mm > 0.0 && self.height_mm > 0.0) {
            return Err(SceneError::Config(format!(
                "screen extent must be positive, got {}x{} mm",
                self.width_mm, self.height_mm
            )));
        }
        if self.origin_mm.z != 0.0 {
            return Err(SceneError::Config("screen origin must lie on the z = 0 plane".into()));
        }
        Ok(())
    }

    /// World position of an in-screen coordinate measured from the top-left corner.
    pub fn to_world(&self, screen_mm: Point2<f64>) -> Vec3 {
        self.origin_mm + Vec3::new(screen_mm.x, screen_mm.y, 0.0)
    }

    pub fn center(&self) -> Vec3 {
        self.to_world(Point2::new(self.width_mm / 2.0, self.height_mm / 2.0))
    }

    pub fn camera_position(&self) -> Vec3 {
        self.center() + self.camera_offset_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_px: f64,
    pub principal_point_px: Point2<f64>,
    pub resolution_px: (u32, u32),
    pub position_mm: Vec3,
    /// Rotation taking world directions into the camera frame.
    pub orientation: Rotation3<f64>,
}

impl CameraModel {
    /// Camera at `position_mm` whose optical axis passes through `look_at_mm`,
    /// with image rows aligned to the world `y` axis.
    pub fn looking_at(
        focal_px: f64,
        resolution_px: (u32, u32),
        position_mm: Vec3,
        look_at_mm: Vec3,
    ) -> Result<Self> {
        if !(focal_px > 0.0) || resolution_px.0 == 0 || resolution_px.1 == 0 {
            return Err(SceneError::Config(format!(
                "camera needs focal > 0 and non-empty resolution, got f={focal_px}, {resolution_px:?}"
            )));
        }
        let forward = (look_at_mm - position_mm)
            .try_normalize(1e-12)
            .ok_or_else(|| SceneError::Config("camera look-at target equals its position".into()))?;
        let right = Vec3::y()
            .cross(&forward)
            .try_normalize(1e-12)
            .ok_or_else(|| SceneError::Config("camera cannot look along the vertical axis".into()))?;
        let down = forward.cross(&right);
        let world_to_cam = nalgebra::Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        Ok(Self {
            focal_px,
            principal_point_px: Point2::new(
                f64::from(resolution_px.0) / 2.0,
                f64::from(resolution_px.1) / 2.0,
            ),
            resolution_px,
            position_mm,
            orientation: Rotation3::from_matrix_unchecked(world_to_cam),
        })
    }

    pub fn to_camera_frame(&self, point_mm: &Vec3) -> Vec3 {
        self.orientation * (point_mm - self.position_mm)
    }

    pub fn depth(&self, point_mm: &Vec3) -> f64 {
        self.to_camera_frame(point_mm).z
    }
}

/// Pinhole projection of a world point to pixel coordinates.
pub fn project(camera: &CameraModel, point_mm: &Vec3) -> Result<Point2<f64>> {
    project_camera_frame(camera, &camera.to_camera_frame(point_mm))
}

/// Pinhole projection of a point already expressed in the camera frame.
pub fn project_camera_frame(camera: &CameraModel, p: &Vec3) -> Result<Point2<f64>> {
    if !(p.z > 0.0) {
        return Err(SceneError::Projection { depth_mm: p.z });
    }
    Ok(Point2::new(
        camera.focal_px * p.x / p.z + camera.principal_point_px.x,
        camera.focal_px * p.y / p.z + camera.principal_point_px.y,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeballParams {
    pub interocular_mm: f64,
    pub eyeball_radius_mm: f64,
    pub iris_radius_mm: f64,
    /// Angle between optical and visual axis; the visual axis sits nasally.
    pub kappa_deg: f64,
}

impl Default for EyeballParams {
    fn default() -> Self {
        Self {
            interocular_mm: 62.0,
            eyeball_radius_mm: 12.0,
            iris_radius_mm: 6.0,
            kappa_deg: 5.0,
        }
    }
}

impl EyeballParams {
    pub fn validate(&self) -> Result<()> {
        let lengths = [self.interocular_mm, self.eyeball_radius_mm, self.iris_radius_mm];
        if lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(SceneError::Config(format!("eye lengths must be positive: {self:?}")));
        }
        if self.iris_radius_mm >= self.eyeball_radius_mm {
            return Err(SceneError::Config("iris radius must be smaller than the eyeball radius".into()));
        }
        if !(0.0..15.0).contains(&self.kappa_deg) {
            return Err(SceneError::Config(format!("kappa must be in [0, 15) deg, got {}", self.kappa_deg)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    /// Midpoint between the two eyeball centers.
    pub position_mm: Vec3,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
}

impl HeadPose {
    pub fn validate(&self) -> Result<()> {
        if !(self.roll_deg.is_finite() && self.yaw_deg.is_finite() && self.pitch_deg.is_finite()) {
            return Err(SceneError::Config("head orientation must be finite".into()));
        }
        if !(self.position_mm.z > MIN_SUBJECT_DISTANCE_MM) {
            return Err(SceneError::Config(format!(
                "head must be more than {MIN_SUBJECT_DISTANCE_MM} mm from the screen plane, got z = {}",
                self.position_mm.z
            )));
        }
        Ok(())
    }

    /// Head-local to world rotation: yaw about `y`, then pitch about `x`, then roll about `z`.
    pub fn rotation(&self) -> Rotation3<f64> {
        let yaw = Rotation3::from_axis_angle(&Vec3::y_axis(), self.yaw_deg.to_radians());
        let pitch = Rotation3::from_axis_angle(&Vec3::x_axis(), self.pitch_deg.to_radians());
        let roll = Rotation3::from_axis_angle(&Vec3::z_axis(), self.roll_deg.to_radians());
        yaw * pitch * roll
    }

    /// Direction the face points in (toward the screen when unrotated).
    pub fn facing(&self) -> Vec3 {
        self.rotation() * Vec3::new(0.0, 0.0, -1.0)
    }

    /// Pose at `position_mm` whose face points at `look_at_mm`.
    pub fn facing_point(position_mm: Vec3, look_at_mm: Vec3, roll_deg: f64) -> Self {
        let d = (look_at_mm - position_mm).normalize();
        Self {
            position_mm,
            yaw_deg: (-d.x).atan2(-d.z).to_degrees(),
            pitch_deg: d.y.clamp(-1.0, 1.0).asin().to_degrees(),
            roll_deg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeTarget {
    pub index: usize,
    pub position_mm: Vec3,
    pub position_screen_mm: Point2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeRay {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
}

impl GazeRay {
    pub fn distance_to(&self, point: &Vec3) -> f64 {
        let v = point - self.origin;
        let t = v.dot(&self.direction);
        (v - self.direction * t).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeLandmarks<P> {
    pub outer_corner: P,
    pub inner_corner: P,
    pub iris_center: P,
    pub pupil_center: P,
}

impl<P> EyeLandmarks<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> EyeLandmarks<Q> {
        EyeLandmarks {
            outer_corner: f(&self.outer_corner),
            inner_corner: f(&self.inner_corner),
            iris_center: f(&self.iris_center),
            pupil_center: f(&self.pupil_center),
        }
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&P) -> Result<Q, E>) -> Result<EyeLandmarks<Q>, E> {
        Ok(EyeLandmarks {
            outer_corner: f(&self.outer_corner)?,
            inner_corner: f(&self.inner_corner)?,
            iris_center: f(&self.iris_center)?,
            pupil_center: f(&self.pupil_center)?,
        })
    }

    pub fn named(&self) -> [(&'static str, &P); 4] {
        [
            ("outer_corner", &self.outer_corner),
            ("inner_corner", &self.inner_corner),
            ("iris_center", &self.iris_center),
            ("pupil_center", &self.pupil_center),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binocular<T> {
    pub left: T,
    pub right: T,
}

impl<T> Binocular<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Binocular<U> {
        Binocular { left: f(&self.left), right: f(&self.right) }
    }
}

/// Geometry of both eyes for one fixation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinocularGaze {
    pub eyeball_centers: Binocular<Vec3>,
    pub rays: Binocular<GazeRay>,
    pub optical_axes: Binocular<Vec3>,
    pub landmarks: Binocular<EyeLandmarks<Vec3>>,
}

/// Visual and optical axes of both eyes fixating `target`, with the 3D eye landmarks.
pub fn gaze_rays(eyes: &EyeballParams, pose: &HeadPose, target: &GazeTarget) -> Result<BinocularGaze> {
    let facing = pose.facing();
    if (target.position_mm - pose.position_mm).dot(&facing) <= 0.0 {
        return Err(SceneError::Geometry(format!(
            "target {} lies behind the subject",
            target.index
        )));
    }
    let rot = pose.rotation();
    let half_io = eyes.interocular_mm / 2.0;
    let r = eyes.eyeball_radius_mm;
    let limbus_depth = (r * r - eyes.iris_radius_mm * eyes.iris_radius_mm).sqrt();
    let kappa = eyes.kappa_deg.to_radians();

    // side = -1 for the left eye, +1 for the right; temporal is outward along x.
    let eye = |side: f64| -> Result<(Vec3, GazeRay, Vec3, EyeLandmarks<Vec3>)> {
        let center = pose.position_mm + rot * Vec3::new(side * half_io, 0.0, 0.0);
        let visual = (target.position_mm - center).normalize();
        let temporal = rot * Vec3::new(side, 0.0, 0.0);
        let perp = (temporal - visual * temporal.dot(&visual))
            .try_normalize(1e-12)
            .ok_or_else(|| SceneError::Geometry("visual axis parallel to the eye line".into()))?;
        let optical = visual * kappa.cos() + perp * kappa.sin();
        let corner = |lateral: f64| {
            center
                + rot
                    * Vec3::new(
                        side * lateral * CORNER_HALF_WIDTH_RATIO * r,
                        0.0,
                        -CORNER_DEPTH_RATIO * r,
                    )
        };
        let landmarks = EyeLandmarks {
            outer_corner: corner(1.0),
            inner_corner: corner(-1.0),
            iris_center: center + optical * limbus_depth,
            pupil_center: center + optical * r,
        };
        Ok((center, GazeRay { origin: center, direction: visual }, optical, landmarks))
    };
    let (lc, lray, lopt, llm) = eye(-1.0)?;
    let (rc, rray, ropt, rlm) = eye(1.0)?;
    Ok(BinocularGaze {
        eyeball_centers: Binocular { left: lc, right: rc },
        rays: Binocular { left: lray, right: rray },
        optical_axes: Binocular { left: lopt, right: ropt },
        landmarks: Binocular { left: llm, right: rlm },
    })
}

/// Evenly spaced `rows x cols` targets over the screen inset by `margin_mm`, row-major.
pub fn build_grid(rows: usize, cols: usize, screen: &ScreenConfig, margin_mm: f64) -> Result<Vec<GazeTarget>> {
    if rows == 0 || cols == 0 {
        return Err(SceneError::Config(format!("grid needs at least one row and column, got {rows}x{cols}")));
    }
    screen.validate()?;
    let usable_w = screen.width_mm - 2.0 * margin_mm;
    let usable_h = screen.height_mm - 2.0 * margin_mm;
    if !(usable_w > 0.0 && usable_h > 0.0) || margin_mm < 0.0 {
        return Err(SceneError::Config(format!(
            "margin {margin_mm} mm leaves no usable area on a {}x{} mm screen",
            screen.width_mm, screen.height_mm
        )));
    }
    let axis = |n: usize, usable: f64, i: usize| {
        if n == 1 {
            margin_mm + usable / 2.0
        } else {
            margin_mm + usable * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let s = Point2::new(axis(cols, usable_w, c), axis(rows, usable_h, r));
            out.push(GazeTarget { index: out.len(), position_mm: screen.to_world(s), position_screen_mm: s });
        }
    }
    Ok(out)
}

/// Target layout of one gazing grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridLayout {
    Lattice { rows: usize, cols: usize },
    /// A lattice plus one extra target at the screen center (e.g. 4x4 + 1 = 17).
    LatticeWithCenter { rows: usize, cols: usize },
}

impl GridLayout {
    pub fn len(&self) -> usize {
        match *self {
            GridLayout::Lattice { rows, cols } => rows * cols,
            GridLayout::LatticeWithCenter { rows, cols } => rows * cols + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn build(&self, screen: &ScreenConfig, margin_mm: f64) -> Result<Vec<GazeTarget>> {
        match *self {
            GridLayout::Lattice { rows, cols } => build_grid(rows, cols, screen, margin_mm),
            GridLayout::LatticeWithCenter { rows, cols } => {
                let mut grid = build_grid(rows, cols, screen, margin_mm)?;
                let mut center = build_grid(1, 1, screen, margin_mm)?[0];
                center.index = grid.len();
                grid.push(center);
                Ok(grid)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisRange {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    pub fn new(count: usize, min: f64, max: f64) -> Self {
        Self { count, min, max }
    }

    fn positions(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![(self.min + self.max) / 2.0];
        }
        (0..self.count)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseLatticeConfig {
    pub x_mm: AxisRange,
    pub y_mm: AxisRange,
    pub z_mm: AxisRange,
    /// Maximum absolute roll added per lattice position.
    pub roll_jitter_deg: f64,
    pub roll_seed: u64,
}

/// Cartesian product of head positions (`x` slowest, `z` fastest), each facing `look_at_mm`.
pub fn head_pose_lattice(config: &PoseLatticeConfig, look_at_mm: Vec3) -> Result<Vec<HeadPose>> {
    for (name, axis) in [("x", &config.x_mm), ("y", &config.y_mm), ("z", &config.z_mm)] {
        if axis.count == 0 {
            return Err(SceneError::Config(format!("pose axis {name} needs count >= 1")));
        }
        if !(axis.min.is_finite() && axis.max.is_finite()) {
            return Err(SceneError::Config(format!("pose axis {name} range must be finite")));
        }
    }
    if !(config.roll_jitter_deg.is_finite() && config.roll_jitter_deg >= 0.0) {
        return Err(SceneError::Config("roll jitter must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.roll_seed);
    let mut poses = Vec::new();
    for &x in &config.x_mm.positions() {
        for &y in &config.y_mm.positions() {
            for &z in &config.z_mm.positions() {
                let roll = if config.roll_jitter_deg > 0.0 {
                    rng.gen_range(-config.roll_jitter_deg..=config.roll_jitter_deg)
                } else {
                    0.0
                };
                let pose = HeadPose::facing_point(Vec3::new(x, y, z), look_at_mm, roll);
                pose.validate()?;
                poses.push(pose);
            }
        }
    }
    Ok(poses)
}

/// One fixation with full ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub user_id: usize,
    pub session_id: usize,
    pub target: GazeTarget,
    pub head_pose: HeadPose,
    pub landmarks_3d: Binocular<EyeLandmarks<Vec3>>,
    pub landmarks_2d: Binocular<EyeLandmarks<Point2<f64>>>,
    pub gaze_rays: Binocular<GazeRay>,
    /// Projected iris radius of each eye.
    pub iris_radius_px: Binocular<f64>,
    pub camera_distance_mm: f64,
}

impl SceneSample {
    pub fn id(&self) -> String {
        format!("u{}/s{}/p{}", self.user_id, self.session_id, self.target.index)
    }
}

/// A simulated subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserParams {
    pub user_id: usize,
    pub eyes: EyeballParams,
    pub appearance_seed: u64,
}

/// The fixed parts of a recording setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub screen: ScreenConfig,
    pub camera: CameraModel,
}

/// One sample per grid target for `user` holding `pose`.
pub fn generate_session(
    user: &UserParams,
    session_id: usize,
    pose: &HeadPose,
    grid: &[GazeTarget],
    scene: &Scene,
) -> Result<Vec<SceneSample>> {
    user.eyes.validate()?;
    pose.validate()?;
    let camera = &scene.camera;
    let wrap = |index: usize| move |e: SceneError| SceneError::Sample {
        session_id,
        point_index: index,
        source: Box::new(e),
    };
    grid.iter()
        .map(|target| {
            let gaze = gaze_rays(&user.eyes, pose, target).map_err(wrap(target.index))?;
            let landmarks_2d = Binocular {
                left: gaze.landmarks.left.try_map(|p| project(camera, p)),
                right: gaze.landmarks.right.try_map(|p| project(camera, p)),
            };
            let landmarks_2d = Binocular {
                left: landmarks_2d.left.map_err(wrap(target.index))?,
                right: landmarks_2d.right.map_err(wrap(target.index))?,
            };
            let iris_radius_px = gaze.landmarks.map(|lm| {
                camera.focal_px * user.eyes.iris_radius_mm / camera.depth(&lm.iris_center)
            });
            Ok(SceneSample {
                user_id: user.user_id,
                session_id,
                target: *target,
                head_pose: *pose,
                landmarks_3d: gaze.landmarks,
                landmarks_2d,
                gaze_rays: gaze.rays,
                iris_radius_px,
                camera_distance_mm: (target.position_mm - camera.position_mm).norm(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub min: f64,
    pub max: f64,
}

impl ParamRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeParamRanges {
    pub interocular_mm: ParamRange,
    pub eyeball_radius_mm: ParamRange,
    pub iris_radius_mm: ParamRange,
    pub kappa_deg: ParamRange,
}

impl Default for EyeParamRanges {
    fn default() -> Self {
        Self {
            interocular_mm: ParamRange::new(58.0, 66.0),
            eyeball_radius_mm: ParamRange::new(11.5, 12.5),
            iris_radius_mm: ParamRange::new(5.7, 6.3),
            kappa_deg: ParamRange::new(3.0, 7.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionPlan {
    pub pose: usize,
    pub grid: usize,
}

/// Which (pose, grid) pairs are recorded per user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionSchedule {
    /// Every grid from every pose; `limit` keeps that many evenly spaced poses.
    AllPoses { limit: Option<usize> },
    Explicit { sessions: Vec<SessionPlan> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProfileId {
    /// Camera centered on the screen.
    U,
    /// Camera above the screen's top edge.
    I,
}

impl std::fmt::Display for ProfileId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProfileId::U => "U",
            ProfileId::I => "I",
        })
    }
}

impl std::str::FromStr for ProfileId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "U" | "u" => Ok(ProfileId::U),
            "I" | "i" => Ok(ProfileId::I),
            other => Err(format!("unknown profile '{other}', expected U or I")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub id: ProfileId,
    pub screen: ScreenConfig,
    pub focal_px: f64,
    pub resolution_px: (u32, u32),
    /// Point the camera is aimed at.
    pub camera_look_at_mm: Vec3,
    pub grid_margin_mm: f64,
    pub grids: Vec<GridLayout>,
    pub poses: PoseLatticeConfig,
    pub sessions: SessionSchedule,
    pub eye_ranges: EyeParamRanges,
    /// Gaussian sensor noise added after rendering.
    pub noise_sigma: f64,
    /// Standard deviation (px) of the error in the labelled outer eye
    /// corners handed to preprocessing, emulating manual annotation.
    pub label_jitter_px: f64,
}

impl ProfileConfig {
    /// Camera centered on the screen, 125-pose lattice, 15- and 32-point grids.
    pub fn profile_u() -> Self {
        Self {
            id: ProfileId::U,
            screen: ScreenConfig::centered(400.0, 300.0, Vec3::zeros()),
            focal_px: 1100.0,
            resolution_px: (640, 360),
            camera_look_at_mm: Vec3::new(0.0, 0.0, 550.0),
            grid_margin_mm: 20.0,
            grids: vec![
                GridLayout::Lattice { rows: 3, cols: 5 },
                GridLayout::Lattice { rows: 4, cols: 8 },
            ],
            poses: PoseLatticeConfig {
                x_mm: AxisRange::new(5, -30.0, 30.0),
                y_mm: AxisRange::new(5, -20.0, 20.0),
                z_mm: AxisRange::new(5, 450.0, 650.0),
                roll_jitter_deg: 10.0,
                roll_seed: 0x5eed_0001,
            },
            sessions: SessionSchedule::AllPoses { limit: None },
            // synthetic subjects stay close to the physiological defaults
            eye_ranges: EyeParamRanges {
                interocular_mm: ParamRange::new(61.0, 63.0),
                eyeball_radius_mm: ParamRange::new(11.875, 12.125),
                iris_radius_mm: ParamRange::new(5.925, 6.075),
                kappa_deg: ParamRange::new(4.5, 5.5),
            },
            noise_sigma: 0.0,
            label_jitter_px: 0.0,
        }
    }

    /// Camera 30 mm above the top edge, 8-pose lattice, 65- and 17-point grids,
    /// four central sessions per user.
    pub fn profile_i() -> Self {
        Self {
            id: ProfileId::I,
            screen: ScreenConfig::centered(400.0, 300.0, Vec3::new(0.0, -180.0, 0.0)),
            focal_px: 1100.0,
            resolution_px: (640, 360),
            camera_look_at_mm: Vec3::new(0.0, 0.0, 550.0),
            grid_margin_mm: 20.0,
            grids: vec![
                GridLayout::Lattice { rows: 5, cols: 13 },
                GridLayout::LatticeWithCenter { rows: 4, cols: 4 },
            ],
            poses: PoseLatticeConfig {
                x_mm: AxisRange::new(2, -25.0, 25.0),
                y_mm: AxisRange::new(2, -10.0, 30.0),
                z_mm: AxisRange::new(2, 470.0, 630.0),
                roll_jitter_deg: 10.0,
                roll_seed: 0x5eed_0002,
            },
            sessions: SessionSchedule::Explicit {
                sessions: vec![
                    SessionPlan { pose: 0, grid: 0 },
                    SessionPlan { pose: 5, grid: 1 },
                    SessionPlan { pose: 7, grid: 0 },
                    SessionPlan { pose: 2, grid: 1 },
                ],
            },
            eye_ranges: EyeParamRanges {
                interocular_mm: ParamRange::new(56.0, 68.0),
                eyeball_radius_mm: ParamRange::new(11.3, 12.7),
                iris_radius_mm: ParamRange::new(5.5, 6.5),
                kappa_deg: ParamRange::new(2.0, 8.0),
            },
            noise_sigma: 6.0,
            label_jitter_px: 1.0,
        }
    }

    pub fn default_for(id: ProfileId) -> Self {
        match id {
            ProfileId::U => Self::profile_u(),
            ProfileId::I => Self::profile_i(),
        }
    }

    pub fn scene(&self) -> Result<Scene> {
        self.screen.validate()?;
        let camera = CameraModel::looking_at(
            self.focal_px,
            self.resolution_px,
            self.screen.camera_position(),
            self.camera_look_at_mm,
        )?;
        Ok(Scene { screen: self.screen.clone(), camera })
    }

    pub fn pose_lattice(&self) -> Result<Vec<HeadPose>> {
        head_pose_lattice(&self.poses, self.screen.center())
    }

    pub fn grid_targets(&self) -> Result<Vec<Vec<GazeTarget>>> {
        self.grids.iter().map(|g| g.build(&self.screen, self.grid_margin_mm)).collect()
    }

    /// Sessions recorded per user as (session id, pose index, grid index).
    pub fn session_plan(&self) -> Result<Vec<SessionPlan>> {
        let n_poses = self.poses.x_mm.count * self.poses.y_mm.count * self.poses.z_mm.count;
        let plan = match &self.sessions {
            SessionSchedule::AllPoses { limit } => {
                let poses: Vec<usize> = match *limit {
                    Some(0) => return Err(SceneError::Config("pose limit must be >= 1".into())),
                    Some(k) if k < n_poses => (0..k).map(|i| i * (n_poses - 1) / (k - 1).max(1)).collect(),
                    _ => (0..n_poses).collect(),
                };
                poses
                    .into_iter()
                    .flat_map(|pose| (0..self.grids.len()).map(move |grid| SessionPlan { pose, grid }))
                    .collect()
            }
            SessionSchedule::Explicit { sessions } => sessions.clone(),
        };
        for s in &plan {
            if s.pose >= n_poses || s.grid >= self.grids.len() {
                return Err(SceneError::Config(format!(
                    "session {s:?} references a missing pose or grid ({n_poses} poses, {} grids)",
                    self.grids.len()
                )));
            }
        }
        Ok(plan)
    }

    pub fn samples_per_user(&self) -> Result<usize> {
        Ok(self.session_plan()?.iter().map(|s| self.grids[s.grid].len()).sum())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene()?;
        self.pose_lattice()?;
        self.grid_targets()?;
        self.session_plan()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(SceneError::Config("noise sigma must be >= 0".into()));
        }
        if !(self.label_jitter_px >= 0.0 && self.label_jitter_px.is_finite()) {
            return Err(SceneError::Config("label jitter must be finite and >= 0".into()));
        }
        let r = &self.eye_ranges;
        for (name, range) in [
            ("interocular_mm", r.interocular_mm),
            ("eyeball_radius_mm", r.eyeball_radius_mm),
            ("iris_radius_mm", r.iris_radius_mm),
            ("kappa_deg", r.kappa_deg),
        ] {
            if !(range.min <= range.max) {
                return Err(SceneError::Config(format!("eye range {name} has min > max")));
            }
        }
        for eyes in [
            EyeballParams {
                interocular_mm: r.interocular_mm.min,
                eyeball_radius_mm: r.eyeball_radius_mm.min,
                iris_radius_mm: r.iris_radius_mm.max,
                kappa_deg: r.kappa_deg.min,
            },
            EyeballParams {
                interocular_mm: r.interocular_mm.max,
                eyeball_radius_mm: r.eyeball_radius_mm.max,
                iris_radius_mm: r.iris_radius_mm.min,
                kappa_deg: r.kappa_deg.max,
            },
        ] {
            eyes.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: usize,
    pub pose_index: usize,
    pub grid_index: usize,
    pub grid_points: usize,
    pub samples: Vec<SceneSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortUser {
    pub params: UserParams,
    pub sessions: Vec<Session>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub profile: ProfileConfig,
    pub scene: Scene,
    pub master_seed: u64,
    pub users: Vec<CohortUser>,
}

impl Cohort {
    pub fn sample_count(&self) -> usize {
        self.users
            .iter()
            .flat_map(|u| &u.sessions)
            .map(|s| s.samples.len())
            .sum()
    }
}

/// Per-user RNG: one ChaCha stream per user under the master seed.
pub fn user_rng(master_seed: u64, user_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(user_id as u64 + 1);
    rng
}

pub fn sample_user(ranges: &EyeParamRanges, master_seed: u64, user_id: usize) -> UserParams {
    let mut rng = user_rng(master_seed, user_id);
    let eyes = EyeballParams {
        interocular_mm: ranges.interocular_mm.sample(&mut rng),
        eyeball_radius_mm: ranges.eyeball_radius_mm.sample(&mut rng),
        iris_radius_mm: ranges.iris_radius_mm.sample(&mut rng),
        kappa_deg: ranges.kappa_deg.sample(&mut rng),
    };
    UserParams { user_id, eyes, appearance_seed: rng.gen() }
}

pub fn generate_cohort(n_users: usize, profile: &ProfileConfig, master_seed: u64) -> Result<Cohort> {
    if n_users == 0 {
        return Err(SceneError::Config("cohort needs at least one user".into()));
    }
    profile.validate()?;
    let scene = profile.scene()?;
    let poses = profile.pose_lattice()?;
    let grids = profile.grid_targets()?;
    let plan = profile.session_plan()?;
    let users = (0..n_users)
        .map(|user_id| {
            let params = sample_user(&profile.eye_ranges, master_seed, user_id);
            let sessions = plan
                .iter()
                .enumerate()
                .map(|(session_id, s)| {
                    let samples = generate_session(&params, session_id, &poses[s.pose], &grids[s.grid], &scene)?;
                    Ok(Session {
                        session_id,
                        pose_index: s.pose,
                        grid_index: s.grid,
                        grid_points: grids[s.grid].len(),
                        samples,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CohortUser { params, sessions })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { profile: profile.clone(), scene, master_seed, users })
}
