//! Scene geometry: points, boxes, the 14-keypoint taxonomy, box-local
//! canonicalization and scene-level augmentation.
//!
//! Conventions: world frame is right-handed with +Z up. A box's yaw is the
//! counter-clockwise angle of its heading about +Z, kept in `(-π, π]`. The
//! canonical (box-local) frame is centred on the box with +X along the
//! heading; it is not scaled by the box size.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Number of extra per-point features (intensity, elongation, timestamp).
pub const C_POINT: usize = 3;
/// Width of a point row: xyz plus the extra features.
pub const POINT_DIM: usize = 3 + C_POINT;
/// Number of keypoint classes.
pub const NUM_KEYPOINTS: usize = 14;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "head_center",
];

pub mod kp {
    pub const NOSE: usize = 0;
    pub const LEFT_SHOULDER: usize = 1;
    pub const LEFT_ELBOW: usize = 2;
    pub const LEFT_WRIST: usize = 3;
    pub const LEFT_HIP: usize = 4;
    pub const LEFT_KNEE: usize = 5;
    pub const LEFT_ANKLE: usize = 6;
    pub const RIGHT_SHOULDER: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const RIGHT_WRIST: usize = 9;
    pub const RIGHT_HIP: usize = 10;
    pub const RIGHT_KNEE: usize = 11;
    pub const RIGHT_ANKLE: usize = 12;
    pub const HEAD_CENTER: usize = 13;
}

/// Left/right relabeling applied when a scene is mirrored. Involution
/// fixing only the nose and the head center.
pub const FLIP_PERMUTATION: [usize; NUM_KEYPOINTS] = [0, 7, 8, 9, 10, 11, 12, 1, 2, 3, 4, 5, 6, 13];

/// Skeleton edges used for drawing wireframes.
pub const WIREFRAME: [(usize, usize); 13] = [
    (kp::LEFT_SHOULDER, kp::RIGHT_SHOULDER),
    (kp::LEFT_SHOULDER, kp::LEFT_ELBOW),
    (kp::LEFT_ELBOW, kp::LEFT_WRIST),
    (kp::RIGHT_SHOULDER, kp::RIGHT_ELBOW),
    (kp::RIGHT_ELBOW, kp::RIGHT_WRIST),
    (kp::LEFT_SHOULDER, kp::LEFT_HIP),
    (kp::RIGHT_SHOULDER, kp::RIGHT_HIP),
    (kp::LEFT_HIP, kp::RIGHT_HIP),
    (kp::LEFT_HIP, kp::LEFT_KNEE),
    (kp::LEFT_KNEE, kp::LEFT_ANKLE),
    (kp::RIGHT_HIP, kp::RIGHT_KNEE),
    (kp::RIGHT_KNEE, kp::RIGHT_ANKLE),
    (kp::HEAD_CENTER, kp::NOSE),
];

/// One LiDAR return. Extra features are normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; POINT_DIM]", into = "[f64; POINT_DIM]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub elongation: f64,
    pub timestamp: f64,
}

impl Point {
    pub fn new(position: Vec3, intensity: f64, elongation: f64, timestamp: f64) -> Self {
        Point {
            x: position[0],
            y: position[1],
            z: position[2],
            intensity,
            elongation,
            timestamp,
        }
    }

    #[inline]
    pub fn position(&self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn features(&self) -> [f64; C_POINT] {
        [self.intensity, self.elongation, self.timestamp]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; POINT_DIM] {
        [
            self.x,
            self.y,
            self.z,
            self.intensity,
            self.elongation,
            self.timestamp,
        ]
    }

    fn with_position(mut self, p: Vec3) -> Self {
        self.x = p[0];
        self.y = p[1];
        self.z = p[2];
        self
    }
}

impl From<[f64; POINT_DIM]> for Point {
    fn from(a: [f64; POINT_DIM]) -> Self {
        Point {
            x: a[0],
            y: a[1],
            z: a[2],
            intensity: a[3],
            elongation: a[4],
            timestamp: a[5],
        }
    }
}

impl From<Point> for [f64; POINT_DIM] {
    fn from(p: Point) -> Self {
        p.to_array()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    #[default]
    Pedestrian,
    Cyclist,
}

/// Oriented 3D box. `dims` is (length, width, height); length runs along
/// the heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub dims: Vec3,
    pub yaw: f64,
    pub class: ObjectClass,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: Vec3, dims: Vec3, yaw: f64, class: ObjectClass, score: f64) -> Result<Self> {
        let b = Box3D {
            center,
            dims,
            yaw: normalize_yaw(yaw),
            class,
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn pedestrian(center: Vec3, dims: Vec3, yaw: f64) -> Result<Self> {
        Self::new(center, dims, yaw, ObjectClass::Pedestrian, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().chain(self.dims.iter()).all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite center, dims or yaw".into()));
        }
        if self.dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidBox(format!(
                "dims must be strictly positive, got {:?}",
                self.dims
            )));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::InvalidBox(format!("yaw {} outside (-pi, pi]", self.yaw)));
        }
        Ok(())
    }

    /// Maps a world position into this box's canonical frame.
    #[inline]
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Maps a canonical-frame position back to the world frame.
    #[inline]
    pub fn to_world(&self, q: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        [
            c * q[0] - s * q[1] + self.center[0],
            s * q[0] + c * q[1] + self.center[1],
            q[2] + self.center[2],
        ]
    }

    /// Containment test in the canonical frame, with the box grown by
    /// `margin` on every side.
    pub fn contains_with_margin(&self, p: Vec3, margin: f64) -> bool {
        let q = self.to_local(p);
        (0..3).all(|k| q[k].abs() <= 0.5 * self.dims[k] + margin)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.contains_with_margin(p, 0.0)
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let hl = 0.5 * self.dims[0];
        let hw = 0.5 * self.dims[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| {
            let w = self.to_world([x, y, 0.0]);
            [w[0], w[1]]
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointState {
    /// No ground truth; ignored by every loss and metric.
    #[default]
    Absent,
    Occluded,
    Visible,
}

impl KeypointState {
    #[inline]
    pub fn is_annotated(self) -> bool {
        self != KeypointState::Absent
    }
}

/// The 14 keypoints of one person. Predicted sets additionally carry the
/// visibility probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub positions: [Vec3; NUM_KEYPOINTS],
    pub states: [KeypointState; NUM_KEYPOINTS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<[f64; NUM_KEYPOINTS]>,
}

impl KeypointSet {
    pub fn new(positions: [Vec3; NUM_KEYPOINTS], states: [KeypointState; NUM_KEYPOINTS]) -> Self {
        KeypointSet {
            positions,
            states,
            visibility: None,
        }
    }

    pub fn annotated_count(&self) -> usize {
        self.states.iter().filter(|s| s.is_annotated()).count()
    }

    pub fn map_positions(&self, mut f: impl FnMut(Vec3) -> Vec3) -> Self {
        KeypointSet {
            positions: self.positions.map(&mut f),
            states: self.states,
            visibility: self.visibility,
        }
    }

    /// Relabels left/right keypoints (positions, states and probabilities).
    pub fn swap_left_right(&self) -> Self {
        KeypointSet {
            positions: FLIP_PERMUTATION.map(|j| self.positions[j]),
            states: FLIP_PERMUTATION.map(|j| self.states[j]),
            visibility: self.visibility.map(|v| FLIP_PERMUTATION.map(|j| v[j])),
        }
    }
}

/// A labeled (or predicted) point-cloud frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub points: Vec<Point>,
    pub boxes: Vec<Box3D>,
    /// One entry per box.
    pub keypoints: Vec<Option<KeypointSet>>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() != self.boxes.len() {
            return Err(Error::Config(format!(
                "scene {}: {} keypoint entries for {} boxes",
                self.id,
                self.keypoints.len(),
                self.boxes.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("scene {} point {i}", self.id)));
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    /// Points of the scene that fall inside `b`.
    pub fn points_in_box(&self, b: &Box3D) -> Vec<Point> {
        self.points.iter().copied().filter(|p| b.contains(p.position())).collect()
    }
}

/// Rigid box-local transform: `R(-yaw)·(p - center)` with the extra
/// features copied through.
pub fn canonicalize(points: &[Point], b: &Box3D) -> Vec<Point> {
    points.iter().map(|p| p.with_position(b.to_local(p.position()))).collect()
}

/// Inverse of [`canonicalize`]'s rigid transform for keypoints.
pub fn decanonicalize(local: &[Vec3; NUM_KEYPOINTS], b: &Box3D) -> [Vec3; NUM_KEYPOINTS] {
    local.map(|q| b.to_world(q))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipAxis {
    /// Mirror across the X axis (negates y).
    X,
    /// Mirror across the Y axis (negates x).
    Y,
}

fn mirror(p: Vec3, axis: FlipAxis) -> Vec3 {
    match axis {
        FlipAxis::X => [p[0], -p[1], p[2]],
        FlipAxis::Y => [-p[0], p[1], p[2]],
    }
}

fn mirror_yaw(yaw: f64, axis: FlipAxis) -> f64 {
    match axis {
        FlipAxis::X => normalize_yaw(-yaw),
        FlipAxis::Y => {
            if yaw >= 0.0 {
                PI - yaw
            } else {
                -PI - yaw
            }
        }
    }
}

/// Mirrors a scene, swapping left and right keypoint labels.
pub fn flip_scene(scene: &Scene, axis: FlipAxis) -> Scene {
    Scene {
        id: scene.id.clone(),
        points: scene
            .points
            .iter()
            .map(|p| p.with_position(mirror(p.position(), axis)))
            .collect(),
        boxes: scene
            .boxes
            .iter()
            .map(|b| Box3D {
                center: mirror(b.center, axis),
                yaw: normalize_yaw(mirror_yaw(b.yaw, axis)),
                ..*b
            })
            .collect(),
        keypoints: scene
            .keypoints
            .iter()
            .map(|k| {
                k.as_ref()
                    .map(|k| k.map_positions(|p| mirror(p, axis)).swap_left_right())
            })
            .collect(),
    }
}

/// Sampling ranges for [`global_augment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub scale: (f64, f64),
    pub rotation: (f64, f64),
    pub translation: f64,
    pub flip_probability: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            scale: (0.95, 1.05),
            rotation: (-PI / 4.0, PI / 4.0),
            translation: 0.5,
            flip_probability: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Vec3,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            scale: 1.0,
            rotation: 0.0,
            translation: [0.0; 3],
            flip_x: false,
            flip_y: false,
        }
    }
}

impl AugmentParams {
    pub fn sample<R: Rng + ?Sized>(ranges: &AugmentRanges, rng: &mut R) -> Self {
        let t = ranges.translation;
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let scale = uniform(ranges.scale.0, ranges.scale.1);
        let rotation = uniform(ranges.rotation.0, ranges.rotation.1);
        let translation = [uniform(-t, t), uniform(-t, t), uniform(-t, t)];
        AugmentParams {
            scale,
            rotation,
            translation,
            flip_x: rng.gen_bool(ranges.flip_probability),
            flip_y: rng.gen_bool(ranges.flip_probability),
        }
    }
}

/// Applies flips, then a similarity transform (scale, rotation about +Z,
/// translation) jointly to points, boxes and keypoints.
pub fn global_augment(scene: &Scene, params: &AugmentParams) -> Result<Scene> {
    if !(params.scale > 0.0) || !params.scale.is_finite() {
        return Err(Error::Config(format!(
            "augmentation scale must be positive, got {}",
            params.scale
        )));
    }
    let mut out = scene.clone();
    if params.flip_x {
        out = flip_scene(&out, FlipAxis::X);
    }
    if params.flip_y {
        out = flip_scene(&out, FlipAxis::Y);
    }
    let (s, c) = params.rotation.sin_cos();
    let k = params.scale;
    let t = params.translation;
    let apply = |p: Vec3| -> Vec3 {
        [
            k * (c * p[0] - s * p[1]) + t[0],
            k * (s * p[0] + c * p[1]) + t[1],
            k * p[2] + t[2],
        ]
    };
    for p in &mut out.points {
        *p = p.with_position(apply(p.position()));
    }
    for b in &mut out.boxes {
        b.center = apply(b.center);
        b.dims = b.dims.map(|d| d * k);
        b.yaw = normalize_yaw(b.yaw + params.rotation);
    }
    for kps in out.keypoints.iter_mut().flatten() {
        *kps = kps.map_positions(apply);
    }
    Ok(out)
}

/// Area of a convex polygon given in counter-clockwise order.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a.abs()
}

/// Sutherland–Hodgman clip of a convex polygon by a convex clip polygon
/// (both counter-clockwise).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Bird's-eye-view IoU of two oriented boxes.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).max(0.0)
    }
}

pub fn bev_center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

#[inline]
pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
