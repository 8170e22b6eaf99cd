//! Procedural pedestrian scenes: an articulated capsule skeleton, LiDAR-like
//! surface sampling with ray occlusion, point-count based visibility labels
//! and non-overlapping scene layout.
//!
//! A keypoint is labeled visible iff at least [`VISIBILITY_MIN_POINTS`] of the
//! person's rendered points lie within [`VISIBILITY_RADIUS`] of it, occluded
//! otherwise; independently it may be dropped to `Absent` to mimic partial
//! annotation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, dist3, kp, Box3D, KeypointSet, KeypointState, Point, Scene, Vec3, NUM_KEYPOINTS};

pub const VISIBILITY_RADIUS: f64 = 0.2;
pub const VISIBILITY_MIN_POINTS: usize = 3;
pub const BOX_PADDING: f64 = 0.1;
const MAX_PLACEMENT_RETRIES: usize = 100;

/// Skeleton node indices beyond the 14 keypoints.
pub const PELVIS: usize = 14;
pub const NECK: usize = 15;
pub const NUM_NODES: usize = 16;

/// A capsule: all points within `radius` of segment `a`–`b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn distance_to_axis(&self, p: Vec3) -> f64 {
        let (_, q) = closest_on_segment(self.a, self.b, p);
        dist3(p, q)
    }

    /// Signed distance from `p` to the capsule surface (negative inside).
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        self.distance_to_axis(p) - self.radius
    }

    fn area(&self) -> f64 {
        let l = dist3(self.a, self.b);
        2.0 * PI * self.radius * l + 4.0 * PI * self.radius * self.radius
    }

    /// Uniform sample on the capsule surface.
    fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let axis = sub(self.b, self.a);
        let l = norm(axis);
        let (u, v, w) = orthonormal_frame(axis);
        let cyl = 2.0 * PI * self.radius * l;
        let total = cyl + 4.0 * PI * self.radius * self.radius;
        if rng.gen::<f64>() * total < cyl {
            let t = rng.gen::<f64>();
            let phi = rng.gen::<f64>() * 2.0 * PI;
            let base = add(self.a, scale(axis, t));
            let dir = add(scale(u, phi.cos()), scale(v, phi.sin()));
            add(base, scale(dir, self.radius))
        } else {
            let d = random_unit(rng);
            let along = d[0] * w[0] + d[1] * w[1] + d[2] * w[2];
            let center = if along >= 0.0 { self.b } else { self.a };
            add(center, scale(d, self.radius))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    pub radius: f64,
}

/// Joint-angle limits in radians, `(min, max)`. Left and right limbs share
/// the same limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLimits {
    pub torso_lean: (f64, f64),
    pub head_yaw: (f64, f64),
    pub shoulder_flex: (f64, f64),
    pub shoulder_abduction: (f64, f64),
    pub elbow_flex: (f64, f64),
    pub hip_flex: (f64, f64),
    pub hip_abduction: (f64, f64),
    pub knee_flex: (f64, f64),
}

impl Default for PoseLimits {
    fn default() -> Self {
        PoseLimits {
            torso_lean: (-0.15, 0.35),
            head_yaw: (-0.7, 0.7),
            shoulder_flex: (-0.8, 1.4),
            shoulder_abduction: (0.0, 1.2),
            elbow_flex: (0.0, 2.0),
            hip_flex: (-0.5, 1.0),
            hip_abduction: (0.0, 0.35),
            knee_flex: (0.0, 1.6),
        }
    }
}

/// Joint angles of one sampled pose. Per-limb arrays are `[left, right]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub torso_lean: f64,
    pub head_yaw: f64,
    pub shoulder_flex: [f64; 2],
    pub shoulder_abduction: [f64; 2],
    pub elbow_flex: [f64; 2],
    pub hip_flex: [f64; 2],
    pub hip_abduction: [f64; 2],
    pub knee_flex: [f64; 2],
}

impl PoseParams {
    pub fn within(&self, lim: &PoseLimits) -> bool {
        let ok = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        ok(self.torso_lean, lim.torso_lean)
            && ok(self.head_yaw, lim.head_yaw)
            && (0..2).all(|s| {
                ok(self.shoulder_flex[s], lim.shoulder_flex)
                    && ok(self.shoulder_abduction[s], lim.shoulder_abduction)
                    && ok(self.elbow_flex[s], lim.elbow_flex)
                    && ok(self.hip_flex[s], lim.hip_flex)
                    && ok(self.hip_abduction[s], lim.hip_abduction)
                    && ok(self.knee_flex[s], lim.knee_flex)
            })
    }
}

/// Rest pose and capsule radii of the articulated body. Person frame: +X
/// forward, +Y to the person's left, +Z up, origin on the ground below the
/// pelvis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTemplate {
    pub rest: Vec<Vec3>,
    pub parent: Vec<Option<usize>>,
    pub bones: Vec<Bone>,
    pub limits: PoseLimits,
}

impl Default for SkeletonTemplate {
    fn default() -> Self {
        let mut rest = vec![[0.0; 3]; NUM_NODES];
        let mut parent = vec![None; NUM_NODES];
        let mut set = |i: usize, p: Vec3, par: usize| {
            rest[i] = p;
            parent[i] = Some(par);
        };
        set(kp::LEFT_HIP, [0.0, 0.10, 0.92], PELVIS);
        set(kp::LEFT_KNEE, [0.0, 0.10, 0.50], kp::LEFT_HIP);
        set(kp::LEFT_ANKLE, [0.0, 0.10, 0.09], kp::LEFT_KNEE);
        set(kp::RIGHT_HIP, [0.0, -0.10, 0.92], PELVIS);
        set(kp::RIGHT_KNEE, [0.0, -0.10, 0.50], kp::RIGHT_HIP);
        set(kp::RIGHT_ANKLE, [0.0, -0.10, 0.09], kp::RIGHT_KNEE);
        set(NECK, [0.0, 0.0, 1.45], PELVIS);
        set(kp::LEFT_SHOULDER, [0.0, 0.19, 1.42], NECK);
        set(kp::LEFT_ELBOW, [0.0, 0.21, 1.14], kp::LEFT_SHOULDER);
        set(kp::LEFT_WRIST, [0.0, 0.22, 0.89], kp::LEFT_ELBOW);
        set(kp::RIGHT_SHOULDER, [0.0, -0.19, 1.42], NECK);
        set(kp::RIGHT_ELBOW, [0.0, -0.21, 1.14], kp::RIGHT_SHOULDER);
        set(kp::RIGHT_WRIST, [0.0, -0.22, 0.89], kp::RIGHT_ELBOW);
        set(kp::HEAD_CENTER, [0.0, 0.0, 1.63], NECK);
        set(kp::NOSE, [0.10, 0.0, 1.63], kp::HEAD_CENTER);
        rest[PELVIS] = [0.0, 0.0, 0.95];

        let bone = |parent: usize, child: usize, radius: f64| Bone { parent, child, radius };
        let bones = vec![
            bone(PELVIS, NECK, 0.15),
            bone(PELVIS, kp::LEFT_HIP, 0.09),
            bone(PELVIS, kp::RIGHT_HIP, 0.09),
            bone(kp::LEFT_HIP, kp::LEFT_KNEE, 0.07),
            bone(kp::RIGHT_HIP, kp::RIGHT_KNEE, 0.07),
            bone(kp::LEFT_KNEE, kp::LEFT_ANKLE, 0.055),
            bone(kp::RIGHT_KNEE, kp::RIGHT_ANKLE, 0.055),
            bone(NECK, kp::LEFT_SHOULDER, 0.06),
            bone(NECK, kp::RIGHT_SHOULDER, 0.06),
            bone(kp::LEFT_SHOULDER, kp::LEFT_ELBOW, 0.045),
            bone(kp::RIGHT_SHOULDER, kp::RIGHT_ELBOW, 0.045),
            bone(kp::LEFT_ELBOW, kp::LEFT_WRIST, 0.04),
            bone(kp::RIGHT_ELBOW, kp::RIGHT_WRIST, 0.04),
            bone(NECK, kp::HEAD_CENTER, 0.1),
            bone(kp::HEAD_CENTER, kp::NOSE, 0.025),
        ];
        SkeletonTemplate {
            rest,
            parent,
            bones,
            limits: PoseLimits::default(),
        }
    }
}

impl SkeletonTemplate {
    /// Nodes ordered so that every parent precedes its children.
    fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![PELVIS];
        let mut i = 0;
        while i < order.len() {
            let n = order[i];
            for (c, p) in self.parent.iter().enumerate() {
                if *p == Some(n) {
                    order.push(c);
                }
            }
            i += 1;
        }
        order
    }

    /// Height from the ground to the top of the head capsule.
    pub fn rest_height(&self) -> f64 {
        self.bones
            .iter()
            .flat_map(|b| [self.rest[b.parent][2] + b.radius, self.rest[b.child][2] + b.radius])
            .fold(f64::MIN, f64::max)
    }

    pub fn bone_length(&self, parent: usize, child: usize) -> f64 {
        dist3(self.rest[parent], self.rest[child])
    }

    /// Forward kinematics: each edge rotates its child subtree about the
    /// parent joint; rotations compose down the tree.
    pub fn pose(&self, params: &PoseParams) -> Vec<Vec3> {
        let mut local = [IDENTITY; NUM_NODES];
        local[NECK] = rot_y(params.torso_lean);
        local[kp::NOSE] = rot_z(params.head_yaw);
        for (side, sign) in [(0usize, 1.0), (1usize, -1.0)] {
            let (elbow, wrist, knee, ankle) = if side == 0 {
                (kp::LEFT_ELBOW, kp::LEFT_WRIST, kp::LEFT_KNEE, kp::LEFT_ANKLE)
            } else {
                (kp::RIGHT_ELBOW, kp::RIGHT_WRIST, kp::RIGHT_KNEE, kp::RIGHT_ANKLE)
            };
            local[elbow] = mat_mul(
                &rot_y(-params.shoulder_flex[side]),
                &rot_x(sign * params.shoulder_abduction[side]),
            );
            local[wrist] = rot_y(-params.elbow_flex[side]);
            local[knee] = mat_mul(&rot_y(-params.hip_flex[side]), &rot_x(sign * params.hip_abduction[side]));
            local[ankle] = rot_y(params.knee_flex[side]);
        }
        let mut pos = self.rest.clone();
        let mut acc = [IDENTITY; NUM_NODES];
        for n in self.topological_order() {
            if let Some(p) = self.parent[n] {
                let r = mat_mul(&acc[p], &local[n]);
                let bone = sub(self.rest[n], self.rest[p]);
                pos[n] = add(pos[p], mat_vec(&r, bone));
                acc[n] = r;
            }
        }
        pos
    }

    pub fn capsules(&self, nodes: &[Vec3]) -> Vec<Capsule> {
        self.bones
            .iter()
            .map(|b| Capsule {
                a: nodes[b.parent],
                b: nodes[b.child],
                radius: b.radius,
            })
            .collect()
    }
}

/// A sampled body: all skeleton nodes (14 keypoints, pelvis, neck) and the
/// joint angles that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSkeleton {
    pub nodes: Vec<Vec3>,
    pub params: PoseParams,
}

impl SampledSkeleton {
    pub fn keypoints(&self) -> [Vec3; NUM_KEYPOINTS] {
        std::array::from_fn(|i| self.nodes[i])
    }
}

/// Draws joint angles uniformly within the template's limits and poses the
/// skeleton in the person frame.
pub fn sample_skeleton<R: Rng + ?Sized>(template: &SkeletonTemplate, rng: &mut R) -> SampledSkeleton {
    let lim = &template.limits;
    let mut u = |(lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let params = PoseParams {
        torso_lean: u(lim.torso_lean),
        head_yaw: u(lim.head_yaw),
        shoulder_flex: [u(lim.shoulder_flex), u(lim.shoulder_flex)],
        shoulder_abduction: [u(lim.shoulder_abduction), u(lim.shoulder_abduction)],
        elbow_flex: [u(lim.elbow_flex), u(lim.elbow_flex)],
        hip_flex: [u(lim.hip_flex), u(lim.hip_flex)],
        hip_abduction: [u(lim.hip_abduction), u(lim.hip_abduction)],
        knee_flex: [u(lim.knee_flex), u(lim.knee_flex)],
    };
    SampledSkeleton {
        nodes: template.pose(&params),
        params,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub points_per_person: (usize, usize),
    pub noise_sigma: f64,
    pub dropout: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            points_per_person: (100, 220),
            noise_sigma: 0.01,
            dropout: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub points: Vec<Point>,
    pub states: [KeypointState; NUM_KEYPOINTS],
}

/// Applies the visibility rule to a set of rendered points.
pub fn visibility_states(keypoints: &[Vec3; NUM_KEYPOINTS], points: &[Point]) -> [KeypointState; NUM_KEYPOINTS] {
    keypoints.map(|k| {
        let n = points
            .iter()
            .filter(|p| dist3(p.position(), k) <= VISIBILITY_RADIUS)
            .count();
        if n >= VISIBILITY_MIN_POINTS {
            KeypointState::Visible
        } else {
            KeypointState::Occluded
        }
    })
}

/// True when the straight segment from `from` to `to` passes through any
/// capsule (a small stand-off before `to` avoids self-hits at the surface).
pub fn segment_blocked(from: Vec3, to: Vec3, capsules: &[Capsule]) -> bool {
    let d = sub(to, from);
    let len = norm(d);
    if len <= 1e-9 {
        return false;
    }
    let end = add(from, scale(d, 1.0 - 1e-4 / len));
    capsules
        .iter()
        .any(|c| segment_segment_distance(from, end, c.a, c.b) < c.radius * (1.0 - 1e-9))
}

/// Samples LiDAR-like returns on the sensor-facing, unoccluded capsule
/// surfaces of one person and labels its keypoints.
pub fn render_points<R: Rng + ?Sized>(
    person: &[Capsule],
    keypoints: &[Vec3; NUM_KEYPOINTS],
    occluders: &[Capsule],
    sensor_origin: Vec3,
    config: &RenderConfig,
    rng: &mut R,
) -> Result<Rendered> {
    if !(config.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {} < 0", config.noise_sigma)));
    }
    if person
        .iter()
        .chain(occluders)
        .any(|c| c.distance_to_axis(sensor_origin) <= c.radius)
    {
        return Err(Error::Generation("sensor origin lies inside the body geometry".into()));
    }
    let (lo, hi) = config.points_per_person;
    let target = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let areas: Vec<f64> = person.iter().map(Capsule::area).collect();
    let total_area: f64 = areas.iter().sum();
    let all: Vec<Capsule> = person.iter().chain(occluders).copied().collect();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut points = Vec::with_capacity(target);
    let max_attempts = 40 * target;
    let mut attempts = 0;
    while points.len() < target && attempts < max_attempts && total_area > 0.0 {
        attempts += 1;
        let mut pick = rng.gen::<f64>() * total_area;
        let mut ci = 0;
        while ci + 1 < areas.len() && pick >= areas[ci] {
            pick -= areas[ci];
            ci += 1;
        }
        let s = person[ci].sample_surface(rng);
        if segment_blocked(sensor_origin, s, &all) {
            continue;
        }
        let p = if config.noise_sigma > 0.0 {
            [
                s[0] + noise.sample(rng),
                s[1] + noise.sample(rng),
                s[2] + noise.sample(rng),
            ]
        } else {
            s
        };
        points.push(Point::new(
            p,
            rng.gen_range(0.1..0.6),
            rng.gen_range(0.0..0.1),
            rng.gen::<f64>(),
        ));
    }
    let mut states = visibility_states(keypoints, &points);
    for s in states.iter_mut() {
        if rng.gen::<f64>() < config.dropout {
            *s = KeypointState::Absent;
        }
    }
    Ok(Rendered { points, states })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub humans_per_scene: (usize, usize),
    pub sensor_origin: Vec3,
    /// Range of BEV distances from the sensor at which people are placed.
    pub distance: (f64, f64),
    pub render: RenderConfig,
    pub clutter_points: usize,
    pub clutter_radius: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            humans_per_scene: (1, 2),
            sensor_origin: [0.0, 0.0, 1.8],
            distance: (4.0, 12.0),
            render: RenderConfig::default(),
            clutter_points: 120,
            clutter_radius: 15.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.humans_per_scene;
        let (p, q) = self.render.points_per_person;
        if a > b || p > q || !(self.distance.0 <= self.distance.1) || self.distance.0 < 0.0 {
            return Err(Error::Config("generator ranges must be non-empty".into()));
        }
        if !(self.render.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.render.dropout) {
            return Err(Error::Config("dropout must be in [0, 1]".into()));
        }
        Ok(())
    }
}

struct Placed {
    skeleton: SampledSkeleton,
    heading: f64,
    origin: Vec3,
    world_nodes: Vec<Vec3>,
}

fn person_to_world(p: Vec3, heading: f64, origin: Vec3) -> Vec3 {
    let (s, c) = heading.sin_cos();
    [c * p[0] - s * p[1] + origin[0], s * p[0] + c * p[1] + origin[1], p[2] + origin[2]]
}

/// Tight heading-aligned box around a person's points and keypoints,
/// padded by [`BOX_PADDING`].
pub fn tight_box(points: &[Point], keypoints: &[Vec3], heading: f64, origin: Vec3) -> Result<Box3D> {
    let frame = Box3D::pedestrian(origin, [1.0; 3], heading)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for q in points
        .iter()
        .map(|p| frame.to_local(p.position()))
        .chain(keypoints.iter().map(|k| frame.to_local(*k)))
    {
        for a in 0..3 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    let center_local = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let dims = [
        hi[0] - lo[0] + 2.0 * BOX_PADDING,
        hi[1] - lo[1] + 2.0 * BOX_PADDING,
        hi[2] - lo[2] + 2.0 * BOX_PADDING,
    ];
    Box3D::pedestrian(frame.to_world(center_local), dims, heading)
}

/// Generates one labeled scene.
pub fn compose_scene<R: Rng + ?Sized>(
    config: &GenConfig,
    template: &SkeletonTemplate,
    id: String,
    rng: &mut R,
) -> Result<Scene> {
    config.validate()?;
    let (a, b) = config.humans_per_scene;
    let count = if b > a { rng.gen_range(a..=b) } else { a };
    let max_radius = template.bones.iter().map(|b| b.radius).fold(0.0, f64::max);
    let footprint_pad = max_radius + BOX_PADDING + 5.0 * config.render.noise_sigma + 0.05;

    for _ in 0..MAX_PLACEMENT_RETRIES {
        // Place skeletons with non-overlapping conservative footprints.
        let mut placed: Vec<(Placed, f64)> = Vec::with_capacity(count);
        let mut failed = false;
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..MAX_PLACEMENT_RETRIES {
                let skeleton = sample_skeleton(template, rng);
                let heading = rng.gen_range(-PI..PI);
                let r = rng.gen_range(config.distance.0..=config.distance.1);
                let theta = rng.gen_range(-PI..PI);
                let origin = [r * theta.cos(), r * theta.sin(), 0.0];
                let reach = skeleton
                    .nodes
                    .iter()
                    .map(|n| n[0].hypot(n[1]))
                    .fold(0.0, f64::max)
                    + footprint_pad;
                let clear = placed.iter().all(|(p, pr)| {
                    (p.origin[0] - origin[0]).hypot(p.origin[1] - origin[1]) > pr + reach
                });
                let sensor_clear = origin[0].hypot(origin[1]) > reach;
                if clear && sensor_clear {
                    let world_nodes = skeleton
                        .nodes
                        .iter()
                        .map(|n| person_to_world(*n, heading, origin))
                        .collect();
                    placed.push((
                        Placed {
                            skeleton,
                            heading,
                            origin,
                            world_nodes,
                        },
                        reach,
                    ));
                    ok = true;
                    break;
                }
            }
            if !ok {
                failed = true;
                break;
            }
        }
        if failed {
            continue;
        }

        let capsules: Vec<Vec<Capsule>> = placed.iter().map(|(p, _)| template.capsules(&p.world_nodes)).collect();
        let mut points = Vec::new();
        let mut boxes = Vec::with_capacity(count);
        let mut keypoints = Vec::with_capacity(count);
        for (i, (p, _)) in placed.iter().enumerate() {
            let occluders: Vec<Capsule> = capsules
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            let kps: [Vec3; NUM_KEYPOINTS] = std::array::from_fn(|k| p.world_nodes[k]);
            let rendered = render_points(&capsules[i], &kps, &occluders, config.sensor_origin, &config.render, rng)?;
            let bx = tight_box(&rendered.points, &kps, p.heading, p.origin)?;
            debug_assert!(p.skeleton.params.within(&template.limits));
            points.extend_from_slice(&rendered.points);
            boxes.push(bx);
            keypoints.push(Some(KeypointSet::new(kps, rendered.states)));
        }
        let overlap = (0..boxes.len()).any(|i| (i + 1..boxes.len()).any(|j| bev_iou(&boxes[i], &boxes[j]) > 0.0));
        if overlap {
            continue;
        }

        let mut clutter = 0;
        let mut tries = 0;
        while clutter < config.clutter_points && tries < 20 * config.clutter_points.max(1) {
            tries += 1;
            let r = config.clutter_radius * rng.gen::<f64>().sqrt();
            let t = rng.gen_range(-PI..PI);
            let p = [r * t.cos(), r * t.sin(), rng.gen_range(-0.02..0.02)];
            if boxes.iter().any(|b| b.contains_with_margin([p[0], p[1], b.center[2]], 0.0)) {
                continue;
            }
            points.push(Point::new(p, rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.2), rng.gen::<f64>()));
            clutter += 1;
        }
        points.shuffle(rng);
        return Ok(Scene {
            id,
            points,
            boxes,
            keypoints,
        });
    }
    Err(Error::Generation(format!(
        "could not place {count} non-overlapping people after {MAX_PLACEMENT_RETRIES} retries"
    )))
}

/// Generates `count` scenes; scene `i` is a pure function of
/// `(config.seed, i)`.
pub fn generate_scenes(config: &GenConfig, template: &SkeletonTemplate, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            compose_scene(config, template, format!("scene-{i:06}"), &mut rng)
        })
        .collect()
}

type Mat3 = [[f64; 3]; 3];
const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Two unit vectors orthogonal to `axis` and the unit axis itself.
fn orthonormal_frame(axis: Vec3) -> (Vec3, Vec3, Vec3) {
    let w = if norm(axis) > 1e-12 { normalize(axis) } else { [0.0, 0.0, 1.0] };
    let helper = if w[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(w, helper));
    let v = cross(w, u);
    (u, v, w)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return scale(v, 1.0 / n);
        }
    }
}

fn closest_on_segment(a: Vec3, b: Vec3, p: Vec3) -> (f64, Vec3) {
    let ab = sub(b, a);
    let l2 = dot(ab, ab);
    let t = if l2 > 0.0 { (dot(sub(p, a), ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (t, add(a, scale(ab, t)))
}

/// Minimum distance between segments `p1`–`q1` and `p2`–`q2`.
pub fn segment_segment_distance(p1: Vec3, q1: Vec3, p2: Vec3, q2: Vec3) -> f64 {
    let d1 = sub(q1, p1);
    let d2 = sub(q2, p2);
    let r = sub(p1, p2);
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, r);
    let eps = 1e-15;
    let (s, t);
    if a <= eps && e <= eps {
        return norm(r);
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(d1, r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(d1, d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = add(p1, scale(d1, s));
    let c2 = add(p2, scale(d2, t));
    dist3(c1, c2)
}
