//! Synthetic driving scenes with exact ground truth.
//!
//! The world frame is the frame-0 ego frame. Geometry is a ground plane plus
//! axis-aligned boxes; actors are boxes translating at constant planar
//! velocity. Surface points are sampled once per primitive, so an actor's
//! points at frame `t` are its frame-0 points shifted by `t * velocity`.
//!
//! A point enters the frame-`t` cloud when the segment from the LiDAR to it
//! crosses no box. Flow images are rendered by casting the ray through every
//! pixel center and projecting the hit point, moved to the next frame, with
//! the next frame's calibration.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{BevGridSpec, BevMotionField, FrameSet, Point3, PointCloud, Vec2, Vec3};
use crate::masks::{PointStatus, StaticDynamicMask};
use crate::projection::{project, CalibratedCamera, FlowImage, Pinhole};
use crate::scene::{CameraRig, GroundTruth, SceneBundle};

/// Axis-aligned box, frame-0 position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoxSpec {
    pub fn new(min: (f64, f64, f64), max: (f64, f64, f64)) -> Self {
        Self {
            min: Vec3::new(min.0, min.1, min.2),
            max: Vec3::new(max.0, max.1, max.2),
        }
    }

    fn shifted(&self, d: &Vec3) -> Self {
        Self {
            min: self.min + d,
            max: self.max + d,
        }
    }

    fn contains_xy(&self, p: &Point3) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Entry and exit parameters of `origin + s * dir`, if the line hits.
    fn intersect(&self, origin: &Point3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let s1 = (self.min[a] - origin[a]) / dir[a];
            let s2 = (self.max[a] - origin[a]) / dir[a];
            lo = lo.max(s1.min(s2));
            hi = hi.min(s1.max(s2));
        }
        (lo <= hi).then_some((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorSpec {
    pub body: BoxSpec,
    /// Meters per frame.
    pub velocity: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundSpec {
    pub z: f64,
    /// Half side of the square patch centered on the ego.
    pub half_extent: f64,
    /// Points per square meter.
    pub density: f64,
}

/// Constant ego motion: after `t` frames the ego sits at `t * velocity`
/// with heading `t * yaw_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EgoMotion {
    pub velocity: Vec2,
    /// Radians per frame.
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub intrinsics: Pinhole,
    /// Mount position in the ego frame.
    pub position: Vec3,
    /// Heading of the optical axis in the ego frame, radians.
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub grid: BevGridSpec,
    pub frame_set: FrameSet,
    pub ground: Option<GroundSpec>,
    pub background: Vec<BoxSpec>,
    pub actors: Vec<ActorSpec>,
    /// Surface points per square meter on background boxes.
    pub box_density: f64,
    /// Surface points per square meter on actors.
    pub actor_density: f64,
    pub ego: EgoMotion,
    pub lidar_range: f64,
    /// Drop samples hidden from the LiDAR by a box. When off, every sample
    /// in range is returned, so clouds of a static scene are identical.
    pub lidar_occlusion: bool,
    pub cameras: Vec<CameraSpec>,
    /// Standard deviation of LiDAR point noise, meters.
    pub noise_sigma: f64,
    /// Standard deviation of flow-image noise, pixels.
    pub flow_noise_sigma: f64,
    /// Fraction of flow pixels replaced by uniform outliers.
    pub flow_outlier_rate: f64,
    /// Outlier flow components are uniform in `[-range, range]` pixels.
    pub flow_outlier_range: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Frames that carry a point cloud: 0 and every prediction offset.
    pub fn cloud_frames(&self) -> Vec<i32> {
        let mut v: Vec<i32> = std::iter::once(0).chain(self.frame_set.offsets.iter().copied()).collect();
        v.sort();
        v
    }

    /// Frames that need a calibration: every cloud frame and its successor.
    pub fn camera_frames(&self) -> Vec<i32> {
        let mut v: Vec<i32> = self.cloud_frames().into_iter().flat_map(|t| [t, t + 1]).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.box_density > 0.0 && self.actor_density > 0.0) {
            return Err(Error::invalid("surface densities must be positive"));
        }
        if let Some(g) = &self.ground {
            if !(g.density > 0.0 && g.half_extent > 0.0) {
                return Err(Error::invalid("ground density and extent must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.flow_noise_sigma >= 0.0) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flow_outlier_rate) || !(self.flow_outlier_range >= 0.0) {
            return Err(Error::invalid("bad flow outlier settings"));
        }
        if self.cameras.is_empty() {
            return Err(Error::invalid("scene needs at least one camera"));
        }
        let g = &self.grid;
        let frames = self.camera_frames();
        for (k, a) in self.actors.iter().enumerate() {
            if a.body.min.iter().zip(a.body.max.iter()).any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::invalid(format!("actor {k} has an empty box")));
            }
            for &t in &frames {
                let b = a.body.shifted(&displacement(a, t));
                if b.min.x < g.x_min || b.max.x >= g.x_max || b.min.y < g.y_min || b.max.y >= g.y_max {
                    return Err(Error::invalid(format!("actor {k} leaves the grid at frame {t}")));
                }
            }
        }
        for (k, b) in self.background.iter().enumerate() {
            if b.min.iter().zip(b.max.iter()).any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::invalid(format!("background box {k} is empty")));
            }
        }
        Ok(())
    }

    /// Ego pose in the world at frame `t`.
    pub fn ego_pose(&self, t: i32) -> Isometry3<f64> {
        let tf = t as f64;
        let v = self.ego.velocity * tf;
        Isometry3::from_parts(
            Translation3::new(v.x, v.y, 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.ego.yaw_rate * tf),
        )
    }

    pub fn lidar_origin(&self, t: i32) -> Point3 {
        self.ego_pose(t) * Point3::origin()
    }

    pub fn calibration(&self, k: usize, t: i32) -> CalibratedCamera {
        let c = &self.cameras[k];
        let (s, co) = c.yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) in ego axes
        let r = Matrix3::new(s, -co, 0.0, 0.0, 0.0, -1.0, co, s, 0.0);
        let rot = Rotation3::from_matrix_unchecked(r);
        let cam_from_ego = Isometry3::from_parts(Translation3::from(-(rot * c.position)), UnitQuaternion::from_rotation_matrix(&rot));
        let cam_from_world = cam_from_ego * self.ego_pose(t).inverse();
        CalibratedCamera::from_pinhole(k, t, &c.intrinsics, &cam_from_world)
    }

    fn boxes_at(&self, t: i32) -> Vec<(BoxSpec, Option<usize>)> {
        self.background
            .iter()
            .map(|b| (*b, None))
            .chain(self.actors.iter().enumerate().map(|(k, a)| (a.body.shifted(&displacement(a, t)), Some(k))))
            .collect()
    }
}

fn displacement(a: &ActorSpec, t: i32) -> Vec3 {
    Vec3::new(a.velocity.x * t as f64, a.velocity.y * t as f64, 0.0)
}

/// True when some box blocks the open segment from `from` to `to`.
fn blocked(boxes: &[(BoxSpec, Option<usize>)], from: &Point3, to: &Point3) -> bool {
    let dir = to - from;
    let len = dir.norm();
    if len == 0.0 {
        return false;
    }
    let tol = 1e-6 / len;
    boxes.iter().any(|(b, _)| match b.intersect(from, &dir) {
        Some((lo, hi)) => hi > tol && lo < 1.0 - tol,
        None => false,
    })
}

/// A sampled surface point: frame-0 position and owning actor.
#[derive(Debug, Clone, Copy)]
struct Sample {
    p: Point3,
    actor: Option<usize>,
}

fn sample_rect(rng: &mut ChaCha8Rng, origin: Vec3, e1: Vec3, e2: Vec3, density: f64, actor: Option<usize>, out: &mut Vec<Sample>) {
    let area = e1.norm() * e2.norm();
    let n = (area * density).round() as usize;
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        out.push(Sample {
            p: Point3::from(origin + a * e1 + b * e2),
            actor,
        });
    }
}

fn sample_box(rng: &mut ChaCha8Rng, b: &BoxSpec, density: f64, actor: Option<usize>, out: &mut Vec<Sample>) {
    let d = b.max - b.min;
    let (ex, ey, ez) = (Vec3::new(d.x, 0.0, 0.0), Vec3::new(0.0, d.y, 0.0), Vec3::new(0.0, 0.0, d.z));
    let lo = b.min;
    sample_rect(rng, lo, ex, ez, density, actor, out);
    sample_rect(rng, lo + ey, ex, ez, density, actor, out);
    sample_rect(rng, lo, ey, ez, density, actor, out);
    sample_rect(rng, lo + ex, ey, ez, density, actor, out);
    sample_rect(rng, lo + ez, ex, ey, density, actor, out);
}

fn quantize(p: Point3) -> Point3 {
    Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
}

/// What a camera ray hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Surface {
    /// Index into the frame's box list.
    Box(usize),
    Ground,
    Sky,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    dist: f64,
    pos: Point3,
    surface: Surface,
}

/// Surface hit of the ray through pixel coordinate `(u, v)`.
fn cast_ray(
    cam: &CalibratedCamera,
    center: &Point3,
    minv: &Matrix3<f64>,
    u: f64,
    v: f64,
    boxes: &[(BoxSpec, Option<usize>)],
    ground: Option<&GroundSpec>,
) -> Hit {
    let dir = (minv * Vec3::new(u, v, 1.0)).normalize();
    // `minv` maps pixels to rays up to sign; point the ray forward.
    let dir = if (cam.proj.fixed_view::<3, 3>(0, 0) * dir).z < 0.0 { -dir } else { dir };
    let mut best = (f64::INFINITY, Surface::Sky);
    for (i, (b, _)) in boxes.iter().enumerate() {
        if let Some((lo, hi)) = b.intersect(center, &dir) {
            if hi > 0.0 {
                let s = lo.max(0.0);
                if s < best.0 {
                    best = (s, Surface::Box(i));
                }
            }
        }
    }
    if let Some(g) = ground {
        if dir.z < 0.0 {
            let s = (g.z - center.z) / dir.z;
            let hit = center + s * dir;
            if s > 0.0 && s < best.0 && hit.x.abs() <= g.half_extent && hit.y.abs() <= g.half_extent {
                best = (s, Surface::Ground);
            }
        }
    }
    let dist = if best.0.is_finite() { best.0 } else { 1e4 };
    Hit {
        dist,
        pos: center + dist * dir,
        surface: best.1,
    }
}

/// Dense analytic flow from frame `t` to `t + 1` for camera `k`.
///
/// A pixel shows the nearest surface within its footprint, so a point that
/// projects into it is never hidden behind a farther one. Pixels whose
/// neighbours all see the same surface use the ray through their center.
pub fn render_flow(spec: &SceneSpec, k: usize, t: i32) -> Result<FlowImage> {
    let cam = spec.calibration(k, t);
    let next = spec.calibration(k, t + 1);
    let center = cam.center().ok_or_else(|| Error::invalid("singular camera"))?;
    let minv = cam
        .proj
        .fixed_view::<3, 3>(0, 0)
        .into_owned()
        .try_inverse()
        .ok_or_else(|| Error::invalid("singular camera"))?;
    let boxes = spec.boxes_at(t);
    let ground = spec.ground.as_ref();
    let (w, h) = (cam.width as usize, cam.height as usize);
    let centers: Vec<Hit> = (0..w * h)
        .into_par_iter()
        .map(|i| cast_ray(&cam, &center, &minv, (i % w) as f64, (i / w) as f64, &boxes, ground))
        .collect();
    let mut data = vec![0f32; w * h * 2];
    data.par_chunks_mut(2 * w).enumerate().for_each(|(row, out)| {
        for col in 0..w {
            let mid = centers[row * w + col];
            let uniform = (row.saturating_sub(1)..(row + 2).min(h))
                .all(|r| (col.saturating_sub(1)..(col + 2).min(w)).all(|c| centers[r * w + c].surface == mid.surface));
            let (u, v, hit) = if uniform {
                (col as f64, row as f64, mid)
            } else {
                let mut best = (col as f64, row as f64, mid);
                for du in [-0.5, 0.0, 0.5] {
                    for dv in [-0.5, 0.0, 0.5] {
                        let (u, v) = (col as f64 + du, row as f64 + dv);
                        let s = cast_ray(&cam, &center, &minv, u, v, &boxes, ground);
                        if s.surface != best.2.surface && s.surface != Surface::Sky && s.dist < best.2.dist {
                            best = (u, v, s);
                        }
                    }
                }
                best
            };
            let moved = match hit.surface {
                Surface::Box(i) => match boxes[i].1 {
                    Some(a) => hit.pos + Vec3::new(spec.actors[a].velocity.x, spec.actors[a].velocity.y, 0.0),
                    None => hit.pos,
                },
                _ => hit.pos,
            };
            let f = match next.project_unbounded(&moved) {
                Some(pr) => Vec2::new(pr.u - u, pr.v - v),
                None => Vec2::zeros(),
            };
            out[2 * col] = f.x as f32;
            out[2 * col + 1] = f.y as f32;
        }
    });
    if spec.flow_noise_sigma > 0.0 || spec.flow_outlier_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5f10_0000 ^ ((k as u64) << 16) ^ (t as i64 as u64 & 0xffff));
        let normal = Normal::new(0.0, spec.flow_noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
        for px in data.chunks_mut(2) {
            if rng.random::<f64>() < spec.flow_outlier_rate {
                let r = spec.flow_outlier_range;
                px[0] = rng.random_range(-r..=r) as f32;
                px[1] = rng.random_range(-r..=r) as f32;
            } else if spec.flow_noise_sigma > 0.0 {
                px[0] += normal.sample(&mut rng) as f32;
                px[1] += normal.sample(&mut rng) as f32;
            }
        }
    }
    FlowImage::from_data(k, t, t + 1, cam.width, cam.height, data)
}

/// Frame-`t` cloud: LiDAR-visible samples with their actor and sample index.
fn visible_samples(spec: &SceneSpec, samples: &[Sample], t: i32) -> Vec<(Point3, Option<usize>)> {
    let origin = spec.lidar_origin(t);
    let boxes = spec.boxes_at(t);
    samples
        .par_iter()
        .filter_map(|s| {
            let p = match s.actor {
                Some(a) => s.p + displacement(&spec.actors[a], t),
                None => s.p,
            };
            if (p - origin).norm() > spec.lidar_range || spec.grid.cell_of(&p).is_none() {
                return None;
            }
            (!(spec.lidar_occlusion && blocked(&boxes, &origin, &p))).then_some((p, s.actor))
        })
        .collect()
}

/// Ground-truth field for offset `t`: actor displacement on every cell
/// holding actor points of `cloud0`, majority actor where several meet.
pub fn ground_truth_field(spec: &SceneSpec, cloud0: &PointCloud, instances0: &[i32], t: i32) -> Result<BevMotionField> {
    if cloud0.len() != instances0.len() {
        return Err(Error::LengthMismatch {
            what: "cloud vs instance ids",
            left: cloud0.len(),
            right: instances0.len(),
        });
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (p, &a) in cloud0.points.iter().zip(instances0) {
        if a < 0 {
            continue;
        }
        if let Some(c) = spec.grid.cell_index(p) {
            *counts.entry(c).or_default().entry(a as usize).or_default() += 1;
        }
    }
    let mut field = BevMotionField::zeros(spec.grid, t);
    for (c, per_actor) in counts {
        if per_actor.len() > 1 {
            log::warn!("cell {c} holds points of {} actors; using the majority", per_actor.len());
        }
        // ties go to the lower actor index
        let (&a, _) = per_actor.iter().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0))).expect("non-empty");
        let d = displacement(&spec.actors[a], t);
        field.values[c] = Vec2::new(d.x, d.y);
    }
    Ok(field)
}

/// Frame-0 points that the LiDAR sees but whose first in-image camera sees a
/// nearer surface.
fn camera_occluded(spec: &SceneSpec, cloud0: &PointCloud) -> Vec<bool> {
    let boxes = spec.boxes_at(0);
    let cams: Vec<(CalibratedCamera, Point3)> = (0..spec.cameras.len())
        .map(|k| {
            let c = spec.calibration(k, 0);
            let center = c.center().expect("pinhole camera has a center");
            (c, center)
        })
        .collect();
    cloud0
        .points
        .par_iter()
        .map(|p| {
            cams.iter()
                .find(|(c, _)| project(p, c).is_some())
                .is_some_and(|(_, center)| blocked(&boxes, center, p))
        })
        .collect()
}

pub fn generate(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    if let Some(g) = &spec.ground {
        let e = g.half_extent;
        let mut ground = Vec::new();
        sample_rect(&mut rng, Vec3::new(-e, -e, g.z), Vec3::new(2.0 * e, 0.0, 0.0), Vec3::new(0.0, 2.0 * e, 0.0), g.density, None, &mut ground);
        // Ground hidden under a static box is never observed.
        ground.retain(|s| !spec.background.iter().any(|b| b.contains_xy(&s.p)));
        samples.extend(ground);
    }
    for b in &spec.background {
        sample_box(&mut rng, b, spec.box_density, None, &mut samples);
    }
    for (k, a) in spec.actors.iter().enumerate() {
        sample_box(&mut rng, &a.body, spec.actor_density, Some(k), &mut samples);
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut clouds = BTreeMap::new();
    let mut gt = GroundTruth::default();
    for t in spec.cloud_frames() {
        let vis = visible_samples(spec, &samples, t);
        let mut pts = Vec::with_capacity(vis.len());
        let mut ids = Vec::with_capacity(vis.len());
        let mut status = Vec::with_capacity(vis.len());
        for (p, actor) in vis {
            let p = if spec.noise_sigma > 0.0 {
                p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                p
            };
            pts.push(quantize(p));
            ids.push(actor.map_or(-1, |a| a as i32));
            let moving = actor.is_some_and(|a| spec.actors[a].velocity != Vec2::zeros());
            status.push(if moving { PointStatus::Dynamic } else { PointStatus::Static });
        }
        clouds.insert(t, PointCloud::new(t, pts)?);
        gt.instances.insert(t, ids);
        gt.masks.insert(t, StaticDynamicMask { frame_index: t, status });
    }
    let cloud0 = &clouds[&0];
    for &t in &spec.frame_set.offsets {
        gt.fields.insert(t, ground_truth_field(spec, cloud0, &gt.instances[&0], t)?);
    }
    gt.camera_occluded = Some(camera_occluded(spec, cloud0));

    let flow_frames = spec.cloud_frames();
    let cam_frames = spec.camera_frames();
    let cameras = (0..spec.cameras.len())
        .map(|k| {
            let calib = cam_frames.iter().map(|&t| (t, spec.calibration(k, t))).collect();
            let flows = flow_frames
                .iter()
                .map(|&t| Ok((t, render_flow(spec, k, t)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let intr = &spec.cameras[k].intrinsics;
            Ok(CameraRig {
                camera_id: k,
                width: intr.width,
                height: intr.height,
                calib,
                flows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = SceneBundle {
        grid: spec.grid,
        frame_set: spec.frame_set.clone(),
        clouds,
        cameras,
        ground_truth: Some(gt),
    };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    OneBox,
    TwoBox,
    Static,
    EgoRotation,
    NightNoise,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::OneBox, Preset::TwoBox, Preset::Static, Preset::EgoRotation, Preset::NightNoise];

    pub fn name(self) -> &'static str {
        match self {
            Preset::OneBox => "one-box",
            Preset::TwoBox => "two-box",
            Preset::Static => "static",
            Preset::EgoRotation => "ego-rotation",
            Preset::NightNoise => "night-noise",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?} (expected one of one-box, two-box, static, ego-rotation, night-noise)")))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const GROUND_Z: f64 = -1.45;

/// Six cameras every 60 degrees, mounted off the LiDAR axis.
pub fn camera_ring() -> Vec<CameraSpec> {
    let intr = Pinhole {
        focal: 280.0,
        cx: 160.0,
        cy: 80.0,
        width: 320,
        height: 160,
    };
    // Side cameras look straight across the adjacent lanes.
    (0..6)
        .map(|k| {
            let yaw = (30.0 + k as f64 * 60.0).to_radians();
            let mount = yaw + 30f64.to_radians();
            CameraSpec {
                intrinsics: intr,
                position: Vec3::new(0.4 * mount.cos(), 0.4 * mount.sin(), 0.3),
                yaw,
            }
        })
        .collect()
}

fn background() -> Vec<BoxSpec> {
    let g = GROUND_Z;
    vec![
        // walls behind the actor lanes
        BoxSpec::new((-8.0, 17.0, g), (20.0, 17.6, 1.5)),
        BoxSpec::new((-18.0, -18.6, g), (10.0, -18.0, 1.5)),
        // parked vehicles and small structures
        BoxSpec::new((-12.0, 5.5, g), (-8.0, 7.3, 0.1)),
        BoxSpec::new((9.0, -8.5, g), (13.0, -6.7, 0.1)),
        BoxSpec::new((-19.0, -4.0, g), (-16.0, 3.0, 1.2)),
        BoxSpec::new((19.0, -3.0, g), (21.0, 4.0, 1.0)),
    ]
}

fn actor(center: (f64, f64), size: (f64, f64, f64), velocity: (f64, f64)) -> ActorSpec {
    let (hx, hy) = (size.0 / 2.0, size.1 / 2.0);
    ActorSpec {
        body: BoxSpec::new((center.0 - hx, center.1 - hy, GROUND_Z), (center.0 + hx, center.1 + hy, GROUND_Z + size.2)),
        velocity: Vec2::new(velocity.0, velocity.1),
    }
}

/// Scene description of a named preset. The seed drives point sampling,
/// noise, and a small jitter of actor start positions.
pub fn preset(p: Preset, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xa5a5);
    let mut jitter = || (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let car = (4.0, 2.0, 2.0);
    let mut spec = SceneSpec {
        grid: BevGridSpec::default(),
        frame_set: FrameSet::default(),
        ground: Some(GroundSpec {
            z: GROUND_Z,
            half_extent: 30.0,
            density: 0.5,
        }),
        background: background(),
        actors: Vec::new(),
        box_density: 30.0,
        actor_density: 200.0,
        ego: EgoMotion::default(),
        lidar_range: 30.0,
        lidar_occlusion: true,
        cameras: camera_ring(),
        noise_sigma: 0.0,
        flow_noise_sigma: 0.0,
        flow_outlier_rate: 0.0,
        flow_outlier_range: 0.0,
        seed,
    };
    let left = |j: (f64, f64), v: f64| actor((0.5 + j.0, 12.0 + j.1), car, (v, 0.0));
    let right = |j: (f64, f64), v: f64| actor((-0.5 + j.0, -12.0 + j.1), car, (v, 0.0));
    // Slightly ahead, so the rear face is visible as well.
    let ahead = |j: (f64, f64), v: f64| actor((3.5 + j.0, 12.0 + j.1), car, (v, 0.0));
    match p {
        Preset::OneBox => spec.actors = vec![ahead(jitter(), 1.0)],
        Preset::TwoBox => {
            spec.actors = vec![left(jitter(), 3.0), right(jitter(), 2.6)];
            spec.flow_noise_sigma = 0.5;
        }
        Preset::Static => spec.ego.velocity = Vec2::new(0.5, 0.0),
        Preset::EgoRotation => {
            spec.ego = EgoMotion {
                velocity: Vec2::new(1.0, 0.0),
                yaw_rate: 5f64.to_radians(),
            };
            spec.actors = vec![left(jitter(), 3.0)];
        }
        Preset::NightNoise => {
            spec.actors = vec![left(jitter(), 3.0), right(jitter(), 2.6)];
            spec.noise_sigma = 0.02;
            spec.flow_noise_sigma = 1.0;
            spec.flow_outlier_rate = 0.02;
            spec.flow_outlier_range = 20.0;
        }
    }
    spec
}
