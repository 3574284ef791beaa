//! LiDAR-to-camera geometry.
//!
//! A [`CalibratedCamera`] holds the 3x4 matrix that maps homogeneous frame-0
//! ego coordinates to homogeneous pixels for one camera at one frame. Ego
//! motion is folded into the per-frame matrices, so the pixel motion a static
//! point would show is just the difference of two projections.
//!
//! Lifting 2D flow to 3D exploits the zero-vertical-motion constraint: with
//! the height `z` held fixed, `w (u, v, 1)^T = P (x, y, z, 1)^T` becomes a 3x3
//! linear system `M(z) (x, y, 1)^T ∝ (u, v, 1)^T` with
//! `M(z) = [P_0 | P_1 | z P_2 + P_3]` (columns of `P`).

use nalgebra::{Isometry3, Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::grid::{Point3, Vec2, Vec3};

/// Points with projective depth at or below this are behind the camera.
pub const EPS_DEPTH: f64 = 1e-3;

/// `M(z)` with a larger condition number is rejected by [`lift_flow`].
pub const MAX_LIFT_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedCamera {
    pub camera_id: usize,
    pub frame_index: i32,
    pub proj: Matrix3x4<f64>,
    pub width: u32,
    pub height: u32,
}

/// Pixel position plus the projective depth `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl Projection {
    pub fn uv(&self) -> Vec2 {
        Vec2::new(self.u, self.v)
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pinhole {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Pinhole {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.focal, 0.0, self.cx, 0.0, self.focal, self.cy, 0.0, 0.0, 1.0)
    }
}

impl CalibratedCamera {
    pub fn new(camera_id: usize, frame_index: i32, proj: Matrix3x4<f64>, width: u32, height: u32) -> Result<Self> {
        if proj.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection matrix is not finite"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera has an empty image"));
        }
        Ok(Self {
            camera_id,
            frame_index,
            proj,
            width,
            height,
        })
    }

    /// `K [R | t]` where `cam_from_ego` maps frame-0 ego coordinates into the
    /// camera frame (z forward, x right, y down).
    pub fn from_pinhole(camera_id: usize, frame_index: i32, intr: &Pinhole, cam_from_ego: &Isometry3<f64>) -> Self {
        let rt = cam_from_ego.to_homogeneous().fixed_view::<3, 4>(0, 0).into_owned();
        Self {
            camera_id,
            frame_index,
            proj: intr.matrix() * rt,
            width: intr.width,
            height: intr.height,
        }
    }

    /// Homogeneous projection without any validity checks.
    #[inline]
    pub fn project_homogeneous(&self, p: &Point3) -> Vector3<f64> {
        self.proj * Vector4::new(p.x, p.y, p.z, 1.0)
    }

    /// Projection in front of the camera, ignoring the image bounds.
    pub fn project_unbounded(&self, p: &Point3) -> Option<Projection> {
        let h = self.project_homogeneous(p);
        if h.z <= EPS_DEPTH {
            return None;
        }
        Some(Projection {
            u: h.x / h.z,
            v: h.y / h.z,
            w: h.z,
        })
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Camera center in ego coordinates (the right null vector of `proj`).
    pub fn center(&self) -> Option<Point3> {
        let m = self.proj.fixed_view::<3, 3>(0, 0).into_owned();
        let inv = m.try_inverse()?;
        let c = -(inv * self.proj.column(3));
        Some(Point3::from(c))
    }
}

/// Project `p` into `cam`; `None` behind the camera or outside the image.
pub fn project(p: &Point3, cam: &CalibratedCamera) -> Option<Projection> {
    cam.project_unbounded(p).filter(|pr| cam.in_bounds(pr.u, pr.v))
}

/// Pixel displacement of a world-static point caused by sensor motion alone.
///
/// The point must be inside the image at `cam_t`; at `cam_next` it only needs
/// to stay in front of the camera, since flow may legitimately carry it out of
/// frame.
pub fn ego_flow(p: &Point3, cam_t: &CalibratedCamera, cam_next: &CalibratedCamera) -> Option<Vec2> {
    let a = project(p, cam_t)?;
    let b = cam_next.project_unbounded(p)?;
    Some(b.uv() - a.uv())
}

/// How flow is read at a sub-pixel location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowSampling {
    /// Value of the pixel at the rounded coordinate.
    #[default]
    Nearest,
    Bilinear,
}

/// Dense per-pixel optical flow between frames `frame` and `next_frame` of one
/// camera. Row-major, two `f32` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowImage {
    pub camera_id: usize,
    pub frame: i32,
    pub next_frame: i32,
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl FlowImage {
    pub fn zeros(camera_id: usize, frame: i32, next_frame: i32, width: u32, height: u32) -> Self {
        Self {
            camera_id,
            frame,
            next_frame,
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 2],
        }
    }

    pub fn from_data(camera_id: usize, frame: i32, next_frame: i32, width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize * 2;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                what: "flow image data",
                left: data.len(),
                right: expected,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("flow image contains non-finite values"));
        }
        Ok(Self {
            camera_id,
            frame,
            next_frame,
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> Vec2 {
        let i = (row * self.width as usize + col) * 2;
        Vec2::new(self.data[i] as f64, self.data[i + 1] as f64)
    }

    #[inline]
    pub fn put(&mut self, col: usize, row: usize, f: Vec2) {
        let i = (row * self.width as usize + col) * 2;
        self.data[i] = f.x as f32;
        self.data[i + 1] = f.y as f32;
    }

    /// Flow at pixel coordinate `(u, v)`; `None` outside the image.
    pub fn sample(&self, u: f64, v: f64, mode: FlowSampling) -> Option<Vec2> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
            return None;
        }
        match mode {
            FlowSampling::Nearest => {
                let col = (u.round() as usize).min(self.width as usize - 1);
                let row = (v.round() as usize).min(self.height as usize - 1);
                Some(self.at(col, row))
            }
            FlowSampling::Bilinear => {
                let c0 = u.floor() as usize;
                let r0 = v.floor() as usize;
                let c1 = (c0 + 1).min(self.width as usize - 1);
                let r1 = (r0 + 1).min(self.height as usize - 1);
                let (a, b) = (u - c0 as f64, v - r0 as f64);
                let top = self.at(c0, r0) * (1.0 - a) + self.at(c1, r0) * a;
                let bottom = self.at(c0, r1) * (1.0 - a) + self.at(c1, r1) * a;
                Some(top * (1.0 - b) + bottom * b)
            }
        }
    }
}

/// Object-induced 2D flow at `p`: measured flow minus ego flow.
pub fn motion_flow(
    flow_img: &FlowImage,
    p: &Point3,
    cam_t: &CalibratedCamera,
    cam_next: &CalibratedCamera,
    sampling: FlowSampling,
) -> Option<Vec2> {
    let at = project(p, cam_t)?;
    let measured = flow_img.sample(at.u, at.v, sampling)?;
    let ego = ego_flow(p, cam_t, cam_next)?;
    Some(measured - ego)
}

/// `M(z) = [P_0 | P_1 | z P_2 + P_3]`.
pub fn lift_matrix(cam: &CalibratedCamera, z: f64) -> Matrix3<f64> {
    let p = &cam.proj;
    Matrix3::from_columns(&[
        p.column(0).into_owned(),
        p.column(1).into_owned(),
        p.column(2) * z + p.column(3),
    ])
}

/// Lift a pixel flow at `p` to a planar 3D displacement.
///
/// The flow end pixel is back-projected onto the horizontal plane through `p`.
/// The returned vector always has zero vertical component.
pub fn lift_flow(f2d: Vec2, p: &Point3, cam_t: &CalibratedCamera) -> Result<Vec3> {
    let start = cam_t
        .project_unbounded(p)
        .ok_or_else(|| Error::UnliftableDepth(format!("point {p:?} is behind the camera")))?;
    let m = lift_matrix(cam_t, p.z);
    let sv = m.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > MAX_LIFT_CONDITION {
        return Err(Error::UnliftableDepth(format!(
            "M(z={}) condition number {:e}",
            p.z,
            smax / smin
        )));
    }
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::UnliftableDepth(format!("M(z={}) is singular", p.z)))?;
    let end = start.uv() + f2d;
    let s = inv * Vector3::new(end.x, end.y, 1.0);
    if s.z.abs() < f64::EPSILON * s.norm() {
        return Err(Error::UnliftableDepth("flow end pixel is on the horizon of the height plane".into()));
    }
    Ok(Vec3::new(s.x / s.z - p.x, s.y / s.z - p.y, 0.0))
}
