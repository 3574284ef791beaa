//! Pseudo static/dynamic masks from optical flow.
//!
//! Each point is projected into the cameras in manifest order. The first
//! camera that sees it supplies the object-induced pixel flow (measured minus
//! ego flow) and its lift to a planar 3D displacement; the point is static iff
//! both magnitudes are below their thresholds. Points under the ground height
//! are static regardless, and points no camera sees are `Unknown`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{PointCloud, Vec2, Vec3};
use crate::projection::{lift_flow, motion_flow, project, CalibratedCamera, FlowImage, FlowSampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PointStatus {
    Static = 0,
    Dynamic = 1,
    Unknown = 2,
}

impl PointStatus {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Static),
            1 => Some(Self::Dynamic),
            2 => Some(Self::Unknown),
            _ => None,
        }
    }

    /// Unknown points sit on the static side of the split.
    pub fn is_dynamic(self) -> bool {
        self == Self::Dynamic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticDynamicMask {
    pub frame_index: i32,
    pub status: Vec<PointStatus>,
}

impl StaticDynamicMask {
    pub fn uniform(frame_index: i32, n: usize, status: PointStatus) -> Self {
        Self {
            frame_index,
            status: vec![status; n],
        }
    }

    pub fn len(&self) -> usize {
        self.status.len()
    }

    pub fn is_empty(&self) -> bool {
        self.status.is_empty()
    }

    pub fn count(&self, s: PointStatus) -> usize {
        self.status.iter().filter(|&&x| x == s).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskThresholds {
    /// Pixels.
    pub tau_2d: f64,
    /// Meters.
    pub tau_3d: f64,
    /// Points below this height are ground and always static.
    pub ground_z: f64,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        Self {
            tau_2d: 5.0,
            tau_3d: 1.0,
            ground_z: -1.4,
        }
    }
}

impl MaskThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_2d > 0.0 && self.tau_3d > 0.0 && self.ground_z.is_finite()) {
            return Err(Error::invalid(format!("bad mask thresholds {self:?}")));
        }
        Ok(())
    }
}

/// Static iff `|f2d| < tau_2d` and `|f3d| < tau_3d` (Euclidean norms, strict).
pub fn classify_point(f2d: Vec2, f3d: Vec3, thr: &MaskThresholds) -> PointStatus {
    if f2d.norm() < thr.tau_2d && f3d.norm() < thr.tau_3d {
        PointStatus::Static
    } else {
        PointStatus::Dynamic
    }
}

/// One camera's flow image with its calibration at both ends of the pair.
#[derive(Debug, Clone, Copy)]
pub struct CameraView<'a> {
    pub flow: &'a FlowImage,
    pub cam_t: &'a CalibratedCamera,
    pub cam_next: &'a CalibratedCamera,
}

/// Pixel error assumed for a flow sample when judging the lift.
pub const LIFT_FLOW_ERROR_PX: f64 = 1.0;

/// The lifted flow, or `None` when the lift cannot resolve `tau_3d`: the
/// height plane is edge-on, or an error of [`LIFT_FLOW_ERROR_PX`] in either
/// pixel direction moves the result by more than `tau_3d`. That happens for
/// points near the camera's own height, where the ray grazes the plane.
pub fn resolvable_lift(f2d: Vec2, p: &crate::grid::Point3, cam: &CalibratedCamera, tau_3d: f64) -> Option<Vec3> {
    let f3d = lift_flow(f2d, p, cam).ok()?;
    let e = LIFT_FLOW_ERROR_PX;
    for d in [Vec2::new(e, 0.0), Vec2::new(0.0, e), Vec2::new(-e, 0.0), Vec2::new(0.0, -e)] {
        let moved = lift_flow(f2d + d, p, cam).ok()?;
        if (moved - f3d).norm() > tau_3d {
            return None;
        }
    }
    Some(f3d)
}

/// Motion status of one point from the first camera that sees it.
///
/// Where the lift cannot resolve `tau_3d` the 2D test alone decides.
pub fn point_status(
    p: &crate::grid::Point3,
    views: &[CameraView<'_>],
    thr: &MaskThresholds,
    sampling: FlowSampling,
) -> PointStatus {
    if p.z < thr.ground_z {
        return PointStatus::Static;
    }
    for view in views {
        if project(p, view.cam_t).is_none() {
            continue;
        }
        let Some(f2d) = motion_flow(view.flow, p, view.cam_t, view.cam_next, sampling) else {
            continue;
        };
        let f3d = resolvable_lift(f2d, p, view.cam_t, thr.tau_3d).unwrap_or_else(Vec3::zeros);
        return classify_point(f2d, f3d, thr);
    }
    PointStatus::Unknown
}

pub fn build_mask(
    cloud: &PointCloud,
    views: &[CameraView<'_>],
    thr: &MaskThresholds,
    sampling: FlowSampling,
) -> Result<StaticDynamicMask> {
    if views.is_empty() {
        return Err(Error::invalid("mask generation needs at least one camera"));
    }
    thr.validate()?;
    let status = cloud
        .points
        .par_iter()
        .map(|p| point_status(p, views, thr, sampling))
        .collect();
    Ok(StaticDynamicMask {
        frame_index: cloud.frame_index,
        status,
    })
}

/// A cloud separated into its pseudo-dynamic and pseudo-static parts.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSplit {
    pub dynamic: PointCloud,
    pub static_part: PointCloud,
    /// Original index of every dynamic point, in order.
    pub dynamic_idx: Vec<usize>,
    pub static_idx: Vec<usize>,
}

/// Partition by status; `Unknown` points go to the static part.
pub fn split(cloud: &PointCloud, mask: &StaticDynamicMask) -> Result<MaskSplit> {
    if cloud.len() != mask.len() {
        return Err(Error::LengthMismatch {
            what: "cloud vs mask",
            left: cloud.len(),
            right: mask.len(),
        });
    }
    let (dynamic_idx, static_idx): (Vec<usize>, Vec<usize>) =
        (0..cloud.len()).partition(|&i| mask.status[i].is_dynamic());
    Ok(MaskSplit {
        dynamic: cloud.select(&dynamic_idx),
        static_part: cloud.select(&static_idx),
        dynamic_idx,
        static_idx,
    })
}

/// Precision and recall of both classes against a reference labelling.
///
/// Points the prediction marks `Unknown` are skipped, as are reference
/// `Unknown`s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskQuality {
    pub evaluated: usize,
    pub dynamic_precision: f64,
    pub dynamic_recall: f64,
    pub static_precision: f64,
    pub static_recall: f64,
    pub false_dynamic: usize,
    pub accuracy: f64,
}

pub fn mask_quality(pred: &StaticDynamicMask, truth: &StaticDynamicMask) -> Result<MaskQuality> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "predicted vs reference mask",
            left: pred.len(),
            right: truth.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.status.iter().zip(&truth.status) {
        match (p, t) {
            (PointStatus::Unknown, _) | (_, PointStatus::Unknown) => {}
            (PointStatus::Dynamic, PointStatus::Dynamic) => tp += 1,
            (PointStatus::Dynamic, PointStatus::Static) => fp += 1,
            (PointStatus::Static, PointStatus::Static) => tn += 1,
            (PointStatus::Static, PointStatus::Dynamic) => fneg += 1,
        }
    }
    // An empty class counts as perfectly handled.
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let evaluated = tp + fp + tn + fneg;
    Ok(MaskQuality {
        evaluated,
        dynamic_precision: ratio(tp, tp + fp),
        dynamic_recall: ratio(tp, tp + fneg),
        static_precision: ratio(tn, tn + fneg),
        static_recall: ratio(tn, tn + fp),
        false_dynamic: fp,
        accuracy: ratio(tp + tn, evaluated),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Point3;
    use proptest::prelude::*;

    fn thr() -> MaskThresholds {
        MaskThresholds::default()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_point(Vec2::zeros(), Vec3::zeros(), &thr()), PointStatus::Static);
        assert_eq!(classify_point(Vec2::new(6.0, 0.0), Vec3::zeros(), &thr()), PointStatus::Dynamic);
        assert_eq!(
            classify_point(Vec2::new(3.0, 0.0), Vec3::new(1.5, 0.0, 0.0), &thr()),
            PointStatus::Dynamic
        );
        // strict comparison
        assert_eq!(classify_point(Vec2::new(5.0, 0.0), Vec3::zeros(), &thr()), PointStatus::Dynamic);
        assert_eq!(classify_point(Vec2::new(3.0, 4.0 - 1e-9), Vec3::zeros(), &thr()), PointStatus::Static);
    }

    /// Camera 1.5 m up looking along +x.
    fn forward_camera() -> CalibratedCamera {
        use crate::projection::Pinhole;
        use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};
        let intr = Pinhole {
            focal: 300.0,
            cx: 160.0,
            cy: 80.0,
            width: 320,
            height: 160,
        };
        let rot = Rotation3::from_matrix_unchecked(Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0));
        let pos = Vec3::new(0.0, 0.0, 1.5);
        let iso = Isometry3::from_parts(Translation3::from(-(rot * pos)), UnitQuaternion::from_rotation_matrix(&rot));
        CalibratedCamera::from_pinhole(0, 0, &intr, &iso)
    }

    #[test]
    fn lift_near_the_camera_height_is_not_trusted() {
        let cam = forward_camera();
        let f = Vec2::new(0.0, 0.01);
        let grazing = Point3::new(25.0, 1.0, 1.505);
        assert!(lift_flow(f, &grazing, &cam).is_ok());
        assert!(resolvable_lift(f, &grazing, &cam, 1.0).is_none());
        let low = Point3::new(8.0, 1.0, 0.0);
        let f = Vec2::new(4.0, 2.0);
        assert_eq!(resolvable_lift(f, &low, &cam, 1.0), Some(lift_flow(f, &low, &cam).unwrap()));
    }

    #[test]
    fn empty_camera_list_is_an_error() {
        let cloud = PointCloud::new(0, vec![Point3::origin()]).unwrap();
        assert!(build_mask(&cloud, &[], &thr(), FlowSampling::Nearest).is_err());
    }

    #[test]
    fn split_examples() {
        let cloud = PointCloud::new(
            0,
            (0..4).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect(),
        )
        .unwrap();
        let all_static = StaticDynamicMask::uniform(0, 4, PointStatus::Static);
        let s = split(&cloud, &all_static).unwrap();
        assert!(s.dynamic.is_empty());
        assert_eq!(s.static_part, cloud);

        let alt = StaticDynamicMask {
            frame_index: 0,
            status: vec![PointStatus::Dynamic, PointStatus::Static, PointStatus::Dynamic, PointStatus::Unknown],
        };
        let s = split(&cloud, &alt).unwrap();
        assert_eq!(s.dynamic_idx, vec![0, 2]);
        assert_eq!(s.static_idx, vec![1, 3]);
        assert_eq!(s.dynamic.points[1], Point3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn quality_counts() {
        use PointStatus::*;
        let truth = StaticDynamicMask {
            frame_index: 0,
            status: vec![Dynamic, Dynamic, Static, Static, Static],
        };
        let pred = StaticDynamicMask {
            frame_index: 0,
            status: vec![Dynamic, Static, Dynamic, Static, Unknown],
        };
        let q = mask_quality(&pred, &truth).unwrap();
        assert_eq!(q.evaluated, 4);
        assert_eq!(q.dynamic_precision, 0.5);
        assert_eq!(q.dynamic_recall, 0.5);
        assert_eq!(q.false_dynamic, 1);
    }

    proptest! {
        #[test]
        fn classify_is_monotone(a in 0.0..10.0f64, b in 0.0..3.0f64, da in 0.0..5.0f64, db in 0.0..2.0f64) {
            let t = thr();
            let before = classify_point(Vec2::new(a, 0.0), Vec3::new(b, 0.0, 0.0), &t);
            let after = classify_point(Vec2::new(a + da, 0.0), Vec3::new(b + db, 0.0, 0.0), &t);
            prop_assert!(!(before == PointStatus::Dynamic && after == PointStatus::Static));
        }

        #[test]
        fn split_is_a_partition(codes in prop::collection::vec(0u8..3, 1..50)) {
            let cloud = PointCloud::new(0, (0..codes.len()).map(|i| Point3::new(i as f64, 1.0, 0.0)).collect()).unwrap();
            let mask = StaticDynamicMask { frame_index: 0, status: codes.iter().map(|&c| PointStatus::from_u8(c).unwrap()).collect() };
            let s = split(&cloud, &mask).unwrap();
            prop_assert_eq!(s.dynamic.len() + s.static_part.len(), cloud.len());
            let mut rebuilt = vec![None; cloud.len()];
            for (k, &i) in s.dynamic_idx.iter().enumerate() { rebuilt[i] = Some(s.dynamic.points[k]); }
            for (k, &i) in s.static_idx.iter().enumerate() { rebuilt[i] = Some(s.static_part.points[k]); }
            let rebuilt: Vec<Point3> = rebuilt.into_iter().map(|p| p.unwrap()).collect();
            prop_assert_eq!(rebuilt, cloud.points);
        }
    }
}
