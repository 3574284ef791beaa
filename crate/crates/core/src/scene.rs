//! Scene data as consumed by the pipeline, and the per-frame supervision
//! derived from it.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{BevGridSpec, BevMotionField, FrameSet, PointCloud};
use crate::masks::{build_mask, CameraView, MaskThresholds, StaticDynamicMask};
use crate::pieces::{build_pieces, PieceParams, RigidPieces};
use crate::projection::{CalibratedCamera, FlowImage, FlowSampling};

/// One physical camera: its calibration per frame and its flow images keyed
/// by the first frame of each pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub camera_id: usize,
    pub width: u32,
    pub height: u32,
    pub calib: BTreeMap<i32, CalibratedCamera>,
    pub flows: BTreeMap<i32, FlowImage>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Displacement fields per predicted offset.
    pub fields: BTreeMap<i32, BevMotionField>,
    /// True motion status per point, keyed by frame.
    pub masks: BTreeMap<i32, StaticDynamicMask>,
    /// Actor index per point (`-1` for static structure), keyed by frame.
    pub instances: BTreeMap<i32, Vec<i32>>,
    /// Frame-0 points that the LiDAR sees but whose first in-image camera
    /// sees a nearer surface. Only the generator knows this; it is not
    /// stored on disk.
    pub camera_occluded: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub grid: BevGridSpec,
    pub frame_set: FrameSet,
    /// Clouds in frame-0 ego coordinates, keyed by frame index.
    pub clouds: BTreeMap<i32, PointCloud>,
    /// Cameras in manifest order.
    pub cameras: Vec<CameraRig>,
    pub ground_truth: Option<GroundTruth>,
}

impl SceneBundle {
    pub fn cloud(&self, t: i32) -> Result<&PointCloud> {
        self.clouds
            .get(&t)
            .ok_or_else(|| Error::Missing(format!("point cloud for frame {t}")))
    }

    /// Camera views for the flow pair starting at frame `t`.
    pub fn views(&self, t: i32) -> Result<Vec<CameraView<'_>>> {
        self.cameras
            .iter()
            .map(|rig| {
                let missing = |what: &str| Error::Missing(format!("{what} for camera {} at frame {t}", rig.camera_id));
                Ok(CameraView {
                    flow: rig.flows.get(&t).ok_or_else(|| missing("flow image"))?,
                    cam_t: rig.calib.get(&t).ok_or_else(|| missing("calibration"))?,
                    cam_next: rig.calib.get(&(t + 1)).ok_or_else(|| missing("next-frame calibration"))?,
                })
            })
            .collect()
    }

    /// Frame 0 followed by the prediction offsets.
    pub fn supervised_frames(&self) -> Vec<i32> {
        std::iter::once(0).chain(self.frame_set.offsets.iter().copied()).collect()
    }

    /// Check every cross reference the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        for t in self.supervised_frames() {
            let cloud = self.cloud(t)?;
            if cloud.frame_index != t {
                return Err(Error::invalid(format!("cloud keyed {t} says frame {}", cloud.frame_index)));
            }
            self.views(t)?;
        }
        for rig in &self.cameras {
            for (t, c) in &rig.calib {
                if c.width != rig.width || c.height != rig.height || c.frame_index != *t || c.camera_id != rig.camera_id {
                    return Err(Error::invalid(format!("calibration of camera {} at frame {t} is inconsistent", rig.camera_id)));
                }
            }
            for (t, f) in &rig.flows {
                if f.width != rig.width || f.height != rig.height || f.frame != *t || f.camera_id != rig.camera_id {
                    return Err(Error::invalid(format!("flow image of camera {} at frame {t} is inconsistent", rig.camera_id)));
                }
            }
        }
        if let Some(gt) = &self.ground_truth {
            for (t, m) in &gt.masks {
                if let Some(c) = self.clouds.get(t) {
                    if c.len() != m.len() {
                        return Err(Error::LengthMismatch {
                            what: "ground-truth mask vs cloud",
                            left: m.len(),
                            right: c.len(),
                        });
                    }
                }
            }
            for (t, ids) in &gt.instances {
                if let Some(c) = self.clouds.get(t) {
                    if c.len() != ids.len() {
                        return Err(Error::LengthMismatch {
                            what: "instance ids vs cloud",
                            left: ids.len(),
                            right: c.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pseudo masks for frame 0 and every prediction frame, plus rigid pieces of
/// frame 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionBundle {
    pub masks: BTreeMap<i32, StaticDynamicMask>,
    pub pieces: RigidPieces,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    pub thresholds: MaskThresholds,
    pub pieces: PieceParams,
    pub sampling: FlowSampling,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            thresholds: MaskThresholds::default(),
            pieces: PieceParams::default(),
            sampling: FlowSampling::Nearest,
        }
    }
}

pub fn build_supervision(scene: &SceneBundle, cfg: &LabelConfig) -> Result<SupervisionBundle> {
    scene.validate()?;
    let frames = scene.supervised_frames();
    let masks = frames
        .par_iter()
        .map(|&t| {
            let views = scene.views(t)?;
            Ok((t, build_mask(scene.cloud(t)?, &views, &cfg.thresholds, cfg.sampling)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let views = scene.views(0)?;
    let flows: Vec<&FlowImage> = views.iter().map(|v| v.flow).collect();
    let cams: Vec<&CalibratedCamera> = views.iter().map(|v| v.cam_t).collect();
    let pieces = build_pieces(scene.cloud(0)?, &flows, &cams, &cfg.pieces, &scene.grid)?;
    Ok(SupervisionBundle { masks, pieces })
}
