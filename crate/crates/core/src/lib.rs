//! Self-supervised BEV motion fields from LiDAR sweeps and camera optical flow.
//!
//! The pipeline turns synchronized point clouds and per-camera flow images
//! into two supervision signals, per-point static/dynamic masks and rigid
//! pieces, and fits a dense BEV displacement field against them.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod masks;
pub mod optimizer;
pub mod pieces;
pub mod projection;
pub mod render;
pub mod scene;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{BevGridSpec, BevMotionField, FrameSet, Point3, PointCloud, PointFlowSet, Vec2, Vec3};
pub use masks::{MaskThresholds, PointStatus, StaticDynamicMask};
pub use optimizer::{optimize, OptimConfig, OptimReport};
pub use pieces::{PieceParams, RigidPieces};
pub use projection::{CalibratedCamera, FlowImage, FlowSampling};
pub use scene::{build_supervision, LabelConfig, SceneBundle, SupervisionBundle};
