//! Shared geometry and BEV grid types.
//!
//! All point clouds live in the ego coordinate system of the current frame
//! (frame 0): x forward, y left, z up, meters. A [`BevMotionField`] stores one
//! planar displacement per grid cell for a single predicted time offset, and
//! points inherit the displacement of the cell they fall in with zero vertical
//! motion.

use nalgebra::{Point3 as NaPoint3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Point3 = NaPoint3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// A timestamped set of points expressed in frame-0 ego coordinates.
///
/// Point order is significant: masks, piece labels and flows index into it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub frame_index: i32,
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(frame_index: i32, points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("point {i} of frame {frame_index} is not finite")));
        }
        Ok(Self { frame_index, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            frame_index: self.frame_index,
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Extents and resolution of the BEV grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub cell_size: f64,
    pub cells_x: usize,
    pub cells_y: usize,
}

impl Default for BevGridSpec {
    /// [-32, 32] x [-32, 32] x [-3, 2] m at 0.25 m, i.e. 256 x 256 cells.
    fn default() -> Self {
        Self::new((-32.0, 32.0), (-32.0, 32.0), (-3.0, 2.0), 0.25).expect("default grid is valid")
    }
}

impl BevGridSpec {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64), cell_size: f64) -> Result<Self> {
        let finite = [x.0, x.1, y.0, y.1, z.0, z.1, cell_size].iter().all(|v| v.is_finite());
        if !finite || cell_size <= 0.0 || x.1 <= x.0 || y.1 <= y.0 || z.1 < z.0 {
            return Err(Error::invalid(format!(
                "bad grid extents x={x:?} y={y:?} z={z:?} cell={cell_size}"
            )));
        }
        let cells_x = ((x.1 - x.0) / cell_size).round() as usize;
        let cells_y = ((y.1 - y.0) / cell_size).round() as usize;
        if cells_x == 0 || cells_y == 0 {
            return Err(Error::invalid("grid has no cells"));
        }
        Ok(Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
            cell_size,
            cells_x,
            cells_y,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }

    /// Cell containing `p`, with half-open binning on x and y.
    ///
    /// Points outside the planar extents or the closed height range map to
    /// `None`.
    pub fn cell_of(&self, p: &Point3) -> Option<(usize, usize)> {
        if !(p.z >= self.z_min && p.z <= self.z_max) {
            return None;
        }
        if !(p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max) {
            return None;
        }
        let ix = ((p.x - self.x_min) / self.cell_size).floor() as usize;
        let iy = ((p.y - self.y_min) / self.cell_size).floor() as usize;
        // Rounding can push a point just below the upper bound into a phantom cell.
        if ix >= self.cells_x || iy >= self.cells_y {
            return None;
        }
        Some((ix, iy))
    }

    /// Row-major (x-major) linear index of the cell containing `p`.
    pub fn cell_index(&self, p: &Point3) -> Option<usize> {
        self.cell_of(p).map(|(ix, iy)| self.linear(ix, iy))
    }

    #[inline]
    pub fn linear(&self, ix: usize, iy: usize) -> usize {
        ix * self.cells_y + iy
    }

    #[inline]
    pub fn unlinear(&self, idx: usize) -> (usize, usize) {
        (idx / self.cells_y, idx % self.cells_y)
    }

    /// Planar center of a cell.
    pub fn cell_center(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(
            self.x_min + (ix as f64 + 0.5) * self.cell_size,
            self.y_min + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn same_layout(&self, other: &BevGridSpec) -> bool {
        self == other
    }
}

/// Per-cell planar displacement from frame 0 to frame `time_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMotionField {
    pub spec: BevGridSpec,
    pub time_offset: i32,
    /// `cells_x * cells_y` values, x-major.
    pub values: Vec<Vec2>,
}

impl BevMotionField {
    pub fn zeros(spec: BevGridSpec, time_offset: i32) -> Self {
        Self {
            spec,
            time_offset,
            values: vec![Vec2::zeros(); spec.num_cells()],
        }
    }

    pub fn from_values(spec: BevGridSpec, time_offset: i32, values: Vec<Vec2>) -> Result<Self> {
        if values.len() != spec.num_cells() {
            return Err(Error::LengthMismatch {
                what: "field values vs grid cells",
                left: values.len(),
                right: spec.num_cells(),
            });
        }
        if values.iter().any(|v| !(v.x.is_finite() && v.y.is_finite())) {
            return Err(Error::invalid("field contains non-finite values"));
        }
        Ok(Self {
            spec,
            time_offset,
            values,
        })
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> Vec2 {
        self.values[self.spec.linear(ix, iy)]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, v: Vec2) {
        let idx = self.spec.linear(ix, iy);
        self.values[idx] = v;
    }

    pub fn max_magnitude(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Per-point 3D displacements for one time offset, aligned with a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFlowSet {
    pub time_offset: i32,
    pub flows: Vec<Vec3>,
}

impl PointFlowSet {
    pub fn zeros(time_offset: i32, n: usize) -> Self {
        Self {
            time_offset,
            flows: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }
}

/// The predicted time offsets and the physical duration of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub offsets: Vec<i32>,
    pub frame_interval_s: f64,
}

impl Default for FrameSet {
    fn default() -> Self {
        Self {
            offsets: vec![-1, 1, 2],
            frame_interval_s: 0.5,
        }
    }
}

impl FrameSet {
    pub fn new(offsets: Vec<i32>, frame_interval_s: f64) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::invalid("frame set is empty"));
        }
        if offsets.contains(&0) {
            return Err(Error::invalid("frame set must not contain offset 0"));
        }
        let mut sorted = offsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != offsets.len() {
            return Err(Error::invalid(format!("duplicate offsets in {offsets:?}")));
        }
        if !(frame_interval_s > 0.0 && frame_interval_s.is_finite()) {
            return Err(Error::invalid("frame interval must be positive"));
        }
        Ok(Self {
            offsets,
            frame_interval_s,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn seconds(&self, offset: i32) -> f64 {
        offset as f64 * self.frame_interval_s
    }
}

/// Assign every point the displacement of its BEV cell, with zero vertical
/// motion. Points outside the grid get zero flow so indices stay aligned.
pub fn field_to_point_flows(field: &BevMotionField, cloud: &PointCloud) -> PointFlowSet {
    let flows = cloud
        .points
        .iter()
        .map(|p| match field.spec.cell_of(p) {
            Some((ix, iy)) => {
                let v = field.get(ix, iy);
                Vec3::new(v.x, v.y, 0.0)
            }
            None => Vec3::zeros(),
        })
        .collect();
    PointFlowSet {
        time_offset: field.time_offset,
        flows,
    }
}

/// Displace each point by its flow. The result carries the flow's time offset.
pub fn warp(cloud: &PointCloud, flows: &PointFlowSet) -> Result<PointCloud> {
    if cloud.len() != flows.len() {
        return Err(Error::LengthMismatch {
            what: "cloud vs flows",
            left: cloud.len(),
            right: flows.len(),
        });
    }
    let points = cloud.points.iter().zip(&flows.flows).map(|(p, f)| p + f).collect();
    Ok(PointCloud {
        frame_index: flows.time_offset,
        points,
    })
}
