//! Speed-bucketed flow error on non-empty cells.

use crate::error::{Error, Result};
use crate::grid::{BevMotionField, PointCloud};

/// Rescale a field to another horizon assuming constant velocity.
pub fn interpolate_flow(field: &BevMotionField, target_offset: i32) -> Result<BevMotionField> {
    if field.time_offset == 0 {
        return Err(Error::invalid("cannot rescale a field with offset 0"));
    }
    let s = target_offset as f64 / field.time_offset as f64;
    Ok(BevMotionField {
        spec: field.spec,
        time_offset: target_offset,
        values: field.values.iter().map(|v| v * s).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedBuckets {
    /// Upper speed of the slow bucket, m/s (inclusive).
    pub slow_max: f64,
    /// Speeds at or below this count as static, m/s. Zero means exact zero.
    pub static_eps: f64,
    /// Seconds covered by the compared displacements.
    pub horizon_s: f64,
}

impl Default for SpeedBuckets {
    fn default() -> Self {
        Self {
            slow_max: 5.0,
            static_eps: 0.0,
            horizon_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Static,
    Slow,
    Fast,
}

impl SpeedBuckets {
    pub fn classify(&self, gt_displacement: f64) -> Bucket {
        let speed = gt_displacement / self.horizon_s;
        if speed <= self.static_eps {
            Bucket::Static
        } else if speed <= self.slow_max {
            Bucket::Slow
        } else {
            Bucket::Fast
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BucketStats {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl BucketStats {
    fn from_errors(mut e: Vec<f64>) -> Self {
        if e.is_empty() {
            return Self::default();
        }
        e.sort_by(f64::total_cmp);
        let n = e.len();
        let median = if n % 2 == 1 { e[n / 2] } else { 0.5 * (e[n / 2 - 1] + e[n / 2]) };
        let mean = e.iter().sum::<f64>() / n as f64;
        Self { mean, median, count: n }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub static_: BucketStats,
    pub slow: BucketStats,
    pub fast: BucketStats,
}

impl EvalReport {
    pub fn bucket(&self, b: Bucket) -> &BucketStats {
        match b {
            Bucket::Static => &self.static_,
            Bucket::Slow => &self.slow,
            Bucket::Fast => &self.fast,
        }
    }
}

/// Per-cell errors grouped by ground-truth speed.
///
/// Both fields must already describe the same horizon (see
/// [`interpolate_flow`]); `buckets.horizon_s` converts displacement to speed.
pub fn cell_errors(
    pred: &BevMotionField,
    gt: &BevMotionField,
    cloud: &PointCloud,
    buckets: &SpeedBuckets,
) -> Result<Vec<(usize, Bucket, f64)>> {
    if !pred.spec.same_layout(&gt.spec) {
        return Err(Error::invalid("prediction and ground truth use different grids"));
    }
    if pred.time_offset != gt.time_offset {
        return Err(Error::invalid(format!(
            "prediction offset {} differs from ground-truth offset {}",
            pred.time_offset, gt.time_offset
        )));
    }
    let mut occupied = vec![false; gt.spec.num_cells()];
    for p in &cloud.points {
        if let Some(c) = gt.spec.cell_index(p) {
            occupied[c] = true;
        }
    }
    Ok(occupied
        .iter()
        .enumerate()
        .filter(|(_, &o)| o)
        .map(|(c, _)| {
            let g = gt.values[c];
            (c, buckets.classify(g.norm()), (pred.values[c] - g).norm())
        })
        .collect())
}

pub fn evaluate(pred: &BevMotionField, gt: &BevMotionField, cloud: &PointCloud, buckets: &SpeedBuckets) -> Result<EvalReport> {
    let errs = cell_errors(pred, gt, cloud, buckets)?;
    let pick = |b: Bucket| BucketStats::from_errors(errs.iter().filter(|e| e.1 == b).map(|e| e.2).collect());
    Ok(EvalReport {
        static_: pick(Bucket::Static),
        slow: pick(Bucket::Slow),
        fast: pick(Bucket::Fast),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BevGridSpec, Point3, Vec2};
    use proptest::prelude::*;

    fn small() -> BevGridSpec {
        BevGridSpec::new((0.0, 2.0), (0.0, 2.0), (-1.0, 1.0), 1.0).unwrap()
    }

    fn cloud_all_cells() -> PointCloud {
        PointCloud::new(
            0,
            vec![Point3::new(0.5, 0.5, 0.0), Point3::new(0.5, 1.5, 0.0), Point3::new(1.5, 0.5, 0.0), Point3::new(1.5, 1.5, 0.0)],
        )
        .unwrap()
    }

    fn field(t: i32, v: [(f64, f64); 4]) -> BevMotionField {
        BevMotionField::from_values(small(), t, v.iter().map(|&(x, y)| Vec2::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let f = field(1, [(1.0, 0.0), (0.3, -0.4), (0.0, 0.0), (0.0, 0.0)]);
        let g = interpolate_flow(&f, 2).unwrap();
        assert_eq!(g.values[0], Vec2::new(2.0, 0.0));
        assert_eq!(g.values[1], Vec2::new(0.6, -0.8));
        assert_eq!(interpolate_flow(&f, 1).unwrap(), f);
        assert!(interpolate_flow(&field(0, [(0.0, 0.0); 4]), 1).is_err());
    }

    #[test]
    fn bucket_examples() {
        let b = SpeedBuckets::default();
        assert_eq!(b.classify(3.0), Bucket::Slow);
        assert_eq!(b.classify(6.0), Bucket::Fast);
        assert_eq!(b.classify(5.0), Bucket::Slow);
        assert_eq!(b.classify(5.0 + 1e-12), Bucket::Fast);
    }

    #[test]
    fn static_cell_error() {
        let pred = field(2, [(0.3, 0.4), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]);
        let gt = field(2, [(0.0, 0.0); 4]);
        let r = evaluate(&pred, &gt, &cloud_all_cells(), &SpeedBuckets::default()).unwrap();
        assert_eq!(r.static_.count, 4);
        assert!((r.static_.mean - 0.125).abs() < 1e-15);
        let one = PointCloud::new(0, vec![Point3::new(0.5, 0.5, 0.0)]).unwrap();
        let r = evaluate(&pred, &gt, &one, &SpeedBuckets::default()).unwrap();
        assert!((r.static_.mean - 0.5).abs() < 1e-15);
        assert!((r.static_.median - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_cells_are_ignored_and_specs_checked() {
        let gt = field(2, [(6.0, 0.0), (3.0, 0.0), (0.0, 0.0), (0.0, 0.0)]);
        let pred = field(2, [(0.0, 0.0); 4]);
        let one = PointCloud::new(0, vec![Point3::new(0.5, 0.5, 0.0)]).unwrap();
        let r = evaluate(&pred, &gt, &one, &SpeedBuckets::default()).unwrap();
        assert_eq!((r.fast.count, r.slow.count, r.static_.count), (1, 0, 0));
        let other = BevMotionField::zeros(BevGridSpec::default(), 2);
        assert!(evaluate(&other, &gt, &one, &SpeedBuckets::default()).is_err());
    }

    proptest! {
        #[test]
        fn self_evaluation_is_zero_and_partitions(vals in prop::collection::vec((-8.0..8.0f64, -8.0..8.0f64), 4)) {
            let f = field(2, [vals[0], vals[1], vals[2], vals[3]]);
            let r = evaluate(&f, &f, &cloud_all_cells(), &SpeedBuckets::default()).unwrap();
            for b in [r.static_, r.slow, r.fast] {
                prop_assert_eq!(b.mean, 0.0);
                prop_assert_eq!(b.median, 0.0);
            }
            prop_assert_eq!(r.static_.count + r.slow.count + r.fast.count, 4);
        }

        #[test]
        fn median_bounded_by_max(p in prop::collection::vec((-8.0..8.0f64, -8.0..8.0f64), 4), g in prop::collection::vec((-8.0..8.0f64, -8.0..8.0f64), 4)) {
            let pred = field(2, [p[0], p[1], p[2], p[3]]);
            let gt = field(2, [g[0], g[1], g[2], g[3]]);
            let errs = cell_errors(&pred, &gt, &cloud_all_cells(), &SpeedBuckets::default()).unwrap();
            let r = evaluate(&pred, &gt, &cloud_all_cells(), &SpeedBuckets::default()).unwrap();
            for b in [Bucket::Static, Bucket::Slow, Bucket::Fast] {
                let max = errs.iter().filter(|e| e.1 == b).map(|e| e.2).fold(0.0, f64::max);
                prop_assert!(r.bucket(b).median <= max);
                prop_assert!(r.bucket(b).mean >= 0.0);
            }
        }
    }
}
