//! Central finite-difference checks of the analytic loss gradients.
//!
//! Each loss is evaluated on small random instances. A coordinate is skipped
//! when the loss is not differentiable within one step of the sample: a
//! nearest-neighbor assignment changes, or an L1 argument component is within
//! two steps of zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Point3, PointCloud, PointFlowSet, Vec3};
use crate::losses::{chamfer, smoothness, temporal_consistency, Correspondences, FrameObservation, MaskedChamfer, Norm, Rigidity};
use crate::masks::{PointStatus, StaticDynamicMask};
use crate::pieces::RigidPieces;
use crate::spatial::KdTree;

pub const LOSS_NAMES: [&str; 5] = ["chamfer", "masked_chamfer", "rigidity", "temporal_consistency", "smoothness"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub points: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            points: 50,
            step: 1e-4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

const OFFSETS: [i32; 3] = [-1, 1, 2];

struct Probe<'a> {
    h: f64,
    f: &'a dyn Fn(&[f64]) -> f64,
    /// Whether coordinate `i` may be differenced at `x`.
    smooth: &'a dyn Fn(&[f64], usize) -> bool,
}

impl Probe<'_> {
    fn run(&self, x: &[f64], analytic: &[f64], out: &mut LossCheck) {
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            if !(self.smooth)(x, i) {
                out.skipped += 1;
                continue;
            }
            xp[i] = x[i] + self.h;
            let fp = (self.f)(&xp);
            xp[i] = x[i] - self.h;
            let fm = (self.f)(&xp);
            xp[i] = x[i];
            let fd = (fp - fm) / (2.0 * self.h);
            out.max_rel_error = out.max_rel_error.max(relative_error(fd, analytic[i]));
            out.checked += 1;
        }
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn random_flows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..OFFSETS.len() * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, frame: i32, n: usize) -> StaticDynamicMask {
    StaticDynamicMask {
        frame_index: frame,
        status: (0..n)
            .map(|_| match rng.random_range(0..10) {
                0..=5 => PointStatus::Dynamic,
                6..=8 => PointStatus::Static,
                _ => PointStatus::Unknown,
            })
            .collect(),
    }
}

fn points_from(x: &[f64]) -> Vec<Point3> {
    x.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

/// Flattened `[frame][point][axis]` parameters into flow sets.
fn flows_from(x: &[f64], n: usize) -> Vec<PointFlowSet> {
    OFFSETS
        .iter()
        .enumerate()
        .map(|(k, &t)| PointFlowSet {
            time_offset: t,
            flows: x[k * n * 3..(k + 1) * n * 3].chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        })
        .collect()
}

fn flatten(grad: &[Vec<Vec3>]) -> Vec<f64> {
    grad.iter().flatten().flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn grad_of(v: crate::losses::LossValue) -> Result<Vec<Vec<Vec3>>> {
    v.grad.ok_or_else(|| Error::invalid("loss returned no gradient"))
}

fn check_chamfer(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, out: &mut LossCheck) -> Result<()> {
    let n = cfg.points;
    let a = random_points(rng, n);
    let b = random_points(rng, n + 7);
    let x: Vec<f64> = a.iter().chain(&b).flat_map(|p| [p.x, p.y, p.z]).collect();
    let split = |x: &[f64]| (points_from(&x[..n * 3]), points_from(&x[n * 3..]));
    let corr = |x: &[f64]| {
        let (a, b) = split(x);
        Correspondences::between(&a, &b, &KdTree::new(&a), &KdTree::new(&b))
    };
    let value = |x: &[f64]| {
        let (a, b) = split(x);
        chamfer(&PointCloud { frame_index: 0, points: a }, &PointCloud { frame_index: 1, points: b }, false).map_or(f64::NAN, |v| v.value)
    };
    let base = corr(&x);
    let h = cfg.step;
    let smooth = |x: &[f64], i: usize| {
        let mut y = x.to_vec();
        [h, -h].iter().all(|d| {
            y[i] = x[i] + d;
            corr(&y) == base
        })
    };
    let (pa, pb) = split(&x);
    let g = grad_of(chamfer(&PointCloud::new(0, pa)?, &PointCloud::new(1, pb)?, true)?)?;
    Probe { h, f: &value, smooth: &smooth }.run(&x, &flatten(&g), out);
    Ok(())
}

fn check_masked_chamfer(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, out: &mut LossCheck) -> Result<()> {
    let n = cfg.points;
    let cloud0 = PointCloud::new(0, random_points(rng, n))?;
    let mask0 = random_mask(rng, 0, n);
    let targets: Vec<(PointCloud, StaticDynamicMask)> = OFFSETS
        .iter()
        .map(|&t| {
            let m = n + rng.random_range(0..10);
            let c = PointCloud::new(t, random_points(rng, m))?;
            Ok((c, random_mask(rng, t, m)))
        })
        .collect::<Result<_>>()?;
    let frames: Vec<FrameObservation> = targets.iter().map(|(c, m)| FrameObservation { cloud: c, mask: m }).collect();
    let loss = MaskedChamfer::new(&cloud0, &mask0, &frames)?;
    let x = random_flows(rng, n);
    let base = loss.correspondences(&flows_from(&x, n))?;
    let value = |x: &[f64]| loss.evaluate(&flows_from(x, n), false).map_or(f64::NAN, |v| v.value);
    let h = cfg.step;
    let smooth = |x: &[f64], i: usize| {
        let point = (i / 3) % n;
        if !mask0.status[point].is_dynamic() {
            return x[i].abs() > 2.0 * h;
        }
        let mut y = x.to_vec();
        [h, -h].iter().all(|d| {
            y[i] = x[i] + d;
            loss.correspondences(&flows_from(&y, n)).is_ok_and(|c| c == base)
        })
    };
    let g = grad_of(loss.evaluate(&flows_from(&x, n), true)?)?;
    Probe { h, f: &value, smooth: &smooth }.run(&x, &flatten(&g), out);
    Ok(())
}

fn check_rigidity(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, out: &mut LossCheck) -> Result<()> {
    let n = cfg.points;
    let pieces = RigidPieces {
        frame_index: 0,
        labels: (0..n).map(|_| rng.random_range(-1..5)).collect(),
        piece_count: 5,
    };
    let loss = Rigidity::new(&pieces, Norm::L1);
    let x = random_flows(rng, n);
    let value = |x: &[f64]| loss.evaluate(&flows_from(x, n), false).map_or(f64::NAN, |v| v.value);
    let h = cfg.step;
    // Moving one member moves its piece mean, so every member's deviation
    // along that axis must stay clear of zero.
    let smooth = |x: &[f64], i: usize| {
        let (frame, point, axis) = (i / (3 * n), (i / 3) % n, i % 3);
        let l = pieces.labels[point];
        if l < 0 {
            return true;
        }
        let members: Vec<usize> = (0..n).filter(|&j| pieces.labels[j] == l).collect();
        let at = |j: usize| x[frame * n * 3 + j * 3 + axis];
        let mean = members.iter().map(|&j| at(j)).sum::<f64>() / members.len() as f64;
        members.iter().all(|&j| (at(j) - mean).abs() > 2.0 * h)
    };
    let g = grad_of(loss.evaluate(&flows_from(&x, n), true)?)?;
    Probe { h, f: &value, smooth: &smooth }.run(&x, &flatten(&g), out);
    Ok(())
}

fn check_temporal(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, out: &mut LossCheck) -> Result<()> {
    let n = cfg.points;
    let x = random_flows(rng, n);
    let value = |x: &[f64]| temporal_consistency(&flows_from(x, n), Norm::L1, false).map_or(f64::NAN, |v| v.value);
    let h = cfg.step;
    let smooth = |x: &[f64], i: usize| {
        let (point, axis) = ((i / 3) % n, i % 3);
        let v: Vec<f64> = OFFSETS
            .iter()
            .enumerate()
            .map(|(k, &t)| x[k * n * 3 + point * 3 + axis] / t as f64)
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().all(|vk| (vk - mean).abs() > 2.0 * h)
    };
    let g = grad_of(temporal_consistency(&flows_from(&x, n), Norm::L1, true)?)?;
    Probe { h, f: &value, smooth: &smooth }.run(&x, &flatten(&g), out);
    Ok(())
}

fn check_smoothness(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, out: &mut LossCheck) -> Result<()> {
    let n = cfg.points;
    let cloud = PointCloud::new(0, random_points(rng, n))?;
    let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let as_flow = |x: &[f64]| PointFlowSet {
        time_offset: 1,
        flows: x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
    };
    let value = |x: &[f64]| smoothness(&cloud, &as_flow(x), 8, false).map_or(f64::NAN, |v| v.value);
    let g = grad_of(smoothness(&cloud, &as_flow(&x), 8, true)?)?;
    Probe {
        h: cfg.step,
        f: &value,
        smooth: &|_, _| true,
    }
    .run(&x, &flatten(&g), out);
    Ok(())
}

/// One [`LossCheck`] per entry of [`LOSS_NAMES`], in that order.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<LossCheck>> {
    if cfg.instances == 0 || cfg.points < 10 || !(cfg.step > 0.0) {
        return Err(Error::invalid("gradcheck needs instances, at least 10 points and a positive step"));
    }
    type Check = fn(&mut ChaCha8Rng, &GradcheckConfig, &mut LossCheck) -> Result<()>;
    let checks: [Check; 5] = [check_chamfer, check_masked_chamfer, check_rigidity, check_temporal, check_smoothness];
    LOSS_NAMES
        .iter()
        .zip(checks)
        .enumerate()
        .map(|(k, (&name, check))| {
            let mut out = LossCheck {
                loss: name,
                max_rel_error: 0.0,
                checked: 0,
                skipped: 0,
            };
            for inst in 0..cfg.instances {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((k as u64) << 32) ^ inst as u64);
                check(&mut rng, cfg, &mut out)?;
            }
            Ok(out)
        })
        .collect()
}
