//! Self-supervised objectives over per-point flows.
//!
//! Every loss returns a [`LossValue`]; when gradients are requested they are
//! laid out as one slot per predicted frame, each slot holding one
//! `d loss / d f_i` vector per point of the source cloud. [`chamfer`] is the
//! exception: its two slots are the gradients with respect to the points of
//! its first and second operand.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Point3, PointCloud, PointFlowSet, Vec3};
use crate::masks::{split, StaticDynamicMask};
use crate::pieces::RigidPieces;
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<Vec<Vec<Vec3>>>,
}

impl LossValue {
    pub fn zero(slots: &[usize], want_grad: bool) -> Self {
        Self {
            value: 0.0,
            grad: want_grad.then(|| slots.iter().map(|&n| vec![Vec3::zeros(); n]).collect()),
        }
    }

    /// `self += w * other`, gradients included when both carry them.
    pub fn add_scaled(&mut self, w: f64, other: &LossValue) -> Result<()> {
        self.value += w * other.value;
        match (&mut self.grad, &other.grad) {
            (Some(mine), Some(theirs)) => {
                if mine.len() != theirs.len() {
                    return Err(Error::LengthMismatch {
                        what: "gradient slots",
                        left: mine.len(),
                        right: theirs.len(),
                    });
                }
                for (a, b) in mine.iter_mut().zip(theirs) {
                    if a.len() != b.len() {
                        return Err(Error::LengthMismatch {
                            what: "gradient slot length",
                            left: a.len(),
                            right: b.len(),
                        });
                    }
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += w * y;
                    }
                }
            }
            (Some(_), None) => self.grad = None,
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_mc: f64,
    pub lambda_pr: f64,
    pub lambda_tc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mc: 1.0,
            lambda_pr: 0.1,
            lambda_tc: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_mc, self.lambda_pr, self.lambda_tc]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !ok {
            return Err(Error::invalid(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Vector norm used by the rigidity and temporal terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Norm {
    /// Sum of absolute components.
    #[default]
    L1,
    L2,
}

impl Norm {
    pub fn value(self, v: &Vec3) -> f64 {
        match self {
            Norm::L1 => v.x.abs() + v.y.abs() + v.z.abs(),
            Norm::L2 => v.norm(),
        }
    }

    /// A subgradient; zero at the kink.
    pub fn grad(self, v: &Vec3) -> Vec3 {
        match self {
            Norm::L1 => v.map(sign),
            Norm::L2 => {
                let n = v.norm();
                if n > 0.0 {
                    v / n
                } else {
                    Vec3::zeros()
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ordered_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |acc, v| acc + v)
}

// ---------------------------------------------------------------------------
// Chamfer

/// Nearest-neighbor assignments in both directions between two point sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondences {
    pub a_to_b: Vec<usize>,
    pub b_to_a: Vec<usize>,
}

impl Correspondences {
    pub fn between(a: &[Point3], b: &[Point3], tree_a: &KdTree, tree_b: &KdTree) -> Self {
        let nn = |pts: &[Point3], tree: &KdTree| -> Vec<usize> {
            pts.par_iter()
                .map(|p| tree.nearest(p).map(|n| n.index).unwrap_or(0))
                .collect()
        };
        Self {
            a_to_b: nn(a, tree_b),
            b_to_a: nn(b, tree_a),
        }
    }
}

/// Chamfer value with correspondences held fixed, plus gradients with
/// respect to both operands.
pub fn chamfer_fixed(
    a: &[Point3],
    b: &[Point3],
    corr: &Correspondences,
    want_grad: bool,
) -> (f64, Option<(Vec<Vec3>, Vec<Vec3>)>) {
    let fwd: Vec<f64> = a
        .par_iter()
        .zip(&corr.a_to_b)
        .map(|(p, &j)| (p - b[j]).norm_squared())
        .collect();
    let bwd: Vec<f64> = b
        .par_iter()
        .zip(&corr.b_to_a)
        .map(|(q, &i)| (q - a[i]).norm_squared())
        .collect();
    let value = ordered_sum(fwd) + ordered_sum(bwd);
    if !want_grad {
        return (value, None);
    }
    let mut ga: Vec<Vec3> = a.iter().zip(&corr.a_to_b).map(|(p, &j)| 2.0 * (p - b[j])).collect();
    let mut gb: Vec<Vec3> = b.iter().zip(&corr.b_to_a).map(|(q, &i)| 2.0 * (q - a[i])).collect();
    for (i, &j) in corr.a_to_b.iter().enumerate() {
        gb[j] -= 2.0 * (a[i] - b[j]);
    }
    for (j, &i) in corr.b_to_a.iter().enumerate() {
        ga[i] -= 2.0 * (b[j] - a[i]);
    }
    (value, Some((ga, gb)))
}

/// Symmetric sum of squared nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud, want_grad: bool) -> Result<LossValue> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyOperand("chamfer needs two non-empty clouds"));
    }
    let corr = Correspondences::between(&a.points, &b.points, &KdTree::new(&a.points), &KdTree::new(&b.points));
    let (value, grad) = chamfer_fixed(&a.points, &b.points, &corr, want_grad);
    Ok(LossValue {
        value,
        grad: grad.map(|(ga, gb)| vec![ga, gb]),
    })
}

// ---------------------------------------------------------------------------
// Masked Chamfer with static penalty

/// A target frame and its pseudo mask.
#[derive(Debug, Clone, Copy)]
pub struct FrameObservation<'a> {
    pub cloud: &'a PointCloud,
    pub mask: &'a StaticDynamicMask,
}

/// Precomputed state for repeated masked-Chamfer evaluation: the mask
/// splits and the k-d trees over the fixed target sets.
#[derive(Debug, Clone)]
pub struct MaskedChamfer {
    n0: usize,
    offsets: Vec<i32>,
    dynamic_idx: Vec<usize>,
    static_idx: Vec<usize>,
    source: Vec<Point3>,
    targets: Vec<(Vec<Point3>, KdTree)>,
}

impl MaskedChamfer {
    pub fn new(cloud0: &PointCloud, mask0: &StaticDynamicMask, frames: &[FrameObservation<'_>]) -> Result<Self> {
        let s0 = split(cloud0, mask0)?;
        let mut targets = Vec::with_capacity(frames.len());
        let mut offsets = Vec::with_capacity(frames.len());
        for f in frames {
            let s = split(f.cloud, f.mask)?;
            let tree = KdTree::new(&s.dynamic.points);
            targets.push((s.dynamic.points, tree));
            offsets.push(f.cloud.frame_index);
        }
        Ok(Self {
            n0: cloud0.len(),
            offsets,
            dynamic_idx: s0.dynamic_idx,
            static_idx: s0.static_idx,
            source: s0.dynamic.points,
            targets,
        })
    }

    pub fn source_len(&self) -> usize {
        self.n0
    }

    fn check(&self, flows: &[PointFlowSet]) -> Result<()> {
        if flows.len() != self.targets.len() {
            return Err(Error::LengthMismatch {
                what: "flow sets vs target frames",
                left: flows.len(),
                right: self.targets.len(),
            });
        }
        for (f, &t) in flows.iter().zip(&self.offsets) {
            if f.len() != self.n0 {
                return Err(Error::LengthMismatch {
                    what: "flows vs source cloud",
                    left: f.len(),
                    right: self.n0,
                });
            }
            if f.time_offset != t {
                return Err(Error::invalid(format!(
                    "flow set for offset {} paired with frame {t}",
                    f.time_offset
                )));
            }
        }
        Ok(())
    }

    fn warped(&self, flow: &PointFlowSet) -> Vec<Point3> {
        self.dynamic_idx.iter().zip(&self.source).map(|(&i, p)| p + flow.flows[i]).collect()
    }

    /// Current nearest-neighbor assignments per frame; `None` where either
    /// dynamic set is empty.
    pub fn correspondences(&self, flows: &[PointFlowSet]) -> Result<Vec<Option<Correspondences>>> {
        self.check(flows)?;
        Ok(flows
            .iter()
            .zip(&self.targets)
            .map(|(flow, (target, tree))| {
                if self.source.is_empty() || target.is_empty() {
                    return None;
                }
                let warped = self.warped(flow);
                Some(Correspondences::between(&warped, target, &KdTree::new(&warped), tree))
            })
            .collect())
    }

    pub fn evaluate(&self, flows: &[PointFlowSet], want_grad: bool) -> Result<LossValue> {
        let corr = self.correspondences(flows)?;
        self.evaluate_fixed(flows, &corr, want_grad)
    }

    pub fn evaluate_fixed(
        &self,
        flows: &[PointFlowSet],
        corr: &[Option<Correspondences>],
        want_grad: bool,
    ) -> Result<LossValue> {
        self.check(flows)?;
        let nt = flows.len() as f64;
        let mut out = LossValue::zero(&vec![self.n0; flows.len()], want_grad);
        let n_static = self.static_idx.len() as f64;
        for (k, (flow, (target, _))) in flows.iter().zip(&self.targets).enumerate() {
            let mut term = 0.0;
            if let Some(c) = &corr[k] {
                let warped = self.warped(flow);
                let (v, g) = chamfer_fixed(&warped, target, c, want_grad);
                term += v;
                if let (Some((ga, _)), Some(grad)) = (g, out.grad.as_mut()) {
                    for (&i, gi) in self.dynamic_idx.iter().zip(ga) {
                        grad[k][i] += gi / nt;
                    }
                }
            }
            if !self.static_idx.is_empty() {
                term += ordered_sum(self.static_idx.iter().map(|&i| Norm::L1.value(&flow.flows[i]))) / n_static;
                if let Some(grad) = out.grad.as_mut() {
                    for &i in &self.static_idx {
                        grad[k][i] += Norm::L1.grad(&flow.flows[i]) / (n_static * nt);
                    }
                }
            }
            out.value += term / nt;
        }
        Ok(out)
    }
}

/// Mean over frames of the Chamfer distance between the pseudo-dynamic parts
/// of the target frame and the warped source, plus the mean L1 flow of the
/// pseudo-static source points.
pub fn masked_chamfer(
    cloud0: &PointCloud,
    mask0: &StaticDynamicMask,
    frames: &[FrameObservation<'_>],
    flows: &[PointFlowSet],
    want_grad: bool,
) -> Result<LossValue> {
    MaskedChamfer::new(cloud0, mask0, frames)?.evaluate(flows, want_grad)
}

// ---------------------------------------------------------------------------
// Piecewise rigidity

/// Members of every piece, precomputed for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Rigidity {
    n0: usize,
    members: Vec<Vec<usize>>,
    norm: Norm,
}

impl Rigidity {
    pub fn new(pieces: &RigidPieces, norm: Norm) -> Self {
        let mut members = vec![Vec::new(); pieces.piece_count];
        for (i, &l) in pieces.labels.iter().enumerate() {
            if l >= 0 {
                members[l as usize].push(i);
            }
        }
        members.retain(|m| !m.is_empty());
        Self {
            n0: pieces.labels.len(),
            members,
            norm,
        }
    }

    pub fn evaluate(&self, flows: &[PointFlowSet], want_grad: bool) -> Result<LossValue> {
        for f in flows {
            if f.len() != self.n0 {
                return Err(Error::LengthMismatch {
                    what: "flows vs pieces",
                    left: f.len(),
                    right: self.n0,
                });
            }
        }
        let mut out = LossValue::zero(&vec![self.n0; flows.len()], want_grad);
        if self.members.is_empty() || flows.is_empty() {
            return Ok(out);
        }
        let nt = flows.len() as f64;
        let nr = self.members.len() as f64;
        for (k, flow) in flows.iter().enumerate() {
            let per_piece: Vec<(f64, Vec<(usize, Vec3)>)> = self
                .members
                .par_iter()
                .map(|m| {
                    let size = m.len() as f64;
                    let mean = m.iter().fold(Vec3::zeros(), |acc, &i| acc + flow.flows[i]) / size;
                    let dev = ordered_sum(m.iter().map(|&i| self.norm.value(&(mean - flow.flows[i])))) / size;
                    let mut g = Vec::new();
                    if want_grad {
                        let s: Vec<Vec3> = m.iter().map(|&i| self.norm.grad(&(mean - flow.flows[i]))).collect();
                        let s_mean = s.iter().fold(Vec3::zeros(), |acc, v| acc + v) / size;
                        let c = 1.0 / (nt * nr * size);
                        g = m.iter().zip(&s).map(|(&i, si)| (i, c * (s_mean - si))).collect();
                    }
                    (dev, g)
                })
                .collect();
            out.value += ordered_sum(per_piece.iter().map(|(d, _)| *d)) / nr / nt;
            if let Some(grad) = out.grad.as_mut() {
                for (_, g) in &per_piece {
                    for &(i, v) in g {
                        grad[k][i] += v;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Mean over frames of the piece-averaged deviation from each piece's mean
/// flow. Zero when there are no pieces.
pub fn rigidity(pieces: &RigidPieces, flows: &[PointFlowSet], norm: Norm, want_grad: bool) -> Result<LossValue> {
    Rigidity::new(pieces, norm).evaluate(flows, want_grad)
}

// ---------------------------------------------------------------------------
// Temporal consistency

/// Mean deviation of per-frame velocities `f^t / t` from their average over
/// frames, averaged over points and frames.
pub fn temporal_consistency(flows: &[PointFlowSet], norm: Norm, want_grad: bool) -> Result<LossValue> {
    if flows.is_empty() {
        return Err(Error::EmptyOperand("temporal consistency needs at least one frame"));
    }
    if flows.iter().any(|f| f.time_offset == 0) {
        return Err(Error::invalid("temporal consistency: offset 0 is not a prediction frame"));
    }
    let n = flows[0].len();
    for f in flows {
        if f.len() != n {
            return Err(Error::LengthMismatch {
                what: "flow sets across frames",
                left: f.len(),
                right: n,
            });
        }
    }
    let nt = flows.len();
    let mut out = LossValue::zero(&vec![n; nt], want_grad);
    if n == 0 {
        return Ok(out);
    }
    let inv_t: Vec<f64> = flows.iter().map(|f| 1.0 / f.time_offset as f64).collect();
    let per_point: Vec<(f64, Vec<Vec3>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let v: Vec<Vec3> = flows.iter().zip(&inv_t).map(|(f, s)| f.flows[i] * *s).collect();
            let v_mean = v.iter().fold(Vec3::zeros(), |acc, x| acc + x) / nt as f64;
            let dev = ordered_sum(v.iter().map(|x| norm.value(&(v_mean - x))));
            let mut g = Vec::new();
            if want_grad {
                let s: Vec<Vec3> = v.iter().map(|x| norm.grad(&(v_mean - x))).collect();
                let s_sum = s.iter().fold(Vec3::zeros(), |acc, x| acc + x);
                let c = 1.0 / (n as f64 * nt as f64);
                g = s
                    .iter()
                    .zip(&inv_t)
                    .map(|(sk, it)| c * it * (s_sum / nt as f64 - sk))
                    .collect();
            }
            (dev, g)
        })
        .collect();
    out.value = ordered_sum(per_point.iter().map(|(d, _)| *d)) / (n as f64 * nt as f64);
    if let Some(grad) = out.grad.as_mut() {
        for (i, (_, g)) in per_point.iter().enumerate() {
            for (k, gk) in g.iter().enumerate() {
                grad[k][i] = *gk;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Local smoothness

/// The `k` nearest spatial neighbors of every point, itself excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn knn(cloud: &PointCloud, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("smoothness needs k >= 1"));
        }
        if cloud.len() <= k {
            return Err(Error::invalid(format!(
                "smoothness needs more than k={k} points, got {}",
                cloud.len()
            )));
        }
        let tree = KdTree::new(&cloud.points);
        let neighbors = cloud
            .points
            .par_iter()
            .enumerate()
            .map(|(i, p)| tree.k_nearest(p, k, Some(i)).into_iter().map(|n| n.index).collect())
            .collect();
        Ok(Self { neighbors })
    }

    pub fn evaluate(&self, flows: &PointFlowSet, want_grad: bool) -> Result<LossValue> {
        let n = self.neighbors.len();
        if flows.len() != n {
            return Err(Error::LengthMismatch {
                what: "flows vs neighbor graph",
                left: flows.len(),
                right: n,
            });
        }
        let f = &flows.flows;
        let terms: Vec<f64> = self
            .neighbors
            .par_iter()
            .enumerate()
            .map(|(i, nb)| ordered_sum(nb.iter().map(|&j| (f[i] - f[j]).norm_squared())) / nb.len() as f64)
            .collect();
        let mut out = LossValue {
            value: ordered_sum(terms),
            grad: None,
        };
        if want_grad {
            let mut g = vec![Vec3::zeros(); n];
            for (i, nb) in self.neighbors.iter().enumerate() {
                let w = 2.0 / nb.len() as f64;
                for &j in nb {
                    let d = w * (f[i] - f[j]);
                    g[i] += d;
                    g[j] -= d;
                }
            }
            out.grad = Some(vec![g]);
        }
        Ok(out)
    }
}

/// Sum over points of the mean squared flow difference to the `k` nearest
/// spatial neighbors.
pub fn smoothness(cloud: &PointCloud, flows: &PointFlowSet, k: usize, want_grad: bool) -> Result<LossValue> {
    NeighborGraph::knn(cloud, k)?.evaluate(flows, want_grad)
}

// ---------------------------------------------------------------------------
// Weighted total

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossComponents {
    pub masked_chamfer: LossValue,
    pub rigidity: LossValue,
    pub temporal: LossValue,
}

pub fn total(c: &LossComponents, w: &LossWeights) -> Result<LossValue> {
    w.validate()?;
    let mut out = LossValue {
        value: 0.0,
        grad: None,
    };
    let terms = [
        (w.lambda_mc, &c.masked_chamfer),
        (w.lambda_pr, &c.rigidity),
        (w.lambda_tc, &c.temporal),
    ];
    let mut grad_ok = true;
    for (lambda, term) in terms {
        if lambda == 0.0 {
            continue;
        }
        out.value += lambda * term.value;
        match (&mut out.grad, &term.grad) {
            (_, None) => grad_ok = false,
            (None, Some(g)) => out.grad = Some(g.iter().map(|s| s.iter().map(|v| v * lambda).collect()).collect()),
            (Some(_), Some(_)) => {
                let mut tmp = LossValue { value: 0.0, grad: out.grad.take() };
                tmp.add_scaled(lambda, &LossValue { value: 0.0, grad: term.grad.clone() })?;
                out.grad = tmp.grad;
            }
        }
    }
    if !grad_ok {
        out.grad = None;
    }
    Ok(out)
}
