//! Direct per-cell fitting of BEV motion fields to the self-supervised loss.
//!
//! Only cells that contain at least one frame-0 point carry parameters; the
//! rest stay zero. Every iteration broadcasts the cell values to the points,
//! evaluates the loss with per-point gradients, sums them back into the cells
//! (the exact gradient with respect to the cell values) and steps along the
//! per-cell mean gradient.
//!
//! The optional [`Coupling`] preconditioner reshapes that step with the
//! structure of the two regularizers: within every mostly pseudo-dynamic
//! rigid piece the part of the step that deviates from the piece mean is
//! damped by `1 + c_pr`, and across frames the part that deviates from a constant velocity is damped
//! through `(I + c_tc H)^-1`, where `H` is the Hessian of the squared
//! velocity deviation. The preconditioner is symmetric positive definite, so
//! it changes the path but not the stationary points of the loss.

use std::time::Instant;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{BevMotionField, FrameSet, PointCloud, PointFlowSet, Vec2, Vec3};
use crate::losses::{temporal_consistency, total, FrameObservation, LossComponents, LossValue, LossWeights, MaskedChamfer, NeighborGraph, Norm, Rigidity};
use crate::masks::{PointStatus, StaticDynamicMask};
use crate::scene::{SceneBundle, SupervisionBundle};

/// Which points enter the Chamfer term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChamferMode {
    /// Pseudo-dynamic points only, plus the static-flow penalty.
    #[default]
    Masked,
    /// Every point, no static penalty.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    pub weight: f64,
    pub k: usize,
}

/// Gains of the regularizer-shaped preconditioner. The damping strengths
/// are `rigidity_gain * lambda_pr` and `temporal_gain * lambda_tc`, so a
/// disabled term also disables its coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub rigidity_gain: f64,
    pub temporal_gain: f64,
}

impl Default for Coupling {
    fn default() -> Self {
        Self {
            rigidity_gain: 10_000.0,
            temporal_gain: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Relative loss change over `convergence_window` iterations.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub frame_set: FrameSet,
    pub weights: LossWeights,
    pub norm: Norm,
    pub chamfer: ChamferMode,
    pub smoothness: Option<Smoothness>,
    pub coupling: Option<Coupling>,
    /// Heavy-ball momentum on the update direction; 0 is plain descent.
    pub momentum: f64,
    /// Reserved for stochastic variants; the current loop is deterministic.
    pub seed: u64,
    /// Record the loss every this many iterations (the first and last are
    /// always recorded).
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            learning_rate: 0.05,
            lr_decay_every: 100,
            lr_decay: 0.5,
            convergence_tol: 1e-5,
            convergence_window: 10,
            frame_set: FrameSet::default(),
            weights: LossWeights::default(),
            norm: Norm::L1,
            chamfer: ChamferMode::Masked,
            smoothness: None,
            coupling: Some(Coupling::default()),
            momentum: 0.8,
            seed: 0,
            log_every: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.max_iters == 0 || !(self.learning_rate > 0.0) || self.lr_decay_every == 0 || !(self.lr_decay > 0.0) {
            return Err(Error::invalid("iteration counts and rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.convergence_tol >= 0.0) || self.convergence_window == 0 || self.log_every == 0 {
            return Err(Error::invalid("bad convergence settings"));
        }
        if let Some(s) = self.smoothness {
            if !(s.weight >= 0.0) || s.k == 0 {
                return Err(Error::invalid("bad smoothness settings"));
            }
        }
        if let Some(c) = self.coupling {
            if !(c.rigidity_gain >= 0.0 && c.temporal_gain >= 0.0) {
                return Err(Error::invalid("coupling gains must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub total: f64,
    pub masked_chamfer: f64,
    pub rigidity: f64,
    pub temporal: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimReport {
    pub iterations: usize,
    pub converged: bool,
    pub trajectory: Vec<IterRecord>,
    /// One field per prediction offset, in frame-set order.
    pub fields: Vec<BevMotionField>,
    pub wall_time_s: f64,
}

impl OptimReport {
    pub fn field(&self, t: i32) -> Option<&BevMotionField> {
        self.fields.iter().find(|f| f.time_offset == t)
    }

    pub fn final_record(&self) -> Option<&IterRecord> {
        self.trajectory.last()
    }
}

/// The loss as a function of the non-empty cell values.
pub struct Objective {
    cloud0: PointCloud,
    offsets: Vec<i32>,
    weights: LossWeights,
    norm: Norm,
    /// Grid cell index of each parameter cell.
    cells: Vec<usize>,
    /// Parameter cell of every frame-0 point.
    point_cell: Vec<Option<usize>>,
    cell_count: Vec<usize>,
    chamfer: MaskedChamfer,
    rigidity: Rigidity,
    smoothness: Option<(f64, NeighborGraph)>,
    template: BevMotionField,
    /// Piece of each parameter cell, if any.
    cell_piece: Vec<Option<usize>>,
    piece_count: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub components: LossComponents,
    pub smoothness: f64,
    pub total: f64,
    /// d total / d cell value, per offset and parameter cell.
    pub cell_grad: Option<Vec<Vec<Vec2>>>,
}

impl Objective {
    pub fn new(scene: &SceneBundle, sup: &SupervisionBundle, cfg: &OptimConfig) -> Result<Self> {
        cfg.validate()?;
        let cloud0 = scene.cloud(0)?.clone();
        let offsets = cfg.frame_set.offsets.clone();
        let all_dynamic = |c: &PointCloud| StaticDynamicMask::uniform(c.frame_index, c.len(), PointStatus::Dynamic);
        let mask_for = |t: i32, c: &PointCloud| -> Result<StaticDynamicMask> {
            match cfg.chamfer {
                ChamferMode::Full => Ok(all_dynamic(c)),
                ChamferMode::Masked => sup
                    .masks
                    .get(&t)
                    .cloned()
                    .ok_or_else(|| Error::Missing(format!("pseudo mask for frame {t}"))),
            }
        };
        let mask0 = mask_for(0, &cloud0)?;
        let mut targets = Vec::with_capacity(offsets.len());
        for &t in &offsets {
            let c = scene.cloud(t)?;
            targets.push((c, mask_for(t, c)?));
        }
        let frames: Vec<FrameObservation> = targets.iter().map(|(c, m)| FrameObservation { cloud: c, mask: m }).collect();
        let chamfer = MaskedChamfer::new(&cloud0, &mask0, &frames)?;
        if sup.pieces.labels.len() != cloud0.len() {
            return Err(Error::LengthMismatch {
                what: "pieces vs frame-0 cloud",
                left: sup.pieces.labels.len(),
                right: cloud0.len(),
            });
        }
        let rigidity = Rigidity::new(&sup.pieces, cfg.norm);
        let smoothness = match cfg.smoothness {
            Some(s) if s.weight > 0.0 => Some((s.weight, NeighborGraph::knn(&cloud0, s.k)?)),
            _ => None,
        };

        // Only pieces that are mostly pseudo-dynamic are coupled; a static
        // piece must not follow a handful of mislabelled points.
        let mut piece_votes = vec![(0usize, 0usize); sup.pieces.piece_count];
        for (l, s) in sup.pieces.labels.iter().zip(&mask0.status) {
            if *l >= 0 {
                let v = &mut piece_votes[*l as usize];
                v.0 += usize::from(s.is_dynamic());
                v.1 += 1;
            }
        }
        let coupled: Vec<bool> = piece_votes.iter().map(|&(d, n)| 2 * d > n).collect();

        let spec = scene.grid;
        let mut cell_of_grid = vec![usize::MAX; spec.num_cells()];
        let mut cells = Vec::new();
        let mut cell_count = Vec::new();
        let mut cell_piece: Vec<Option<usize>> = Vec::new();
        let mut point_cell = Vec::with_capacity(cloud0.len());
        for (i, p) in cloud0.points.iter().enumerate() {
            let pc = spec.cell_index(p).map(|g| {
                if cell_of_grid[g] == usize::MAX {
                    cell_of_grid[g] = cells.len();
                    cells.push(g);
                    cell_count.push(0);
                    cell_piece.push(None);
                }
                let c = cell_of_grid[g];
                cell_count[c] += 1;
                let l = sup.pieces.labels[i];
                if l >= 0 && coupled[l as usize] && cell_piece[c].is_none() {
                    cell_piece[c] = Some(l as usize);
                }
                c
            });
            point_cell.push(pc);
        }
        Ok(Self {
            cloud0,
            offsets,
            weights: cfg.weights,
            norm: cfg.norm,
            cells,
            point_cell,
            cell_count,
            chamfer,
            rigidity,
            smoothness,
            template: BevMotionField::zeros(spec, 0),
            cell_piece,
            piece_count: sup.pieces.piece_count,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    pub fn zeros(&self) -> Vec<Vec<Vec2>> {
        vec![vec![Vec2::zeros(); self.cells.len()]; self.offsets.len()]
    }

    /// Parameters that reproduce `fields` (one per offset, in order) on the
    /// non-empty cells.
    pub fn params_from_fields(&self, fields: &[BevMotionField]) -> Result<Vec<Vec<Vec2>>> {
        if fields.len() != self.offsets.len() {
            return Err(Error::LengthMismatch {
                what: "fields vs offsets",
                left: fields.len(),
                right: self.offsets.len(),
            });
        }
        self.offsets
            .iter()
            .zip(fields)
            .map(|(&t, f)| {
                if f.time_offset != t || !f.spec.same_layout(&self.template.spec) {
                    return Err(Error::invalid(format!("field for offset {t} does not match the objective")));
                }
                Ok(self.cells.iter().map(|&g| f.values[g]).collect())
            })
            .collect()
    }

    pub fn point_flows(&self, params: &[Vec<Vec2>]) -> Vec<PointFlowSet> {
        self.offsets
            .iter()
            .zip(params)
            .map(|(&t, theta)| PointFlowSet {
                time_offset: t,
                flows: self
                    .point_cell
                    .iter()
                    .map(|c| c.map_or(Vec3::zeros(), |c| Vec3::new(theta[c].x, theta[c].y, 0.0)))
                    .collect(),
            })
            .collect()
    }

    pub fn fields(&self, params: &[Vec<Vec2>]) -> Vec<BevMotionField> {
        self.offsets
            .iter()
            .zip(params)
            .map(|(&t, theta)| {
                let mut f = self.template.clone();
                f.time_offset = t;
                for (c, &g) in self.cells.iter().enumerate() {
                    f.values[g] = theta[c];
                }
                f
            })
            .collect()
    }

    pub fn evaluate(&self, params: &[Vec<Vec2>], want_grad: bool) -> Result<Evaluation> {
        if params.len() != self.offsets.len() || params.iter().any(|p| p.len() != self.cells.len()) {
            return Err(Error::invalid("parameter shape does not match the objective"));
        }
        let flows = self.point_flows(params);
        let w = self.weights;
        let skip = || LossValue::zero(&vec![self.cloud0.len(); flows.len()], want_grad);
        let components = LossComponents {
            masked_chamfer: if w.lambda_mc > 0.0 { self.chamfer.evaluate(&flows, want_grad)? } else { skip() },
            rigidity: if w.lambda_pr > 0.0 { self.rigidity.evaluate(&flows, want_grad)? } else { skip() },
            temporal: if w.lambda_tc > 0.0 { temporal_consistency(&flows, self.norm, want_grad)? } else { skip() },
        };
        let mut combined = total(&components, &w)?;
        if combined.grad.is_none() && want_grad {
            combined.grad = Some(vec![vec![Vec3::zeros(); self.cloud0.len()]; flows.len()]);
        }
        let mut smooth_value = 0.0;
        if let Some((weight, graph)) = &self.smoothness {
            let nt = flows.len() as f64;
            for (k, f) in flows.iter().enumerate() {
                let s = graph.evaluate(f, want_grad)?;
                smooth_value += s.value / nt;
                if let (Some(g), Some(sg)) = (combined.grad.as_mut(), s.grad) {
                    for (a, b) in g[k].iter_mut().zip(&sg[0]) {
                        *a += weight / nt * b;
                    }
                }
            }
            combined.value += weight * smooth_value;
        }
        let cell_grad = combined.grad.map(|g| {
            g.iter()
                .map(|per_point| {
                    let mut acc = vec![Vec2::zeros(); self.cells.len()];
                    for (gi, c) in per_point.iter().zip(&self.point_cell) {
                        if let Some(c) = c {
                            acc[*c] += Vec2::new(gi.x, gi.y);
                        }
                    }
                    acc
                })
                .collect()
        });
        Ok(Evaluation {
            components,
            smoothness: smooth_value,
            total: combined.value,
            cell_grad,
        })
    }

    /// Step direction: per-cell mean gradient, optionally preconditioned.
    fn direction(&self, grad: &[Vec<Vec2>], coupling: Option<(f64, f64)>) -> Vec<Vec<Vec2>> {
        let mut d: Vec<Vec<Vec2>> = grad
            .iter()
            .map(|g| g.iter().zip(&self.cell_count).map(|(v, &n)| v / n as f64).collect())
            .collect();
        if let Some((c_pr, c_tc)) = coupling {
            self.precondition(&mut d, c_pr, c_tc);
        }
        d
    }

    fn precondition(&self, d: &mut [Vec<Vec2>], c_pr: f64, c_tc: f64) {
        let nt = self.offsets.len();
        // Per-frame operators (I + c_pr e + c_tc H)^-1 for e = 0 (piece means
        // and unpieced cells) and e = 1 (deviations from the piece mean).
        let h = {
            let dinv = DMatrix::from_diagonal(&DVector::from_iterator(nt, self.offsets.iter().map(|&t| 1.0 / t as f64)));
            let center = DMatrix::identity(nt, nt) - DMatrix::from_element(nt, nt, 1.0 / nt as f64);
            &dinv * center * &dinv
        };
        let op = |e: f64| -> DMatrix<f64> {
            let m = DMatrix::identity(nt, nt) * (1.0 + c_pr * e) + &h * c_tc;
            m.try_inverse().unwrap_or_else(|| DMatrix::identity(nt, nt))
        };
        let (a0, a1) = (op(0.0), op(1.0));
        let mut sums = vec![vec![Vec2::zeros(); self.piece_count]; nt];
        let mut counts = vec![0usize; self.piece_count];
        for (c, p) in self.cell_piece.iter().enumerate() {
            if let Some(p) = *p {
                counts[p] += 1;
                for k in 0..nt {
                    sums[k][p] += d[k][c];
                }
            }
        }
        let apply = |a: &DMatrix<f64>, v: &[Vec2]| -> Vec<Vec2> {
            (0..nt)
                .map(|r| (0..nt).fold(Vec2::zeros(), |acc, k| acc + a[(r, k)] * v[k]))
                .collect()
        };
        for c in 0..self.cells.len() {
            let here: Vec<Vec2> = (0..nt).map(|k| d[k][c]).collect();
            let out = match self.cell_piece[c] {
                Some(p) => {
                    let mean: Vec<Vec2> = (0..nt).map(|k| sums[k][p] / counts[p] as f64).collect();
                    let dev: Vec<Vec2> = here.iter().zip(&mean).map(|(a, b)| a - b).collect();
                    let m = apply(&a0, &mean);
                    let r = apply(&a1, &dev);
                    m.iter().zip(&r).map(|(a, b)| a + b).collect()
                }
                None => apply(&a0, &here),
            };
            for k in 0..nt {
                d[k][c] = out[k];
            }
        }
    }
}

fn record(iteration: usize, e: &Evaluation) -> IterRecord {
    IterRecord {
        iteration,
        total: e.total,
        masked_chamfer: e.components.masked_chamfer.value,
        rigidity: e.components.rigidity.value,
        temporal: e.components.temporal.value,
        smoothness: e.smoothness,
    }
}

/// Fit one field per prediction offset, starting from zero motion.
pub fn optimize(scene: &SceneBundle, sup: &SupervisionBundle, cfg: &OptimConfig) -> Result<OptimReport> {
    let start = Instant::now();
    let obj = Objective::new(scene, sup, cfg)?;
    let coupling = cfg
        .coupling
        .map(|c| (c.rigidity_gain * cfg.weights.lambda_pr, c.temporal_gain * cfg.weights.lambda_tc));
    let mut params = obj.zeros();
    let mut velocity = obj.zeros();
    let mut trajectory = Vec::new();
    let mut history: Vec<f64> = Vec::with_capacity(cfg.max_iters + 1);
    let mut lr = cfg.learning_rate;
    let mut converged = false;
    let mut iterations = 0;

    let mut eval = obj.evaluate(&params, true)?;
    let initial = eval.total;
    trajectory.push(record(0, &eval));
    history.push(eval.total);
    info!("optimizing {} cells x {} offsets, initial loss {initial:.6e}", obj.num_cells(), obj.offsets().len());

    if initial > 0.0 {
        for it in 1..=cfg.max_iters {
            if it > 1 && (it - 1) % cfg.lr_decay_every == 0 {
                lr *= cfg.lr_decay;
            }
            let grad = eval.cell_grad.as_ref().expect("gradient requested");
            let dir = obj.direction(grad, coupling);
            for ((p, d), v) in params.iter_mut().zip(&dir).zip(velocity.iter_mut()) {
                for ((a, b), m) in p.iter_mut().zip(d).zip(v.iter_mut()) {
                    *m = cfg.momentum * *m + lr * b;
                    *a -= *m;
                }
            }
            eval = obj.evaluate(&params, true)?;
            iterations = it;
            history.push(eval.total);
            if !eval.total.is_finite() || eval.total > 10.0 * initial {
                trajectory.push(record(it, &eval));
                let report = OptimReport {
                    iterations,
                    converged: false,
                    trajectory,
                    fields: obj.fields(&params),
                    wall_time_s: start.elapsed().as_secs_f64(),
                };
                return Err(Error::Diverged {
                    iteration: it,
                    loss: eval.total,
                    initial,
                    report: Box::new(report),
                });
            }
            if it % cfg.log_every == 0 {
                trajectory.push(record(it, &eval));
                debug!("iter {it}: loss {:.6e} lr {lr}", eval.total);
            }
            if it >= cfg.convergence_window {
                let prev = history[it - cfg.convergence_window];
                if (prev - eval.total).abs() <= cfg.convergence_tol * prev.abs().max(f64::MIN_POSITIVE) {
                    converged = true;
                    break;
                }
            }
        }
    } else {
        converged = true;
    }
    if trajectory.last().map(|r| r.iteration) != Some(iterations) {
        trajectory.push(record(iterations, &eval));
    }
    info!("stopped after {iterations} iterations, loss {:.6e}", eval.total);
    Ok(OptimReport {
        iterations,
        converged,
        trajectory,
        fields: obj.fields(&params),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
