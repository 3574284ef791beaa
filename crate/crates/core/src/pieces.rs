//! Rigid pieces: superpixels of the flow image carried onto the point cloud,
//! cleaned of occlusion bleed-through and fused across each BEV column.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{BevGridSpec, PointCloud};
use crate::projection::{project, CalibratedCamera, FlowImage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation2D {
    pub camera_id: usize,
    pub width: u32,
    pub height: u32,
    /// Row-major superpixel ids in `0..count`.
    pub labels: Vec<i32>,
    pub count: usize,
}

impl Segmentation2D {
    pub fn at(&self, col: usize, row: usize) -> i32 {
        self.labels[row * self.width as usize + col]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RigidPieces {
    pub frame_index: i32,
    /// Piece id per point, `-1` when unassigned.
    pub labels: Vec<i32>,
    pub piece_count: usize,
}

impl RigidPieces {
    pub fn unassigned(frame_index: i32, n: usize) -> Self {
        Self {
            frame_index,
            labels: vec![-1; n],
            piece_count: 0,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.piece_count];
        for &l in &self.labels {
            if l >= 0 {
                s[l as usize] += 1;
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PieceParams {
    pub superpixel_count: usize,
    pub compactness: f64,
    /// Multiplier on the flow channels of the clustering features.
    pub flow_gain: f64,
    pub slic_iters: usize,
    /// Meters beyond the closest member at which a point counts as occluded.
    pub delta_d: f64,
    pub min_piece_points: usize,
    /// Points below this height get no piece label.
    pub ground_z: Option<f64>,
}

impl Default for PieceParams {
    fn default() -> Self {
        Self {
            superpixel_count: 400,
            compactness: 10.0,
            flow_gain: 4.0,
            slic_iters: 10,
            delta_d: 0.5,
            min_piece_points: 5,
            ground_z: Some(-1.4),
        }
    }
}

impl PieceParams {
    pub fn validate(&self) -> Result<()> {
        if self.superpixel_count == 0 {
            return Err(Error::invalid("superpixel count must be at least 1"));
        }
        if !(self.delta_d > 0.0) || !(self.compactness > 0.0) || !(self.flow_gain >= 0.0) {
            return Err(Error::invalid(format!("bad piece parameters {self:?}")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Over-segmentation

#[derive(Debug, Clone, Copy, Default)]
struct Center {
    u: f64,
    v: f64,
    du: f64,
    dv: f64,
}

/// SLIC clustering of the flow image in (u, v, gain*du, gain*dv), followed by
/// connectivity enforcement and compact relabelling.
pub fn oversegment(flow: &FlowImage, params: &PieceParams) -> Result<Segmentation2D> {
    params.validate()?;
    let (w, h) = (flow.width as usize, flow.height as usize);
    let k = params.superpixel_count;
    if k > w * h {
        return Err(Error::invalid(format!("{k} superpixels requested for a {w}x{h} image")));
    }
    if flow.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("flow image contains non-finite values"));
    }
    let s = ((w * h) as f64 / k as f64).sqrt();
    let nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let ny = ((h as f64 / s).round() as usize).clamp(1, h);
    let gain = params.flow_gain;
    let feat = |col: usize, row: usize| {
        let f = flow.at(col, row);
        (gain * f.x, gain * f.y)
    };

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let u = (((i as f64 + 0.5) * w as f64 / nx as f64) - 0.5).round().clamp(0.0, (w - 1) as f64);
            let v = (((j as f64 + 0.5) * h as f64 / ny as f64) - 0.5).round().clamp(0.0, (h - 1) as f64);
            let (du, dv) = feat(u as usize, v as usize);
            centers.push(Center { u, v, du, dv });
        }
    }
    // Start from the regular grid cells so pixels outside every window keep a
    // sensible label.
    let mut labels: Vec<i32> = (0..w * h)
        .map(|idx| {
            let (col, row) = (idx % w, idx / w);
            let i = (col * nx / w).min(nx - 1);
            let j = (row * ny / h).min(ny - 1);
            (j * nx + i) as i32
        })
        .collect();

    let spatial_w = (params.compactness / s).powi(2);
    for _ in 0..params.slic_iters {
        labels
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(row, out)| {
                let near: Vec<usize> = (0..centers.len())
                    .filter(|&c| (centers[c].v - row as f64).abs() <= s)
                    .collect();
                for (col, lab) in out.iter_mut().enumerate() {
                    let (du, dv) = feat(col, row);
                    let mut best = (f64::INFINITY, -1i32);
                    for &c in &near {
                        let ctr = &centers[c];
                        let dx = ctr.u - col as f64;
                        if dx.abs() > s {
                            continue;
                        }
                        let dy = ctr.v - row as f64;
                        let df = (ctr.du - du).powi(2) + (ctr.dv - dv).powi(2);
                        let d = df + spatial_w * (dx * dx + dy * dy);
                        if d < best.0 {
                            best = (d, c as i32);
                        }
                    }
                    if best.1 >= 0 {
                        *lab = best.1;
                    }
                }
            });
        let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            let (col, row) = (idx % w, idx / w);
            let (du, dv) = feat(col, row);
            let a = &mut acc[l as usize];
            a.0 += col as f64;
            a.1 += row as f64;
            a.2 += du;
            a.3 += dv;
            a.4 += 1;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.4 > 0 {
                let n = a.4 as f64;
                *c = Center {
                    u: a.0 / n,
                    v: a.1 / n,
                    du: a.2 / n,
                    dv: a.3 / n,
                };
            }
        }
    }
    let (labels, count) = enforce_connectivity(&labels, w, h);
    Ok(Segmentation2D {
        camera_id: flow.camera_id,
        width: flow.width,
        height: flow.height,
        labels,
        count,
    })
}

/// 4-connected components of equal labels: `(component id per pixel, size
/// per component, label per component)`.
fn components(labels: &[i32], w: usize, h: usize) -> (Vec<usize>, Vec<usize>, Vec<i32>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut sizes = Vec::new();
    let mut comp_label = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let l = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (col, row) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == l {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if col > 0 {
                visit(p - 1);
            }
            if col + 1 < w {
                visit(p + 1);
            }
            if row > 0 {
                visit(p - w);
            }
            if row + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
        comp_label.push(l);
    }
    (comp, sizes, comp_label)
}

/// Give every label a single connected region, then renumber labels in
/// row-major order of first appearance.
fn enforce_connectivity(labels: &[i32], w: usize, h: usize) -> (Vec<i32>, usize) {
    let mut labels = labels.to_vec();
    for _ in 0..8 {
        let (comp, sizes, comp_label) = components(&labels, w, h);
        let max_label = comp_label.iter().copied().max().unwrap_or(0).max(0) as usize;
        let mut keep = vec![usize::MAX; max_label + 1];
        for (c, &l) in comp_label.iter().enumerate() {
            let cur = keep[l as usize];
            if cur == usize::MAX || sizes[c] > sizes[cur] {
                keep[l as usize] = c;
            }
        }
        let fragments: Vec<usize> = (0..sizes.len()).filter(|&c| keep[comp_label[c] as usize] != c).collect();
        if fragments.is_empty() {
            break;
        }
        // Largest adjacent component of each fragment.
        let mut best: Vec<Option<usize>> = vec![None; sizes.len()];
        for p in 0..labels.len() {
            let c = comp[p];
            if keep[comp_label[c] as usize] == c {
                continue;
            }
            let (col, row) = (p % w, p / w);
            let mut nbrs = [usize::MAX; 4];
            if col > 0 {
                nbrs[0] = comp[p - 1];
            }
            if col + 1 < w {
                nbrs[1] = comp[p + 1];
            }
            if row > 0 {
                nbrs[2] = comp[p - w];
            }
            if row + 1 < h {
                nbrs[3] = comp[p + w];
            }
            for &q in nbrs.iter().filter(|&&q| q != usize::MAX && q != c) {
                let better = match best[c] {
                    None => true,
                    Some(b) => sizes[q] > sizes[b] || (sizes[q] == sizes[b] && q < b),
                };
                if better {
                    best[c] = Some(q);
                }
            }
        }
        let mut next_label = max_label as i32 + 1;
        let new_label: Vec<i32> = (0..sizes.len())
            .map(|c| {
                if keep[comp_label[c] as usize] == c {
                    comp_label[c]
                } else {
                    match best[c] {
                        Some(q) => comp_label[q],
                        None => {
                            next_label += 1;
                            next_label - 1
                        }
                    }
                }
            })
            .collect();
        for p in 0..labels.len() {
            labels[p] = new_label[comp[p]];
        }
    }
    // Whatever is still split becomes separate labels.
    let (comp, _, _) = components(&labels, w, h);
    let mut remap = vec![-1i32; comp.iter().copied().max().map_or(0, |m| m + 1)];
    let mut count = 0usize;
    let out = comp
        .iter()
        .map(|&c| {
            if remap[c] < 0 {
                remap[c] = count as i32;
                count += 1;
            }
            remap[c]
        })
        .collect();
    (out, count)
}

// ---------------------------------------------------------------------------
// Point labelling, occlusion filtering and fusion

/// Raw per-point superpixel labels and the camera each was taken from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointLabels {
    pub labels: Vec<i32>,
    /// Index into the camera list, `None` for unlabelled points.
    pub source: Vec<Option<usize>>,
}

/// Each point takes the superpixel under its projection in the first camera
/// that sees it; ids are offset per camera so they are globally unique.
pub fn label_points(
    cloud: &PointCloud,
    segs: &[Segmentation2D],
    cams: &[&CalibratedCamera],
    params: &PieceParams,
) -> Result<PointLabels> {
    if segs.len() != cams.len() {
        return Err(Error::LengthMismatch {
            what: "segmentations vs cameras",
            left: segs.len(),
            right: cams.len(),
        });
    }
    for (s, c) in segs.iter().zip(cams) {
        if s.width != c.width || s.height != c.height {
            return Err(Error::invalid(format!(
                "segmentation for camera {} does not match its image size",
                s.camera_id
            )));
        }
    }
    let mut offsets = Vec::with_capacity(segs.len());
    let mut acc = 0i64;
    for s in segs {
        offsets.push(acc);
        acc += s.count as i64;
    }
    if acc > i32::MAX as i64 {
        return Err(Error::invalid("too many superpixels"));
    }
    let (labels, source) = cloud
        .points
        .par_iter()
        .map(|p| {
            if params.ground_z.is_some_and(|g| p.z < g) {
                return (-1, None);
            }
            for (k, (seg, cam)) in segs.iter().zip(cams).enumerate() {
                if let Some(pr) = project(p, cam) {
                    let col = (pr.u.round() as usize).min(seg.width as usize - 1);
                    let row = (pr.v.round() as usize).min(seg.height as usize - 1);
                    return ((offsets[k] + seg.at(col, row) as i64) as i32, Some(k));
                }
            }
            (-1, None)
        })
        .unzip();
    Ok(PointLabels { labels, source })
}

/// Drop points farther than `d_min + delta_d` from their labelling camera,
/// where `d_min` is the closest member of the same superpixel.
pub fn occlusion_filter(cloud: &PointCloud, raw: &PointLabels, cams: &[&CalibratedCamera], delta_d: f64) -> Result<PointLabels> {
    if raw.labels.len() != cloud.len() || raw.source.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "labels vs cloud",
            left: raw.labels.len(),
            right: cloud.len(),
        });
    }
    let centers = cams
        .iter()
        .map(|c| {
            c.center()
                .ok_or_else(|| Error::invalid(format!("camera {} has a singular projection", c.camera_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let dist: Vec<f64> = cloud
        .points
        .iter()
        .zip(&raw.source)
        .map(|(p, s)| s.map_or(f64::NAN, |k| (p - centers[k]).norm()))
        .collect();
    let n_labels = raw.labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(0) as usize;
    let mut d_min = vec![f64::INFINITY; n_labels];
    for (&l, &d) in raw.labels.iter().zip(&dist) {
        if l >= 0 {
            d_min[l as usize] = d_min[l as usize].min(d);
        }
    }
    let mut out = raw.clone();
    for i in 0..cloud.len() {
        let l = out.labels[i];
        if l >= 0 && dist[i] > d_min[l as usize] + delta_d {
            out.labels[i] = -1;
            out.source[i] = None;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Merge labels that share a BEV cell, renumber in point order, and drop
/// pieces with fewer than `min_piece_points` members.
pub fn fuse_by_height(cloud: &PointCloud, labels: &[i32], spec: &BevGridSpec, min_piece_points: usize) -> Result<RigidPieces> {
    if labels.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "labels vs cloud",
            left: labels.len(),
            right: cloud.len(),
        });
    }
    let n_labels = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(0) as usize;
    let mut uf = UnionFind::new(n_labels);
    let mut first_in_cell: Vec<i32> = vec![-1; spec.num_cells()];
    for (p, &l) in cloud.points.iter().zip(labels) {
        if l < 0 {
            continue;
        }
        if let Some(c) = spec.cell_index(p) {
            match first_in_cell[c] {
                -1 => first_in_cell[c] = l,
                other => {
                    uf.union(other as usize, l as usize);
                }
            }
        }
    }
    let roots: Vec<i32> = labels
        .iter()
        .map(|&l| if l < 0 { -1 } else { uf.find(l as usize) as i32 })
        .collect();
    let mut sizes = vec![0usize; n_labels];
    for &r in &roots {
        if r >= 0 {
            sizes[r as usize] += 1;
        }
    }
    let mut remap = vec![-1i32; n_labels];
    let mut count = 0usize;
    let labels = roots
        .iter()
        .map(|&r| {
            if r < 0 || sizes[r as usize] < min_piece_points {
                return -1;
            }
            if remap[r as usize] < 0 {
                remap[r as usize] = count as i32;
                count += 1;
            }
            remap[r as usize]
        })
        .collect();
    Ok(RigidPieces {
        frame_index: cloud.frame_index,
        labels,
        piece_count: count,
    })
}

/// Over-segment each camera's flow, label the cloud, filter occlusions and
/// fuse by BEV cell.
pub fn build_pieces(
    cloud: &PointCloud,
    flows: &[&FlowImage],
    cams: &[&CalibratedCamera],
    params: &PieceParams,
    spec: &BevGridSpec,
) -> Result<RigidPieces> {
    params.validate()?;
    let segs = flows
        .par_iter()
        .map(|f| oversegment(f, params))
        .collect::<Result<Vec<_>>>()?;
    let raw = label_points(cloud, &segs, cams, params)?;
    let filtered = occlusion_filter(cloud, &raw, cams, params.delta_d)?;
    fuse_by_height(cloud, &filtered.labels, spec, params.min_piece_points)
}
