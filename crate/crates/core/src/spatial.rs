//! Static 3D k-d tree for nearest-neighbor and k-nearest queries.
//!
//! Ties on distance are broken by the smaller point index, so query results
//! are a pure function of the input order.

use crate::grid::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
struct Node {
    // children are implicit: [lo, mid) and [mid + 1, hi) of `order`
    axis: u8,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Point indices arranged so that every subrange `[lo, hi)` is a subtree
    /// whose root sits at `(lo + hi) / 2`.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// A candidate neighbor ordered by `(dist2, index)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn before(&self, other: &Neighbor) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = vec![Node { axis: 0 }; points.len()];
        build(&points, &mut order, &mut nodes, 0);
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Closest point to `q`, or `None` for an empty tree.
    pub fn nearest(&self, q: &Point3) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        self.nearest_in(&q, 0, self.points.len(), &mut best);
        Some(best)
    }

    /// The `k` closest points to `q` sorted by distance, excluding the point
    /// with index `skip` if given.
    pub fn k_nearest(&self, q: &Point3, k: usize, skip: Option<usize>) -> Vec<Neighbor> {
        let q = [q.x, q.y, q.z];
        let mut found: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(&q, 0, self.points.len(), k, skip, &mut found);
        }
        found
    }

    fn dist2(&self, q: &[f64; 3], i: usize) -> f64 {
        let p = &self.points[i];
        let (dx, dy, dz) = (q[0] - p[0], q[1] - p[1], q[2] - p[2]);
        dx * dx + dy * dy + dz * dz
    }

    fn nearest_in(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut Neighbor) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let cand = Neighbor {
                    index: i,
                    dist2: self.dist2(q, i),
                };
                if cand.before(best) {
                    *best = cand;
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let axis = self.nodes[mid].axis as usize;
        let cand = Neighbor {
            index: i,
            dist2: self.dist2(q, i),
        };
        if cand.before(best) {
            *best = cand;
        }
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(q, near.0, near.1, best);
        // `<=` keeps equal-distance points on the far side reachable for the
        // index tie-break.
        if diff * diff <= best.dist2 {
            self.nearest_in(q, far.0, far.1, best);
        }
    }

    fn offer(found: &mut Vec<Neighbor>, k: usize, cand: Neighbor) {
        if found.len() == k && !cand.before(&found[k - 1]) {
            return;
        }
        let pos = found.partition_point(|n| n.before(&cand));
        found.insert(pos, cand);
        found.truncate(k);
    }

    fn knn_in(&self, q: &[f64; 3], lo: usize, hi: usize, k: usize, skip: Option<usize>, found: &mut Vec<Neighbor>) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                if Some(i) != skip {
                    Self::offer(found, k, Neighbor { index: i, dist2: self.dist2(q, i) });
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let axis = self.nodes[mid].axis as usize;
        if Some(i) != skip {
            Self::offer(found, k, Neighbor { index: i, dist2: self.dist2(q, i) });
        }
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_in(q, near.0, near.1, k, skip, found);
        if found.len() < k || diff * diff <= found[k - 1].dist2 {
            self.knn_in(q, far.0, far.1, k, skip, found);
        }
    }
}

fn build(points: &[[f64; 3]], order: &mut [usize], nodes: &mut [Node], offset: usize) {
    let n = order.len();
    if n <= LEAF_SIZE {
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap_or(0);
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    nodes[offset + mid].axis = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    build(points, left, nodes, offset);
    build(points, &mut rest[1..], nodes, offset + mid + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_knn(pts: &[Point3], q: &Point3, k: usize, skip: Option<usize>) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = pts
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, p)| Neighbor {
                index: i,
                dist2: (p - q).norm_squared(),
            })
            .collect();
        all.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
        all.truncate(k);
        all
    }

    #[test]
    fn empty_tree() {
        let t = KdTree::new(&[]);
        assert!(t.nearest(&Point3::origin()).is_none());
        assert!(t.k_nearest(&Point3::origin(), 3, None).is_empty());
    }

    #[test]
    fn duplicate_points_break_ties_by_index() {
        let pts: Vec<Point3> = (0..100).map(|i| Point3::new((i % 3) as f64, 0.0, 0.0)).collect();
        let t = KdTree::new(&pts);
        let nn = t.nearest(&Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(nn.index, 1);
        let knn = t.k_nearest(&Point3::new(0.0, 0.0, 0.0), 4, Some(0));
        let idx: Vec<usize> = knn.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![3, 6, 9, 12]);
    }

    fn cloud() -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64), 1..120)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect())
    }

    proptest! {
        #[test]
        fn nearest_matches_brute_force(pts in cloud(), q in (-6.0..6.0f64, -6.0..6.0f64, -2.0..2.0f64)) {
            let q = Point3::new(q.0, q.1, q.2);
            let t = KdTree::new(&pts);
            let got = t.nearest(&q).unwrap();
            let want = brute_knn(&pts, &q, 1, None)[0];
            prop_assert_eq!(got, want);
        }

        #[test]
        fn knn_matches_brute_force(pts in cloud(), k in 1usize..10, pick in 0usize..1000) {
            let t = KdTree::new(&pts);
            let s = pick % pts.len();
            let got = t.k_nearest(&pts[s], k, Some(s));
            let want = brute_knn(&pts, &pts[s], k, Some(s));
            prop_assert_eq!(got, want);
        }

        #[test]
        fn quantized_grid_with_many_ties(raw in prop::collection::vec((0i32..4, 0i32..4, 0i32..2), 1..200), q in (0i32..4, 0i32..4, 0i32..2)) {
            let pts: Vec<Point3> = raw.iter().map(|&(x, y, z)| Point3::new(x as f64, y as f64, z as f64)).collect();
            let q = Point3::new(q.0 as f64, q.1 as f64, q.2 as f64);
            let t = KdTree::new(&pts);
            prop_assert_eq!(t.k_nearest(&q, 5, None), brute_knn(&pts, &q, 5, None));
        }
    }
}
