//! Exact nearest-neighbor and radius queries over standardized feature
//! space: the pooling primitive for local calibration.
//!
//! The index is a kd-tree with a brute-force fallback path; both paths
//! share one distance kernel and one tie rule (distance, then row index),
//! so their results are identical, not merely close. Radius queries follow
//! the diameter convention: `within_radius(x, xi)` returns points inside
//! the ball of diameter `xi` centered at `x`, i.e. within distance `xi/2`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How calibration points are selected around a query context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PoolingSpec {
    /// Ball of diameter `xi` centered at the query.
    Radius { xi: f64 },
    /// The `m` nearest points.
    Count { m: usize },
    /// Every available point (the global correction).
    All,
}

impl PoolingSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PoolingSpec::Radius { xi } if !(xi > 0.0) => Err(Error::InvalidParameter(format!(
                "pooling diameter must be positive, got {xi}"
            ))),
            PoolingSpec::Count { m: 0 } => Err(Error::InvalidParameter(
                "pooling count must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Ordering key used to break selection ties toward tighter pooling.
    pub(crate) fn tightness(&self) -> f64 {
        match *self {
            PoolingSpec::Radius { xi } => xi,
            PoolingSpec::Count { m } => m as f64,
            PoolingSpec::All => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for PoolingSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolingSpec::Radius { xi } => write!(f, "xi={xi}"),
            PoolingSpec::Count { m } => write!(f, "m={m}"),
            PoolingSpec::All => write!(f, "all"),
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Inner {
        axis: usize,
        split: f64,
        left: usize,
        right: usize,
    },
}

const LEAF_SIZE: usize = 8;

/// Immutable spatial index over a point set.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<f64>, // row-major
    d: usize,
    n: usize,
    perm: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

#[inline]
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// Candidate ordered worst-first: larger distance, then larger index.
#[derive(PartialEq)]
struct Cand {
    d2: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NeighborIndex {
    /// Builds the index over the given rows. Construction is deterministic.
    pub fn build(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter(
                "neighbor index needs at least one point".into(),
            ));
        }
        let d = rows[0].len();
        let mut points = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            let _ = i;
            points.extend_from_slice(r);
        }
        Ok(Self::from_flat(points, d))
    }

    /// Builds from a row-major buffer of `n = points.len() / d` rows.
    pub fn from_flat(points: Vec<f64>, d: usize) -> Self {
        assert!(d >= 1 && !points.is_empty() && points.len().is_multiple_of(d));
        let n = points.len() / d;
        let mut index = Self {
            points,
            d,
            n,
            perm: (0..n).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        index.root = index.build_node(0, n);
        index
    }

    fn coord(&self, row: usize, axis: usize) -> f64 {
        self.points[row * self.d + axis]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        // axis of maximum spread, ties to the lower axis
        let mut best_axis = 0;
        let mut best_spread = f64::NEG_INFINITY;
        for axis in 0..self.d {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &row in &self.perm[start..end] {
                let v = self.coord(row, axis);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let spread = hi - lo;
            if spread > best_spread {
                best_spread = spread;
                best_axis = axis;
            }
        }
        let axis = best_axis;
        let (pts, d) = (&self.points, self.d);
        self.perm[start..end].sort_unstable_by(|&a, &b| {
            pts[a * d + axis]
                .total_cmp(&pts[b * d + axis])
                .then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        let split = self.coord(self.perm[mid], axis);
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes.push(Node::Inner {
            axis,
            split,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, row: usize) -> &[f64] {
        &self.points[row * self.d..(row + 1) * self.d]
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// The `m` nearest rows, sorted by (distance, row index) ascending.
    pub fn k_nearest(&self, x: &[f64], m: usize) -> Result<Vec<usize>> {
        self.check_query(x)?;
        if m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        if m > self.n {
            return Err(Error::PoolingCountTooLarge {
                m,
                available: self.n,
            });
        }
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(m + 1);
        self.knn_node(self.root, x, m, &mut heap);
        let mut out: Vec<Cand> = heap.into_vec();
        out.sort_unstable_by(|a, b| a.d2.total_cmp(&b.d2).then(a.idx.cmp(&b.idx)));
        Ok(out.into_iter().map(|c| c.idx).collect())
    }

    fn knn_node(&self, node: usize, x: &[f64], m: usize, heap: &mut BinaryHeap<Cand>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &row in &self.perm[start..end] {
                    let d2 = dist_sq(self.point(row), x);
                    let cand = Cand { d2, idx: row };
                    if heap.len() < m {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Inner {
                axis,
                split,
                left,
                right,
            } => {
                let diff = x[axis] - split;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_node(near, x, m, heap);
                // Visit the far side unless every point there is strictly
                // worse than the current worst candidate; equality must be
                // visited because lower row indices win distance ties.
                let visit = heap.len() < m || diff * diff <= heap.peek().unwrap().d2;
                if visit {
                    self.knn_node(far, x, m, heap);
                }
            }
        }
    }

    /// All rows inside the ball of diameter `xi` centered at `x`, sorted by
    /// (distance, row index). May be empty.
    pub fn within_radius(&self, x: &[f64], xi: f64) -> Result<Vec<usize>> {
        self.check_query(x)?;
        if !(xi > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diameter must be positive, got {xi}"
            )));
        }
        let r = xi * 0.5;
        let r2 = r * r;
        let mut out: Vec<Cand> = Vec::new();
        self.radius_node(self.root, x, r2, &mut out);
        out.sort_unstable_by(|a, b| a.d2.total_cmp(&b.d2).then(a.idx.cmp(&b.idx)));
        Ok(out.into_iter().map(|c| c.idx).collect())
    }

    fn radius_node(&self, node: usize, x: &[f64], r2: f64, out: &mut Vec<Cand>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &row in &self.perm[start..end] {
                    let d2 = dist_sq(self.point(row), x);
                    if d2 <= r2 {
                        out.push(Cand { d2, idx: row });
                    }
                }
            }
            Node::Inner {
                axis,
                split,
                left,
                right,
            } => {
                let diff = x[axis] - split;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.radius_node(near, x, r2, out);
                if diff * diff <= r2 {
                    self.radius_node(far, x, r2, out);
                }
            }
        }
    }

    /// Brute-force twin of [`k_nearest`](Self::k_nearest); the oracle path.
    pub fn brute_k_nearest(&self, x: &[f64], m: usize) -> Result<Vec<usize>> {
        self.check_query(x)?;
        if m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        if m > self.n {
            return Err(Error::PoolingCountTooLarge {
                m,
                available: self.n,
            });
        }
        let mut all: Vec<Cand> = (0..self.n)
            .map(|row| Cand {
                d2: dist_sq(self.point(row), x),
                idx: row,
            })
            .collect();
        all.sort_unstable_by(|a, b| a.d2.total_cmp(&b.d2).then(a.idx.cmp(&b.idx)));
        Ok(all.into_iter().take(m).map(|c| c.idx).collect())
    }

    /// Brute-force twin of [`within_radius`](Self::within_radius).
    pub fn brute_within_radius(&self, x: &[f64], xi: f64) -> Result<Vec<usize>> {
        self.check_query(x)?;
        if !(xi > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diameter must be positive, got {xi}"
            )));
        }
        let r = xi * 0.5;
        let r2 = r * r;
        let mut hits: Vec<Cand> = (0..self.n)
            .filter_map(|row| {
                let d2 = dist_sq(self.point(row), x);
                (d2 <= r2).then_some(Cand { d2, idx: row })
            })
            .collect();
        hits.sort_unstable_by(|a, b| a.d2.total_cmp(&b.d2).then(a.idx.cmp(&b.idx)));
        Ok(hits.into_iter().map(|c| c.idx).collect())
    }
}

/// Convenience wrapper matching the operation-style API.
pub fn build_index(rows: &[Vec<f64>]) -> Result<NeighborIndex> {
    NeighborIndex::build(rows)
}

/// Euclidean distance between two points of equal dimension.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}
