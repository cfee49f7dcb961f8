//! Exact nearest-neighbour search.
//!
//! Ties are always broken towards the lowest target index, so results are
//! identical to a linear scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView1};

use crate::error::{invalid, Result};
use crate::Real;

const LEAF_SIZE: usize = 12;
/// Below this many targets a linear scan is used instead of a tree.
pub const BRUTE_FORCE_BELOW: usize = 512;

fn sq_dist<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        s += d * d;
    }
    s
}

/// `(squared distance, index)` ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand<T>(T, usize);

impl<T: Real> Eq for Cand<T> {}

impl<T: Real> PartialOrd for Cand<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Cand<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .partial_cmp(&other.0)
            .unwrap_or(Ordering::Equal)
            .then(self.1.cmp(&other.1))
    }
}

#[derive(Debug, Clone)]
enum KdNode<T> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: T, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct KdTree<T> {
    nodes: Vec<KdNode<T>>,
    order: Vec<usize>,
}

impl<T: Real> KdTree<T> {
    fn build(points: &Array2<T>) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..points.nrows()).collect(),
        };
        let n = points.nrows();
        tree.build_node(points, 0, n);
        tree
    }

    fn build_node(&mut self, points: &Array2<T>, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let dim = points.ncols();
        let mut best_axis = 0;
        let mut best_spread = -T::one();
        for axis in 0..dim {
            let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
            for &i in &self.order[start..end] {
                let v = points[[i, axis]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_axis = axis;
            }
        }
        let mid = start + (end - start) / 2;
        let axis = best_axis;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[[a, axis]]
                .partial_cmp(&points[[b, axis]])
                .unwrap_or(Ordering::Equal)
        });
        let value = points[[self.order[mid], axis]];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(points, start, mid);
        let right = self.build_node(points, mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Keeps the `k` best candidates in a max-heap.
    fn search(
        &self,
        points: &Array2<T>,
        q: ArrayView1<T>,
        node: usize,
        k: usize,
        heap: &mut BinaryHeap<Cand<T>>,
    ) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Cand(sq_dist(q, points.row(i)), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(points, q, near, k, heap);
                // equal-distance candidates on the far side may carry lower indices
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.search(points, q, far, k, heap);
                }
            }
        }
    }
}

/// Immutable exact nearest-neighbour index over a fixed target set.
#[derive(Debug, Clone)]
pub struct NearestIndex<T> {
    points: Array2<T>,
    tree: Option<KdTree<T>>,
}

impl<T: Real> NearestIndex<T> {
    pub fn new(points: Array2<T>) -> Result<Self> {
        if points.nrows() == 0 {
            return invalid("nearest-neighbour targets are empty");
        }
        let tree = (points.nrows() >= BRUTE_FORCE_BELOW).then(|| KdTree::build(&points));
        Ok(Self { points, tree })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn points(&self) -> &Array2<T> {
        &self.points
    }

    /// `k` nearest targets as `(index, squared distance)`, closest first.
    pub fn knn_sq(&self, q: ArrayView1<T>, k: usize) -> Vec<(usize, T)> {
        let k = k.min(self.len());
        let mut heap = BinaryHeap::with_capacity(k + 1);
        match &self.tree {
            Some(t) => t.search(&self.points, q, 0, k, &mut heap),
            None => {
                for i in 0..self.len() {
                    let c = Cand(sq_dist(q, self.points.row(i)), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
        }
        heap.into_sorted_vec().into_iter().map(|c| (c.1, c.0)).collect()
    }

    /// Nearest target as `(index, squared distance)`.
    pub fn nearest_sq(&self, q: ArrayView1<T>) -> (usize, T) {
        self.knn_sq(q, 1)[0]
    }

    /// Nearest target of every query row as `(index, distance)`.
    pub fn nearest_all(&self, queries: &Array2<T>) -> Vec<(usize, T)> {
        queries
            .rows()
            .into_iter()
            .map(|q| {
                let (i, d2) = self.nearest_sq(q);
                (i, d2.sqrt())
            })
            .collect()
    }
}

/// Exhaustive scan with the same tie rule; reference for tests.
pub fn brute_force_nearest<T: Real>(queries: &Array2<T>, targets: &Array2<T>) -> Vec<(usize, T)> {
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = (usize::MAX, T::infinity());
            for (i, t) in targets.rows().into_iter().enumerate() {
                let d = sq_dist(q, t);
                if d < best.1 {
                    best = (i, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

/// Exhaustive `k`-nearest scan: `(index, squared distance)` sorted by distance then index.
pub fn brute_force_knn<T: Real>(q: ArrayView1<T>, targets: &Array2<T>, k: usize) -> Vec<(usize, T)> {
    let mut all: Vec<(usize, T)> = targets
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (i, sq_dist(q, t)))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
