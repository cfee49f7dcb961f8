//! Point clouds, meshes, normalization, nearest neighbours, sampling and
//! surface comparison metrics.

mod kdtree;
mod metrics;
mod sampling;

pub use kdtree::{brute_force_knn, brute_force_nearest, NearestIndex};
pub use metrics::{chamfer_l1, chamfer_l2, normal_consistency};
pub use sampling::{
    local_sigma, sample_gaussian_queries, sample_mesh_surface, sample_polylines,
};

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{invalid, Result};
use crate::Real;

/// Ordered positions in 2-D or 3-D (one point per row) with optional unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Array2<T>,
    normals: Option<Array2<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Array2<T>) -> Result<Self> {
        if points.nrows() == 0 {
            return invalid("point cloud is empty");
        }
        if !(2..=3).contains(&points.ncols()) {
            return invalid(format!("points must be 2-D or 3-D, got {}", points.ncols()));
        }
        if let Some(i) = points
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return invalid(format!("point {i} has a non-finite coordinate"));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Array2<T>, normals: Array2<T>) -> Result<Self> {
        let mut c = Self::new(points)?;
        if normals.dim() != c.points.dim() {
            return invalid("normals must match points in shape");
        }
        let tol = T::lit(1e-6);
        for (i, n) in normals.rows().into_iter().enumerate() {
            let len = n.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if !((len - T::one()).abs() <= tol) {
                return invalid(format!("normal {i} has length {len}"));
            }
        }
        c.normals = Some(normals);
        Ok(c)
    }

    pub fn from_rows(rows: &[[T; 3]]) -> Result<Self> {
        let flat: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((rows.len(), 3), flat).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    /// Never true for a constructed cloud; kept for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<T> {
        &self.points
    }

    pub fn normals(&self) -> Option<&Array2<T>> {
        self.normals.as_ref()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, T> {
        self.points.row(i)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn into_points(self) -> Array2<T> {
        self.points
    }

    /// Concatenates two clouds of equal dimension; normals are dropped unless
    /// both carry them.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return invalid("cannot concatenate clouds of different dimension");
        }
        let pts = ndarray::concatenate(Axis(0), &[self.points.view(), other.points.view()])
            .expect("same width");
        let normals = match (&self.normals, &other.normals) {
            (Some(a), Some(b)) => {
                Some(ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width"))
            }
            _ => None,
        };
        Ok(Self {
            points: pts,
            normals,
        })
    }
}

/// `x_normalized = (x - center) * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationTransform<T> {
    pub center: Vec<T>,
    pub scale: T,
}

impl<T: Real> NormalizationTransform<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![T::zero(); dim],
            scale: T::one(),
        }
    }

    pub fn apply(&self, points: &Array2<T>) -> Array2<T> {
        let mut out = points.clone();
        for mut row in out.rows_mut() {
            for (v, c) in row.iter_mut().zip(&self.center) {
                *v = (*v - *c) * self.scale;
            }
        }
        out
    }

    pub fn invert(&self, points: &Array2<T>) -> Array2<T> {
        let mut out = points.clone();
        for mut row in out.rows_mut() {
            for (v, c) in row.iter_mut().zip(&self.center) {
                *v = *v / self.scale + *c;
            }
        }
        out
    }

    pub fn apply_cloud(&self, cloud: &PointCloud<T>) -> PointCloud<T> {
        PointCloud {
            points: self.apply(&cloud.points),
            normals: cloud.normals.clone(),
        }
    }

    pub fn invert_cloud(&self, cloud: &PointCloud<T>) -> PointCloud<T> {
        PointCloud {
            points: self.invert(&cloud.points),
            normals: cloud.normals.clone(),
        }
    }
}

/// Centers the cloud at its centroid and scales it so the largest absolute
/// coordinate is 0.5.
pub fn normalize_cloud<T: Real>(
    cloud: &PointCloud<T>,
) -> Result<(PointCloud<T>, NormalizationTransform<T>)> {
    if cloud.is_empty() {
        return invalid("cannot normalize an empty cloud");
    }
    let center = cloud
        .points
        .mean_axis(Axis(0))
        .expect("non-empty")
        .to_vec();
    let max_abs = cloud
        .points
        .rows()
        .into_iter()
        .flat_map(|r| r.iter().zip(&center).map(|(v, c)| (*v - *c).abs()).collect::<Vec<_>>())
        .fold(T::zero(), T::max);
    let scale = if max_abs > T::zero() {
        T::lit(0.5) / max_abs
    } else {
        T::one()
    };
    let t = NormalizationTransform { center, scale };
    Ok((t.apply_cloud(cloud), t))
}

/// Triangles in 3-D.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh<T> {
    pub vertices: Vec<[T; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl<T: Real> TriangleMesh<T> {
    pub fn face_area(&self, f: usize) -> T {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        norm3(cross(sub3(b, a), sub3(c, a))) * T::lit(0.5)
    }

    /// Unit normal by right-hand rule on the vertex order; zero for degenerate faces.
    pub fn face_normal(&self, f: usize) -> [T; 3] {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        let n = cross(sub3(b, a), sub3(c, a));
        let len = norm3(n);
        if len > T::zero() {
            n.map(|v| v / len)
        } else {
            [T::zero(); 3]
        }
    }

    pub fn total_area(&self) -> T {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn is_consistent(&self) -> bool {
        self.faces.iter().flatten().all(|&i| i < self.vertices.len())
    }

    /// Drops faces whose area falls below `min_area`.
    pub fn drop_degenerate(&mut self, min_area: T) {
        let keep: Vec<bool> = (0..self.faces.len())
            .map(|f| self.face_area(f) >= min_area)
            .collect();
        let mut k = keep.iter();
        self.faces.retain(|_| *k.next().unwrap());
    }

    /// Number of edge-connected face components.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.faces {
            for k in 0..2 {
                let a = find(&mut parent, f[k]);
                let b = find(&mut parent, f[k + 1]);
                if a != b {
                    parent[a] = b;
                }
            }
        }
        let mut roots = std::collections::BTreeSet::new();
        for f in &self.faces {
            roots.insert(find(&mut parent, f[0]));
        }
        roots.len()
    }

    pub fn vertex_array(&self) -> Array2<T> {
        Array2::from_shape_fn((self.vertices.len(), 3), |(i, j)| self.vertices[i][j])
    }
}

/// Line segments in 2-D: the planar counterpart of [`TriangleMesh`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polylines<T> {
    pub vertices: Vec<[T; 2]>,
    pub segments: Vec<[usize; 2]>,
}

impl<T: Real> Polylines<T> {
    pub fn segment_length(&self, s: usize) -> T {
        let [a, b] = self.segments[s].map(|i| self.vertices[i]);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    }

    pub fn total_length(&self) -> T {
        (0..self.segments.len()).map(|s| self.segment_length(s)).sum()
    }

    /// Chains segments into vertex loops. Returns `(vertex indices, closed)` per chain.
    pub fn chains(&self) -> Vec<(Vec<usize>, bool)> {
        let n = self.vertices.len();
        let mut next = vec![usize::MAX; n];
        let mut has_prev = vec![false; n];
        for s in &self.segments {
            next[s[0]] = s[1];
            has_prev[s[1]] = true;
        }
        let mut used = vec![false; self.segments.len()];
        let mut seg_from = vec![usize::MAX; n];
        for (k, s) in self.segments.iter().enumerate() {
            seg_from[s[0]] = k;
        }
        let mut out = Vec::new();
        // start with open chains, then loops
        let starts: Vec<usize> = (0..n)
            .filter(|&v| seg_from[v] != usize::MAX && !has_prev[v])
            .chain((0..n).filter(|&v| seg_from[v] != usize::MAX))
            .collect();
        for start in starts {
            if seg_from[start] == usize::MAX || used[seg_from[start]] {
                continue;
            }
            let mut chain = vec![start];
            let mut v = start;
            let mut closed = false;
            while seg_from[v] != usize::MAX && !used[seg_from[v]] {
                used[seg_from[v]] = true;
                v = next[v];
                if v == start {
                    closed = true;
                    break;
                }
                chain.push(v);
            }
            out.push((chain, closed));
        }
        out
    }

    pub fn vertex_array(&self) -> Array2<T> {
        Array2::from_shape_fn((self.vertices.len(), 2), |(i, j)| self.vertices[i][j])
    }
}

pub(crate) fn sub3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3<T: Real>(a: [T; 3]) -> T {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
