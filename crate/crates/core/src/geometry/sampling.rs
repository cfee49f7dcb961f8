use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NearestIndex, PointCloud, Polylines, TriangleMesh};
use crate::error::{invalid, Result};
use crate::Real;

fn pick_weighted<T: Real, R: Rng>(cdf: &[T], rng: &mut R) -> usize {
    let total = *cdf.last().unwrap();
    let u = T::lit(rng.random::<f64>()) * total;
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative<T: Real>(weights: impl Iterator<Item = T>) -> Vec<T> {
    let mut acc = T::zero();
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Area-uniform samples on a triangle mesh, optionally with face normals.
pub fn sample_mesh_surface<T: Real, R: Rng>(
    mesh: &TriangleMesh<T>,
    n: usize,
    with_normals: bool,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    if n == 0 {
        return invalid("sample count must be positive");
    }
    let cdf = cumulative((0..mesh.faces.len()).map(|f| mesh.face_area(f)));
    if cdf.last().is_none_or(|a| *a <= T::zero()) {
        return invalid("mesh has zero total area");
    }
    let mut pts = Array2::zeros((n, 3));
    let mut nrm = Array2::zeros((n, 3));
    for k in 0..n {
        let f = pick_weighted(&cdf, rng);
        let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let (u, v) = (T::lit(u), T::lit(v));
        for d in 0..3 {
            pts[[k, d]] = a[d] + u * (b[d] - a[d]) + v * (c[d] - a[d]);
        }
        if with_normals {
            let fnrm = mesh.face_normal(f);
            for d in 0..3 {
                nrm[[k, d]] = fnrm[d];
            }
        }
    }
    if with_normals {
        PointCloud::with_normals(pts, nrm)
    } else {
        PointCloud::new(pts)
    }
}

/// Length-uniform samples on 2-D segments; normals are the segment normals.
pub fn sample_polylines<T: Real, R: Rng>(
    lines: &Polylines<T>,
    n: usize,
    with_normals: bool,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    if n == 0 {
        return invalid("sample count must be positive");
    }
    let cdf = cumulative((0..lines.segments.len()).map(|s| lines.segment_length(s)));
    if cdf.last().is_none_or(|a| *a <= T::zero()) {
        return invalid("polylines have zero total length");
    }
    let mut pts = Array2::zeros((n, 2));
    let mut nrm = Array2::zeros((n, 2));
    for k in 0..n {
        let s = pick_weighted(&cdf, rng);
        let [a, b] = lines.segments[s].map(|i| lines.vertices[i]);
        let t = T::lit(rng.random::<f64>());
        pts[[k, 0]] = a[0] + t * (b[0] - a[0]);
        pts[[k, 1]] = a[1] + t * (b[1] - a[1]);
        let len = lines.segment_length(s);
        nrm[[k, 0]] = (b[1] - a[1]) / len;
        nrm[[k, 1]] = -(b[0] - a[0]) / len;
    }
    if with_normals {
        PointCloud::with_normals(pts, nrm)
    } else {
        PointCloud::new(pts)
    }
}

/// `per_anchor` isotropic Gaussian draws around each anchor with its own sigma.
pub fn sample_gaussian_queries<T: Real, R: Rng>(
    anchors: &PointCloud<T>,
    sigmas: &[T],
    per_anchor: usize,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    if sigmas.len() != anchors.len() {
        return invalid(format!(
            "{} sigmas for {} anchors",
            sigmas.len(),
            anchors.len()
        ));
    }
    if let Some(i) = sigmas.iter().position(|s| !(*s > T::zero())) {
        return invalid(format!("sigma {i} is not positive"));
    }
    if per_anchor == 0 {
        return invalid("per-anchor count must be positive");
    }
    let dim = anchors.dim();
    let mut out = Array2::zeros((anchors.len() * per_anchor, dim));
    let mut row = 0;
    for (i, a) in anchors.points().rows().into_iter().enumerate() {
        for _ in 0..per_anchor {
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                out[[row, d]] = a[d] + sigmas[i] * T::lit(z);
            }
            row += 1;
        }
    }
    PointCloud::new(out)
}

/// Distance from each anchor to its `k`-th nearest other anchor.
pub fn local_sigma<T: Real>(anchors: &PointCloud<T>, k: usize) -> Result<Vec<T>> {
    if k == 0 || k >= anchors.len() {
        return invalid(format!(
            "k = {k} needs 1 <= k < anchor count ({})",
            anchors.len()
        ));
    }
    let idx = NearestIndex::new(anchors.points().clone())?;
    Ok(anchors
        .points()
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, q)| {
            let nn = idx.knn_sq(q, k + 1);
            nn.into_iter()
                .filter(|(j, _)| *j != i)
                .nth(k - 1)
                .map(|(_, d2)| d2.sqrt())
                .expect("k + 1 candidates")
        })
        .collect())
}
