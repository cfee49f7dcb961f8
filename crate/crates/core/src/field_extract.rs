//! Dense grid evaluation, iso-surface extraction and field rasters.
//!
//! Both extractors build each cell's surface from the segments it leaves on
//! the cell's faces (edges, in 2-D), so neighbouring cells always agree on
//! shared vertices and outputs are closed wherever the iso set does not
//! leave the grid. A face with two diagonal inside corners is resolved by
//! the mean of its corner values, the same decision for both cells sharing it.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Polylines, TriangleMesh};
use crate::Real;

/// Values on a regular grid; index order is row-major with the first axis slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    pub dims: Vec<usize>,
    pub lo: Vec<T>,
    pub hi: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(dims: Vec<usize>, lo: Vec<T>, hi: Vec<T>, values: Vec<T>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) || lo.len() != dims.len() || hi.len() != dims.len() {
            return invalid("grid must be 2-D or 3-D with matching bounds");
        }
        if dims.iter().any(|&d| d < 2) {
            return invalid("every grid axis needs at least two samples");
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(*b > *a)) {
            return invalid("grid bounds must be increasing");
        }
        if values.len() != dims.iter().product::<usize>() {
            return invalid("value count does not match the grid");
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("grid value {i} is not finite"));
        }
        Ok(Self {
            dims,
            lo,
            hi,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spacing along `axis`.
    pub fn step(&self, axis: usize) -> T {
        (self.hi[axis] - self.lo[axis]) / T::from_usize_lossy(self.dims[axis] - 1)
    }

    pub fn cell_diagonal(&self) -> T {
        (0..self.dim())
            .map(|a| self.step(a) * self.step(a))
            .sum::<T>()
            .sqrt()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.dims).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.values[self.flat_index(idx)]
    }

    /// World position of a grid vertex.
    pub fn position(&self, idx: &[usize]) -> Vec<T> {
        idx.iter()
            .enumerate()
            .map(|(a, &i)| {
                self.lo[a] + (self.hi[a] - self.lo[a]) * T::from_usize_lossy(i)
                    / T::from_usize_lossy(self.dims[a] - 1)
            })
            .collect()
    }

    pub fn min_max(&self) -> (T, T) {
        self.values.iter().fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), v| (lo.min(*v), hi.max(*v)),
        )
    }
}

/// Evaluates `f` on every vertex of a `dims` grid spanning `[lo, hi]`.
///
/// `f` receives points in batches (one row per point) and must be pure.
pub fn eval_grid<T: Real, F>(dims: &[usize], lo: &[T], hi: &[T], mut f: F) -> Result<ScalarField<T>>
where
    F: FnMut(ArrayView2<T>) -> Result<Vec<T>>,
{
    let d = dims.len();
    if !(2..=3).contains(&d) || lo.len() != d || hi.len() != d {
        return invalid("grid must be 2-D or 3-D with matching bounds");
    }
    if dims.iter().any(|&n| n < 2) {
        return invalid("every grid axis needs at least two samples");
    }
    let total: usize = dims.iter().product();
    let slab = total / dims[0];
    let coord = |a: usize, i: usize| {
        lo[a] + (hi[a] - lo[a]) * T::from_usize_lossy(i) / T::from_usize_lossy(dims[a] - 1)
    };
    let mut values = Vec::with_capacity(total);
    let mut batch = Array2::zeros((slab, d));
    for i0 in 0..dims[0] {
        for r in 0..slab {
            let mut rem = r;
            let mut idx = vec![0; d];
            idx[0] = i0;
            for a in (1..d).rev() {
                idx[a] = rem % dims[a];
                rem /= dims[a];
            }
            for a in 0..d {
                batch[[r, a]] = coord(a, idx[a]);
            }
        }
        let out = f(batch.view())?;
        if out.len() != slab {
            return Err(Error::Internal("evaluator returned the wrong number of values".into()));
        }
        if let Some(r) = out.iter().position(|v| !v.is_finite()) {
            let p: Vec<String> = batch.row(r).iter().map(|v| v.to_string()).collect();
            return Err(Error::Numerical(format!(
                "field is not finite at ({})",
                p.join(", ")
            )));
        }
        values.extend(out);
    }
    ScalarField::new(dims.to_vec(), lo.to_vec(), hi.to_vec(), values)
}

/// Extracted level set and the iso value used.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelSetOutput<T> {
    Mesh { mesh: TriangleMesh<T>, iso: T },
    Lines { lines: Polylines<T>, iso: T },
}

/// Faces smaller than this are dropped after extraction.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// Corners of a unit cell, bit `a` of the index is the offset along axis `a`.
fn corner_offset(c: usize, d: usize) -> Vec<usize> {
    (0..d).map(|a| (c >> a) & 1).collect()
}

/// Interpolation parameter of the iso crossing between values `a` and `b`.
fn crossing<T: Real>(a: T, b: T, iso: T) -> T {
    let t = (iso - a) / (b - a);
    t.max(T::zero()).min(T::one())
}

/// Shares vertices between cells: one per crossed grid edge.
struct EdgeVertices<'a, T> {
    field: &'a ScalarField<T>,
    iso: T,
    map: HashMap<(usize, usize), usize>,
    vertices: Vec<Vec<T>>,
}

impl<'a, T: Real> EdgeVertices<'a, T> {
    fn new(field: &'a ScalarField<T>, iso: T) -> Self {
        Self {
            field,
            iso,
            map: HashMap::new(),
            vertices: Vec::new(),
        }
    }

    /// Vertex on the grid edge leaving `base` along `axis`.
    fn get(&mut self, base: &[usize], axis: usize) -> usize {
        let key = (self.field.flat_index(base), axis);
        if let Some(&v) = self.map.get(&key) {
            return v;
        }
        let mut other = base.to_vec();
        other[axis] += 1;
        let (a, b) = (self.field.at(base), self.field.at(&other));
        let t = crossing(a, b, self.iso);
        let pa = self.field.position(base);
        let pb = self.field.position(&other);
        let p = pa.iter().zip(&pb).map(|(x, y)| *x + t * (*y - *x)).collect();
        let id = self.vertices.len();
        self.vertices.push(p);
        self.map.insert(key, id);
        id
    }
}

/// Oriented crossing segments on one square face.
///
/// `corners` are 4 cell-corner ids in cyclic order, `inside` their flags,
/// `values` their field values. Segments are returned as pairs of
/// `(corner, corner)` edges, oriented so that `t = o x f`, where `o` points
/// from the inside to the outside corner of the first edge and `f` is the
/// face normal given by `normal_sign` along the axis orthogonal to the face.
fn face_segments<T: Real>(
    corners: [usize; 4],
    inside: [bool; 4],
    values: [T; 4],
    iso: T,
    d: usize,
    normal: &[f64],
) -> Vec<((usize, usize), (usize, usize))> {
    let crossed: Vec<usize> = (0..4).filter(|&k| inside[k] != inside[(k + 1) % 4]).collect();
    let edge = |k: usize| (corners[k], corners[(k + 1) % 4]);
    let pairs: Vec<(usize, usize)> = match crossed.len() {
        2 => vec![(crossed[0], crossed[1])],
        4 => {
            let mean = values.iter().fold(T::zero(), |s, v| s + *v) * T::lit(0.25);
            let connect_inside = mean < iso;
            // isolate the corners of the kind that is not connected through the face
            let isolate = |k: usize| inside[k] != connect_inside;
            // edge k-1 and edge k meet at corner k
            (0..4)
                .filter(|&k| isolate(k))
                .map(|k| ((k + 3) % 4, k))
                .collect()
        }
        _ => Vec::new(),
    };
    let mid = |e: (usize, usize)| -> Vec<f64> {
        let a = corner_offset(e.0, d);
        let b = corner_offset(e.1, d);
        a.iter().zip(&b).map(|(x, y)| (*x + *y) as f64 * 0.5).collect()
    };
    pairs
        .into_iter()
        .map(|(k1, k2)| {
            let (e1, e2) = (edge(k1), edge(k2));
            let (from, to) = if inside[k1] {
                (corners[k1], corners[(k1 + 1) % 4])
            } else {
                (corners[(k1 + 1) % 4], corners[k1])
            };
            let o: Vec<f64> = corner_offset(to, d)
                .iter()
                .zip(corner_offset(from, d))
                .map(|(b, a)| *b as f64 - a as f64)
                .collect();
            let t: Vec<f64> = mid(e2).iter().zip(mid(e1)).map(|(b, a)| b - a).collect();
            let c = cross3(&pad3(&o), &pad3(normal));
            let dot: f64 = pad3(&t).iter().zip(&c).map(|(x, y)| x * y).sum();
            if dot > 0.0 {
                (e1, e2)
            } else {
                (e2, e1)
            }
        })
        .collect()
}

fn pad3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v.get(2).copied().unwrap_or(0.0)]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn edge_key(e: (usize, usize)) -> (usize, usize) {
    (e.0.min(e.1), e.0.max(e.1))
}

/// Iso-surface of a 3-D field. Faces point toward increasing values.
///
/// An iso value outside the field's range gives an empty mesh.
pub fn marching_cubes<T: Real>(field: &ScalarField<T>, iso: T) -> Result<TriangleMesh<T>> {
    if field.dim() != 3 {
        return invalid("marching cubes needs a 3-D field");
    }
    let [nx, ny, nz] = [field.dims[0], field.dims[1], field.dims[2]];
    let mut verts = EdgeVertices::new(field, iso);
    let mut faces = Vec::new();
    // cube faces: (axis, side) with corners in cyclic order of the other two axes
    let cube_faces: Vec<([usize; 4], Vec<f64>)> = (0..3)
        .flat_map(|a| {
            let (u, v) = match a {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            (0..2).map(move |side| {
                let base = side << a;
                let c = [
                    base,
                    base | 1 << u,
                    base | 1 << u | 1 << v,
                    base | 1 << v,
                ];
                let mut n = vec![0.0; 3];
                n[a] = if side == 1 { 1.0 } else { -1.0 };
                (c, n)
            })
        })
        .collect();
    let mut segments = Vec::new();
    let mut next: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let base = [i, j, k];
                let vals: [T; 8] = std::array::from_fn(|c| {
                    field.at(&[i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1)])
                });
                let ins: [bool; 8] = std::array::from_fn(|c| vals[c] < iso);
                if ins.iter().all(|x| *x) || ins.iter().all(|x| !*x) {
                    continue;
                }
                segments.clear();
                for (c, n) in &cube_faces {
                    segments.extend(face_segments(
                        *c,
                        c.map(|x| ins[x]),
                        c.map(|x| vals[x]),
                        iso,
                        3,
                        n,
                    ));
                }
                next.clear();
                for (a, b) in &segments {
                    next.insert(edge_key(*a), edge_key(*b));
                }
                let mut vid = |e: (usize, usize)| {
                    let axis = (e.0 ^ e.1).trailing_zeros() as usize;
                    let off = corner_offset(e.0, 3);
                    let p: Vec<usize> = base.iter().zip(&off).map(|(b, o)| b + o).collect();
                    verts.get(&p, axis)
                };
                let mut visited: Vec<(usize, usize)> = Vec::new();
                for (start, _) in &segments {
                    let start = edge_key(*start);
                    if visited.contains(&start) {
                        continue;
                    }
                    let mut lp = vec![start];
                    visited.push(start);
                    let mut cur = start;
                    loop {
                        let nx_e = *next
                            .get(&cur)
                            .ok_or_else(|| Error::Internal("open cell boundary loop".into()))?;
                        if nx_e == start {
                            break;
                        }
                        visited.push(nx_e);
                        lp.push(nx_e);
                        cur = nx_e;
                    }
                    // fan from the lowest edge so a reversed loop gives the same triangles
                    let first = (0..lp.len()).min_by_key(|&s| lp[s]).unwrap_or(0);
                    lp.rotate_left(first);
                    let ids: Vec<usize> = lp.iter().map(|e| vid(*e)).collect();
                    for w in 1..ids.len().saturating_sub(1) {
                        faces.push([ids[0], ids[w], ids[w + 1]]);
                    }
                }
            }
        }
    }
    let vertices = verts
        .vertices
        .into_iter()
        .map(|p| [p[0], p[1], p[2]])
        .collect();
    let mut mesh = TriangleMesh { vertices, faces };
    mesh.drop_degenerate(T::lit(MIN_FACE_AREA));
    Ok(mesh)
}

/// Iso-lines of a 2-D field, with inside (lower values) on the left.
///
/// Saddle cells use `center` when given (the field at the cell center),
/// otherwise the mean of the corners.
pub fn marching_squares<T: Real>(
    field: &ScalarField<T>,
    iso: T,
    center: Option<&dyn Fn(&[T]) -> T>,
) -> Result<Polylines<T>> {
    if field.dim() != 2 {
        return invalid("marching squares needs a 2-D field");
    }
    let [nx, ny] = [field.dims[0], field.dims[1]];
    let mut verts = EdgeVertices::new(field, iso);
    let mut segments = Vec::new();
    let cyc = [0usize, 1, 3, 2];
    let normal = [0.0, 0.0, 1.0];
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            let base = [i, j];
            let vals: [T; 4] = cyc.map(|c| field.at(&[i + (c & 1), j + (c >> 1 & 1)]));
            let ins = vals.map(|v| v < iso);
            if ins.iter().all(|x| *x) || ins.iter().all(|x| !*x) {
                continue;
            }
            let mut vals_for_face = vals;
            let crossed = (0..4).filter(|&k| ins[k] != ins[(k + 1) % 4]).count();
            if crossed == 4 {
                if let Some(f) = center {
                    let p0 = field.position(&base);
                    let p1 = field.position(&[i + 1, j + 1]);
                    let mid: Vec<T> = p0.iter().zip(&p1).map(|(a, b)| (*a + *b) * T::lit(0.5)).collect();
                    // make the mean equal the sampled center value
                    vals_for_face = [f(&mid); 4];
                }
            }
            for (a, b) in face_segments(cyc, ins, vals_for_face, iso, 2, &normal) {
                let mut vid = |e: (usize, usize)| {
                    let axis = (e.0 ^ e.1).trailing_zeros() as usize;
                    let lo = e.0.min(e.1);
                    let p = [i + (lo & 1), j + (lo >> 1 & 1)];
                    verts.get(&p, axis)
                };
                let (va, vb) = (vid(a), vid(b));
                // the face rule puts the inside on the right for a +z normal
                if va != vb {
                    segments.push([vb, va]);
                }
            }
        }
    }
    let vertices = verts.vertices.into_iter().map(|p| [p[0], p[1]]).collect();
    Ok(Polylines { vertices, segments })
}

/// An RGB raster with 8 bits per channel, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    /// Lossless PNG encoding.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Internal(e.to_string()))?;
            w.write_image_data(&self.rgb)
                .map_err(|e| Error::Internal(e.to_string()))?;
        }
        Ok(out)
    }
}

pub const CONTOUR_RGB: [u8; 3] = [40, 40, 40];
pub const ZERO_RGB: [u8; 3] = [0, 0, 0];

/// Diverging color map (blue below zero, red above) with iso-contours every
/// `spacing`; the zero level is drawn black. One pixel per grid vertex, the
/// first axis runs left to right and the second bottom to top.
pub fn raster_field<T: Real>(field: &ScalarField<T>, spacing: T) -> Result<Raster> {
    if field.dim() != 2 {
        return invalid("rasters need a 2-D field");
    }
    if !(spacing > T::zero()) {
        return invalid("contour spacing must be positive");
    }
    let (w, h) = (field.dims[0], field.dims[1]);
    let (lo, hi) = field.min_max();
    let amp = lo.abs().max(hi.abs()).max(T::lit(1e-300)).to_f64_lossy();
    let band = |v: T| (v / spacing).floor().to_i64().unwrap_or(i64::MAX);
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        let j = h - 1 - y;
        for x in 0..w {
            let v = field.at(&[x, j]);
            let b = band(v);
            let mut line = false;
            let mut zero = false;
            for (dx, dy) in [(1i64, 0i64), (0, 1)] {
                let (xi, ji) = (x as i64 + dx, j as i64 + dy);
                if xi >= w as i64 || ji >= h as i64 {
                    continue;
                }
                let u = field.at(&[xi as usize, ji as usize]);
                if band(u) != b {
                    line = true;
                    if (u < T::zero()) != (v < T::zero()) {
                        zero = true;
                    }
                }
            }
            let px = if zero {
                ZERO_RGB
            } else if line {
                CONTOUR_RGB
            } else {
                let s = (v.to_f64_lossy().abs() / amp).min(1.0);
                let fade = (255.0 * (1.0 - 0.8 * s)).round() as u8;
                if v < T::zero() {
                    [fade, fade, 255]
                } else {
                    [255, fade, fade]
                }
            };
            let o = (y * w + x) * 3;
            rgb[o..o + 3].copy_from_slice(&px);
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        rgb,
    })
}

/// Unit cube `[-0.5, 0.5]^d` padded by `pad` (relative) on every side.
pub fn padded_unit_bounds<T: Real>(d: usize, pad: f64) -> (Vec<T>, Vec<T>) {
    let e = T::lit(0.5 * (1.0 + 2.0 * pad));
    (vec![-e; d], vec![e; d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap as Map;

    fn sphere_field(res: usize, r: f64, ext: f64) -> ScalarField<f64> {
        eval_grid(&[res; 3], &[-ext; 3], &[ext; 3], |p| {
            Ok(p.rows().into_iter().map(|q| q.dot(&q).sqrt() - r).collect())
        })
        .unwrap()
    }

    fn circle_field(res: usize, r: f64, ext: f64) -> ScalarField<f64> {
        eval_grid(&[res; 2], &[-ext; 2], &[ext; 2], |p| {
            Ok(p.rows().into_iter().map(|q| q.dot(&q).sqrt() - r).collect())
        })
        .unwrap()
    }

    fn edge_use(mesh: &TriangleMesh<f64>) -> Map<(usize, usize), i32> {
        let mut m = Map::new();
        for f in &mesh.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += if a < b { 1 } else { -1 };
            }
        }
        m
    }

    #[test]
    fn grid_values_are_exact_and_nested() {
        let f = sphere_field(8, 1.0, 1.2);
        let c = f.position(&[0, 0, 0]);
        assert_eq!(f.at(&[0, 0, 0]), (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() - 1.0);
        let fine = sphere_field(15, 1.0, 1.2);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(f.at(&[i, j, 3]), fine.at(&[2 * i, 2 * j, 6]));
            }
        }
    }

    #[test]
    fn non_finite_value_is_reported_with_coordinates() {
        let r = eval_grid(&[3, 3], &[0.0, 0.0], &[1.0, 1.0], |p| {
            Ok(p.rows().into_iter().map(|q| if q[0] == 1.0 && q[1] == 0.5 { f64::NAN } else { 0.0 }).collect())
        });
        match r {
            Err(Error::Numerical(m)) => assert!(m.contains("(1, 0.5)"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sphere_mesh_is_close_watertight_and_outward() {
        let f = sphere_field(64, 1.0, 1.2);
        let m = marching_cubes(&f, 0.0).unwrap();
        let diag = f.cell_diagonal();
        assert!(!m.faces.is_empty());
        for v in &m.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() <= diag);
        }
        // every edge used exactly twice, in opposite directions
        assert!(edge_use(&m).values().all(|&c| c == 0));
        let mut count = Map::new();
        for f in &m.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(count.values().all(|&c| c == 2));
        for fi in 0..m.faces.len() {
            let n = m.face_normal(fi);
            let c = m.vertices[m.faces[fi][0]];
            assert!(n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0);
        }
        assert_eq!(m.connected_components(), 1);
    }

    #[test]
    fn flipped_field_reverses_orientation() {
        let f = sphere_field(24, 0.7, 1.0);
        let mut g = f.clone();
        g.values.iter_mut().for_each(|v| *v = -*v);
        let a = marching_cubes(&f, 0.0).unwrap();
        let b = marching_cubes(&g, 0.0).unwrap();
        let key = |m: &TriangleMesh<f64>, rev: bool| {
            let mut faces: Vec<Vec<[u64; 3]>> = m
                .faces
                .iter()
                .map(|f| {
                    let mut v: Vec<[u64; 3]> = f.iter().map(|&i| m.vertices[i].map(|x| x.to_bits())).collect();
                    if rev {
                        v.reverse();
                    }
                    let k = (0..3).min_by_key(|&s| v[s]).unwrap();
                    v.rotate_left(k);
                    v
                })
                .collect();
            faces.sort();
            faces
        };
        assert_eq!(key(&a, false), key(&b, true));
    }

    #[test]
    fn constant_field_gives_empty_output() {
        let f = ScalarField::new(vec![4, 4, 4], vec![0.0; 3], vec![1.0; 3], vec![1.0; 64]).unwrap();
        assert!(marching_cubes(&f, 0.0).unwrap().faces.is_empty());
        let f = ScalarField::new(vec![4, 4], vec![0.0; 2], vec![1.0; 2], vec![-1.0; 16]).unwrap();
        assert!(marching_squares(&f, 0.0, None).unwrap().segments.is_empty());
    }

    #[test]
    fn interpolated_vertices_hit_iso() {
        let f = sphere_field(20, 0.8, 1.0);
        let iso = 0.05;
        let m = marching_cubes(&f, iso).unwrap();
        // each vertex lies on a grid edge; the linear interpolant there equals iso
        for v in m.vertices.iter().take(200) {
            let idx: Vec<f64> = (0..3).map(|a| (v[a] - f.lo[a]) / f.step(a)).collect();
            let axis = (0..3).find(|&a| (idx[a] - idx[a].round()).abs() > 1e-9).unwrap_or(0);
            let mut i0: Vec<usize> = idx.iter().map(|x| x.round() as usize).collect();
            i0[axis] = idx[axis].floor() as usize;
            let mut i1 = i0.clone();
            i1[axis] += 1;
            let t = idx[axis] - idx[axis].floor();
            let (a, b) = (f.at(&i0), f.at(&i1));
            assert!((a < iso) != (b < iso));
            assert!((a + t * (b - a) - iso).abs() < 1e-9);
        }
    }

    #[test]
    fn extraction_is_resolution_consistent() {
        use crate::geometry::{chamfer_l1, PointCloud};
        let coarse = marching_cubes(&sphere_field(32, 0.9, 1.2), 0.0).unwrap();
        let fine = marching_cubes(&sphere_field(64, 0.9, 1.2), 0.0).unwrap();
        let a = PointCloud::new(coarse.vertex_array()).unwrap();
        let b = PointCloud::new(fine.vertex_array()).unwrap();
        let cell = 2.4 / 31.0;
        assert!(chamfer_l1(&a, &b).unwrap() < 2.0 * cell);
    }

    #[test]
    fn circle_is_one_closed_loop_near_radius() {
        let f = circle_field(64, 1.0, 1.2);
        let l = marching_squares(&f, 0.0, None).unwrap();
        let chains = l.chains();
        assert_eq!(chains.len(), 1);
        assert!(chains[0].1);
        let diag = f.cell_diagonal();
        for v in &l.vertices {
            assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() <= diag);
        }
        // inside on the left: counter-clockwise loop has positive signed area
        let area: f64 = l
            .segments
            .iter()
            .map(|s| {
                let (a, b) = (l.vertices[s[0]], l.vertices[s[1]]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            * 0.5;
        assert!((area - std::f64::consts::PI).abs() < 0.02, "{area}");
    }

    #[test]
    fn saddle_uses_center_sample() {
        // corners: inside at (0,0) and (1,1)
        let f = ScalarField::new(vec![2, 2], vec![0.0; 2], vec![1.0; 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let joined = |_: &[f64]| -1.0;
        let split = |_: &[f64]| 1.0;
        for (center, inside_joined) in [(&joined as &dyn Fn(&[f64]) -> f64, true), (&split, false)] {
            let l = marching_squares(&f, 0.0, Some(center)).unwrap();
            assert_eq!(l.segments.len(), 2);
            // joined inside corners leave the outside corners (1,0) and (0,1) cut off
            for s in &l.segments {
                let mid = [
                    0.5 * (l.vertices[s[0]][0] + l.vertices[s[1]][0]),
                    0.5 * (l.vertices[s[0]][1] + l.vertices[s[1]][1]),
                ];
                let cut_corner = [mid[0].round(), mid[1].round()];
                let is_inside_corner = cut_corner[0] == cut_corner[1];
                assert_eq!(is_inside_corner, !inside_joined);
            }
        }
    }

    #[test]
    fn ramp_raster_has_even_straight_contours() {
        let f = eval_grid(&[101, 21], &[0.0, 0.0], &[1.0, 0.2], |p| {
            Ok(p.rows().into_iter().map(|q| q[0] - 0.505).collect())
        })
        .unwrap();
        let r = raster_field(&f, 0.1).unwrap();
        let lines: Vec<usize> = (0..r.width)
            .filter(|&x| matches!(r.pixel(x, 10), CONTOUR_RGB | ZERO_RGB))
            .collect();
        assert_eq!(lines.len(), 10);
        for w in lines.windows(2) {
            assert_eq!(w[1] - w[0], 10);
        }
        for y in 0..r.height {
            for &x in &lines {
                assert!(matches!(r.pixel(x, y), CONTOUR_RGB | ZERO_RGB));
            }
        }
    }

    #[test]
    fn circle_raster_rings_and_determinism() {
        let f = circle_field(201, 0.5, 1.0);
        let r = raster_field(&f, 0.25).unwrap();
        // contour pixels sit near radius 0.5 + k * 0.25
        let step = f.step(0);
        for y in 0..r.height {
            for x in 0..r.width {
                if matches!(r.pixel(x, y), CONTOUR_RGB | ZERO_RGB) {
                    let p = f.position(&[x, r.height - 1 - y]);
                    let rr = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    let k = ((rr - 0.5) / 0.25).round();
                    assert!((rr - 0.5 - 0.25 * k).abs() <= 1.5 * step, "{rr}");
                }
            }
        }
        assert_eq!(r.to_png().unwrap(), raster_field(&f, 0.25).unwrap().to_png().unwrap());
        let png = r.to_png().unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
