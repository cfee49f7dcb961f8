//! Analytic test shapes: surface samplers, signed distances, probe shells
//! and reference meshes.

use std::f64::consts::{PI, TAU};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{PointCloud, TriangleMesh};
use crate::Real;

/// A shape with a closed-form signed distance (negative inside).
///
/// The moon is the disk of radius `outer` at the origin minus the disk of
/// radius `inner` centered at `(offset, 0)`. Its nonuniform sampling has
/// density proportional to `exp(tip_bias * y)`, favouring the upper tip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Cube { half: f64 },
    Torus { major: f64, minor: f64 },
    Moon2d { outer: f64, inner: f64, offset: f64, tip_bias: f64 },
}

impl Shape {
    pub fn unit_sphere() -> Self {
        Shape::Sphere { radius: 1.0 }
    }

    pub fn unit_cube() -> Self {
        Shape::Cube { half: 1.0 }
    }

    pub fn default_torus() -> Self {
        Shape::Torus { major: 1.0, minor: 0.4 }
    }

    pub fn default_moon() -> Self {
        Shape::Moon2d { outer: 1.0, inner: 0.8, offset: 0.5, tip_bias: 1.0 }
    }

    /// Parses `sphere`, `cube`, `torus` or `moon2d` with default parameters.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(Self::unit_sphere()),
            "cube" => Ok(Self::unit_cube()),
            "torus" => Ok(Self::default_torus()),
            "moon2d" | "moon" => Ok(Self::default_moon()),
            _ => invalid(format!("unknown shape '{name}'")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Cube { .. } => "cube",
            Shape::Torus { .. } => "torus",
            Shape::Moon2d { .. } => "moon2d",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Cube { half } => half > 0.0,
            Shape::Torus { major, minor } => minor > 0.0 && major > minor,
            Shape::Moon2d { outer, inner, offset, tip_bias } => {
                outer > 0.0
                    && inner > 0.0
                    && offset > 0.0
                    && offset + inner > outer
                    && (outer - inner).abs() < offset
                    && offset - inner < outer
                    && tip_bias.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("invalid parameters for {self:?}"))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Shape::Moon2d { .. } => 2,
            _ => 3,
        }
    }

    /// Radius of the smallest origin-centered ball containing the shape.
    pub fn bounding_scale(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Cube { half } => half * 3f64.sqrt(),
            Shape::Torus { major, minor } => major + minor,
            Shape::Moon2d { outer, .. } => outer,
        }
    }

    pub fn sdf(&self, p: &[f64]) -> f64 {
        match *self {
            Shape::Sphere { radius } => norm(p) - radius,
            Shape::Cube { half } => {
                let q: Vec<f64> = p.iter().map(|v| v.abs() - half).collect();
                let outside = norm(&q.iter().map(|v| v.max(0.0)).collect::<Vec<_>>());
                let inside = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0);
                outside + inside
            }
            Shape::Torus { major, minor } => {
                let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                (ring * ring + p[2] * p[2]).sqrt() - minor
            }
            Shape::Moon2d { outer, inner, offset, .. } => {
                let a = norm(p) - outer;
                let b = ((p[0] - offset).powi(2) + p[1] * p[1]).sqrt() - inner;
                a.max(-b)
            }
        }
    }

    /// Tip positions of the moon (upper first).
    pub fn moon_tips(&self) -> Option<[[f64; 2]; 2]> {
        match *self {
            Shape::Moon2d { outer, inner, offset, .. } => {
                let x = (offset * offset + outer * outer - inner * inner) / (2.0 * offset);
                let y = (outer * outer - x * x).max(0.0).sqrt();
                Some([[x, y], [x, -y]])
            }
            _ => None,
        }
    }

    /// Surface samples with outward unit normals, uniform in area (or length).
    pub fn sample_surface<T: Real, R: Rng>(&self, n: usize, rng: &mut R) -> Result<PointCloud<T>> {
        self.sample(n, false, rng)
    }

    /// Like [`Shape::sample_surface`], but the moon uses its tip-biased density.
    pub fn sample_nonuniform<T: Real, R: Rng>(&self, n: usize, rng: &mut R) -> Result<PointCloud<T>> {
        self.sample(n, true, rng)
    }

    fn sample<T: Real, R: Rng>(&self, n: usize, biased: bool, rng: &mut R) -> Result<PointCloud<T>> {
        self.validate()?;
        if n == 0 {
            return invalid("sample count must be positive");
        }
        let dim = self.dim();
        let mut pts = Array2::zeros((n, dim));
        let mut nrm = Array2::zeros((n, dim));
        for k in 0..n {
            let (p, nv) = self.sample_one(biased, rng);
            for d in 0..dim {
                pts[[k, d]] = T::lit(p[d]);
                nrm[[k, d]] = T::lit(nv[d]);
            }
        }
        PointCloud::with_normals(pts, nrm)
    }

    fn sample_one<R: Rng>(&self, biased: bool, rng: &mut R) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Sphere { radius } => {
                let d = unit_vector(rng);
                (d.map(|v| v * radius), d)
            }
            Shape::Cube { half } => {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = [0.0; 3];
                let mut nv = [0.0; 3];
                for (d, v) in p.iter_mut().enumerate() {
                    *v = if d == axis { sign * half } else { rng.random_range(-half..half) };
                }
                nv[axis] = sign;
                (p, nv)
            }
            Shape::Torus { major, minor } => loop {
                let u = rng.random::<f64>() * TAU;
                let v = rng.random::<f64>() * TAU;
                // area element is proportional to the distance from the axis
                if rng.random::<f64>() * (major + minor) > major + minor * v.cos() {
                    continue;
                }
                let nv = [v.cos() * u.cos(), v.cos() * u.sin(), v.sin()];
                let ring = major + minor * v.cos();
                break ([ring * u.cos(), ring * u.sin(), minor * v.sin()], nv);
            },
            Shape::Moon2d { outer, inner, offset, tip_bias } => {
                let [tip, _] = self.moon_tips().unwrap();
                let t_out = tip[1].atan2(tip[0]);
                let t_in = tip[1].atan2(tip[0] - offset);
                let len_out = outer * (TAU - 2.0 * t_out);
                let len_in = inner * (TAU - 2.0 * t_in);
                loop {
                    let s = rng.random::<f64>() * (len_out + len_in);
                    let (p, nv) = if s < len_out {
                        let a = t_out + s / outer;
                        let d = [a.cos(), a.sin()];
                        ([outer * d[0], outer * d[1], 0.0], [d[0], d[1], 0.0])
                    } else {
                        let a = t_in + (s - len_out) / inner;
                        let d = [a.cos(), a.sin()];
                        ([offset + inner * d[0], inner * d[1], 0.0], [-d[0], -d[1], 0.0])
                    };
                    if !biased || rng.random::<f64>() < (tip_bias * (p[1] - outer)).exp() {
                        break (p, nv);
                    }
                }
            }
        }
    }

    /// Probe points with known sign (`true` = inside), half inside, half outside.
    ///
    /// Sphere, cube and torus use shells at 0.6x and 1.6x of the radius (half
    /// extent, tube radius); the moon uses box points at least a tenth of its
    /// outer radius away from the boundary.
    pub fn probe_shells<R: Rng>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<bool>) {
        let dim = self.dim();
        let mut pts = Array2::zeros((n, dim));
        let mut inside = Vec::with_capacity(n);
        for k in 0..n {
            let want_in = k % 2 == 0;
            let f = if want_in { 0.6 } else { 1.6 };
            let p = match *self {
                Shape::Sphere { radius } => unit_vector(rng).map(|v| v * radius * f),
                Shape::Cube { half } => {
                    let (p, _) = Shape::Cube { half: half * f }.sample_one(false, rng);
                    p
                }
                Shape::Torus { major, minor } => {
                    let (p, _) = Shape::Torus { major, minor: minor * f }.sample_one(false, rng);
                    p
                }
                Shape::Moon2d { outer, .. } => loop {
                    let p = [
                        rng.random_range(-1.2 * outer..1.2 * outer),
                        rng.random_range(-1.2 * outer..1.2 * outer),
                        0.0,
                    ];
                    let s = self.sdf(&p[..2]);
                    if s.abs() >= 0.1 * outer && (s < 0.0) == want_in {
                        break p;
                    }
                },
            };
            for d in 0..dim {
                pts[[k, d]] = p[d];
            }
            inside.push(want_in);
        }
        (pts, inside)
    }

    /// Triangulated surface for 3-D shapes.
    pub fn reference_mesh<T: Real>(&self, resolution: usize) -> Option<TriangleMesh<T>> {
        let res = resolution.max(4);
        match *self {
            Shape::Sphere { radius } => Some(uv_sphere_mesh(T::lit(radius), res, 2 * res)),
            Shape::Cube { half } => Some(cube_mesh(T::lit(half))),
            Shape::Torus { major, minor } => Some(torus_mesh(T::lit(major), T::lit(minor), 2 * res, res)),
            Shape::Moon2d { .. } => None,
        }
    }
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let len = norm(&v);
        if len > 1e-12 {
            return v.map(|x| x / len);
        }
    }
}

/// Adds isotropic Gaussian noise with standard deviation `sigma` to every coordinate.
pub fn add_noise<T: Real, R: Rng>(cloud: &PointCloud<T>, sigma: f64, rng: &mut R) -> Result<PointCloud<T>> {
    if !(sigma >= 0.0) {
        return invalid("noise sigma must be non-negative");
    }
    let mut pts = cloud.points().clone();
    if sigma > 0.0 {
        for v in pts.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += T::lit(sigma * z);
        }
    }
    PointCloud::new(pts)
}

/// `n` points uniformly distributed on a sphere of radius `r` at the origin.
pub fn sphere_points<T: Real, R: Rng>(n: usize, r: f64, rng: &mut R) -> Array2<T> {
    let mut out = Array2::zeros((n, 3));
    for mut row in out.rows_mut() {
        let d = unit_vector(rng);
        for k in 0..3 {
            row[k] = T::lit(d[k] * r);
        }
    }
    out
}

/// Axis-aligned cube with outward-facing triangles.
pub fn cube_mesh<T: Real>(half: T) -> TriangleMesh<T> {
    let vertices = (0..8)
        .map(|i| {
            let s = |bit: usize| if i >> bit & 1 == 1 { half } else { -half };
            [s(0), s(1), s(2)]
        })
        .collect();
    #[rustfmt::skip]
    let faces = vec![
        [0, 2, 1], [1, 2, 3], // z-
        [4, 5, 6], [5, 7, 6], // z+
        [0, 1, 4], [1, 5, 4], // y-
        [2, 6, 3], [3, 6, 7], // y+
        [0, 4, 2], [2, 4, 6], // x-
        [1, 3, 5], [3, 7, 5], // x+
    ];
    TriangleMesh { vertices, faces }
}

/// Latitude-longitude sphere with `stacks` bands and `slices` sectors.
pub fn uv_sphere_mesh<T: Real>(r: T, stacks: usize, slices: usize) -> TriangleMesh<T> {
    let mut vertices = vec![[T::zero(), T::zero(), r]];
    for i in 1..stacks {
        let theta = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let phi = TAU * j as f64 / slices as f64;
            vertices.push([
                r * T::lit(theta.sin() * phi.cos()),
                r * T::lit(theta.sin() * phi.sin()),
                r * T::lit(theta.cos()),
            ]);
        }
    }
    vertices.push([T::zero(), T::zero(), -r]);
    let south = vertices.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + j % slices;
    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
        faces.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    TriangleMesh { vertices, faces }
}

/// Torus around the z axis with `nu` sectors around the ring and `nv` around the tube.
pub fn torus_mesh<T: Real>(major: T, minor: T, nu: usize, nv: usize) -> TriangleMesh<T> {
    let mut vertices = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let v = TAU * j as f64 / nv as f64;
            let ring = major + minor * T::lit(v.cos());
            vertices.push([ring * T::lit(u.cos()), ring * T::lit(u.sin()), minor * T::lit(v.sin())]);
        }
    }
    let id = |i: usize, j: usize| (i % nu) * nv + j % nv;
    let mut faces = Vec::new();
    for i in 0..nu {
        for j in 0..nv {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriangleMesh { vertices, faces }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn outward(mesh: &TriangleMesh<f64>) -> bool {
        (0..mesh.faces.len()).all(|f| {
            let n = mesh.face_normal(f);
            let c: Vec<f64> = (0..3)
                .map(|d| mesh.faces[f].iter().map(|&i| mesh.vertices[i][d]).sum::<f64>() / 3.0)
                .collect();
            n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0
        })
    }

    #[test]
    fn sphere_samples_lie_on_radius() {
        let c: PointCloud<f64> = Shape::unit_sphere().sample_surface(300, &mut rng(0)).unwrap();
        for p in c.points().rows() {
            assert!((p.dot(&p).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_sets_radial_spread() {
        let shape = Shape::unit_sphere();
        let c: PointCloud<f64> = shape.sample_surface(20_000, &mut rng(1)).unwrap();
        let sigma = 0.02 * shape.bounding_scale();
        let noisy = add_noise(&c, sigma, &mut rng(2)).unwrap();
        let rms = (noisy.points().rows().into_iter().map(|p| (p.dot(&p).sqrt() - 1.0).powi(2)).sum::<f64>()
            / 20_000.0)
            .sqrt();
        assert!((rms - sigma).abs() < 0.05 * sigma, "{rms}");
    }

    #[test]
    fn moon_sampling_favours_upper_tip() {
        let shape = Shape::default_moon();
        let [up, down] = shape.moon_tips().unwrap();
        let c: PointCloud<f64> = shape.sample_nonuniform(20_000, &mut rng(3)).unwrap();
        let near = |t: [f64; 2]| {
            c.points().rows().into_iter().filter(|p| (p[0] - t[0]).hypot(p[1] - t[1]) < 0.3).count() as f64
        };
        assert!(near(up) >= 3.0 * near(down), "{} vs {}", near(up), near(down));
        for p in c.points().rows() {
            assert!(shape.sdf(&[p[0], p[1]]).abs() < 1e-9);
        }
        let u: PointCloud<f64> = shape.sample_surface(20_000, &mut rng(3)).unwrap();
        let n_up = u.points().rows().into_iter().filter(|p| p[1] > 0.5).count() as f64;
        let n_down = u.points().rows().into_iter().filter(|p| p[1] < -0.5).count() as f64;
        assert!((n_up / n_down - 1.0).abs() < 0.1);
    }

    #[test]
    fn surface_samples_are_on_zero_set_with_outward_normals() {
        for shape in [Shape::unit_cube(), Shape::default_torus(), Shape::unit_sphere(), Shape::default_moon()] {
            let c: PointCloud<f64> = shape.sample_surface(2000, &mut rng(4)).unwrap();
            let n = c.normals().unwrap();
            for (p, nv) in c.points().rows().into_iter().zip(n.rows()) {
                let p = p.to_vec();
                assert!(shape.sdf(&p).abs() < 1e-9, "{shape:?}");
                let out: Vec<f64> = p.iter().zip(nv.iter()).map(|(a, b)| a + 0.01 * b).collect();
                assert!(shape.sdf(&out) > 0.0, "{shape:?}");
            }
        }
    }

    #[test]
    fn probes_have_correct_labels() {
        for shape in [Shape::unit_cube(), Shape::default_torus(), Shape::unit_sphere(), Shape::default_moon()] {
            let (p, inside) = shape.probe_shells(1000, &mut rng(5));
            for (row, ins) in p.rows().into_iter().zip(inside) {
                assert_eq!(shape.sdf(&row.to_vec()) < 0.0, ins, "{shape:?}");
            }
        }
    }

    #[test]
    fn reference_meshes_are_outward_and_closed() {
        for shape in [Shape::unit_cube(), Shape::default_torus(), Shape::unit_sphere()] {
            let m: TriangleMesh<f64> = shape.reference_mesh(16).unwrap();
            assert!(outward_or_torus(&shape, &m), "{shape:?}");
            assert_eq!(m.connected_components(), 1);
        }
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        assert!(rel(uv_sphere_mesh(1.0, 64, 128).total_area(), 4.0 * PI) < 2e-3);
        assert!(rel(torus_mesh(1.0, 0.4, 128, 64).total_area(), 4.0 * PI * PI * 0.4) < 2e-3);
    }

    fn outward_or_torus(shape: &Shape, m: &TriangleMesh<f64>) -> bool {
        match shape {
            Shape::Torus { major, .. } => (0..m.faces.len()).all(|f| {
                let n = m.face_normal(f);
                let c: Vec<f64> = (0..3)
                    .map(|d| m.faces[f].iter().map(|&i| m.vertices[i][d]).sum::<f64>() / 3.0)
                    .collect();
                let rho = c[0].hypot(c[1]);
                let tube = [c[0] - major * c[0] / rho, c[1] - major * c[1] / rho, c[2]];
                n[0] * tube[0] + n[1] * tube[1] + n[2] * tube[2] > 0.0
            }),
            _ => outward(m),
        }
    }

    #[test]
    fn descriptor_round_trips_through_serde() {
        let s = Shape::default_moon();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"kind\":\"moon2d\""));
        assert_eq!(serde_json::from_str::<Shape>(&text).unwrap(), s);
        assert!(Shape::Torus { major: 0.3, minor: 0.4 }.validate().is_err());
        assert!(Shape::by_name("teapot").is_err());
    }
}
