//! A learned chart: a small network mapping the unit square (unit interval
//! in 2-D) onto the surface, fitted to the sparse input with a Chamfer loss.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BoundMlp, Graph, Init, MlpParams, ParamTensors, Var};
use crate::error::{invalid, Result};
use crate::geometry::NearestIndex;
use crate::Real;

/// Chart network shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamOptions {
    pub hidden_width: usize,
    /// Total fully connected layers from parameter to position (at least 3).
    pub layers: usize,
    /// Layers at the end of the network that are duplicated per patch.
    pub head_layers: usize,
    pub patch_count: usize,
}

impl Default for ParamOptions {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            layers: 5,
            head_layers: 2,
            patch_count: 1,
        }
    }
}

pub const MAX_PATCHES: usize = 8;

/// Which loss a chart sample feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartRole {
    /// Fitted to the input with the Chamfer loss.
    Regulated,
    /// Used as (gradient-stopped) pull targets.
    Supervision,
}

/// Parameters and their mapped positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSample<T> {
    pub uv: Array2<T>,
    pub xyz: Array2<T>,
    pub role: ChartRole,
}

/// Shared trunk plus one head per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamNet<T> {
    pub options: ParamOptions,
    pub trunk: MlpParams<T>,
    pub heads: Vec<MlpParams<T>>,
}

impl<T: Real> ParamNet<T> {
    /// A chart from the `out_dim - 1` dimensional unit cube into `out_dim` space.
    pub fn new<R: Rng>(out_dim: usize, options: ParamOptions, rng: &mut R) -> Result<Self> {
        if !(2..=3).contains(&out_dim) {
            return invalid(format!("chart target must be 2-D or 3-D, got {out_dim}"));
        }
        if options.patch_count == 0 || options.patch_count > MAX_PATCHES {
            return invalid(format!(
                "patch count {} not supported (1 to {MAX_PATCHES})",
                options.patch_count
            ));
        }
        if options.head_layers == 0 || options.layers <= options.head_layers {
            return invalid("chart needs at least one trunk and one head layer");
        }
        let w = options.hidden_width;
        let trunk_layers = options.layers - options.head_layers;
        let mut dims = vec![out_dim - 1];
        dims.extend(std::iter::repeat_n(w, trunk_layers));
        let mut trunk = MlpParams::new(&dims, Activation::Relu, Init::KaimingUniform, rng)?;
        trunk.layers.last_mut().expect("non-empty").activation = Activation::Relu;
        let mut head_dims = vec![w; options.head_layers];
        head_dims.push(out_dim);
        let heads = (0..options.patch_count)
            .map(|_| MlpParams::new(&head_dims, Activation::Relu, Init::KaimingUniform, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            options,
            trunk,
            heads,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.heads[0].out_dim()
    }

    pub fn patch_count(&self) -> usize {
        self.heads.len()
    }

    /// Maps parameters of a single patch.
    pub fn forward_patch(&self, patch: usize, uv: ArrayView2<T>) -> Result<Array2<T>> {
        let h = self.trunk.forward_batch(uv)?;
        self.heads[patch].forward_batch(h.view())
    }

    /// Upper bound on the chart's Lipschitz constant for one patch.
    pub fn lipschitz_bound(&self, patch: usize) -> T {
        self.trunk.lipschitz_bound() * self.heads[patch].lipschitz_bound()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundParam {
        BoundParam {
            trunk: self.trunk.bind(g),
            heads: self.heads.iter().map(|h| h.bind(g)).collect(),
        }
    }
}

impl<T: Real> ParamTensors<T> for ParamNet<T> {
    fn tensors(&self) -> Vec<&Array2<T>> {
        let mut out = self.trunk.tensors();
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = self.trunk.tensors_mut();
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }
}

/// A [`ParamNet`] recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundParam {
    pub trunk: BoundMlp,
    pub heads: Vec<BoundMlp>,
}

impl BoundParam {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.trunk.vars();
        for h in &self.heads {
            out.extend(h.vars());
        }
        out
    }

    /// Maps the rows of `uv`; rows `counts[0]` go through head 0, the next
    /// `counts[1]` through head 1, and so on.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, uv: &Array2<T>, counts: &[usize]) -> Var {
        let n = uv.nrows();
        if self.heads.len() == 1 {
            let x = g.leaf(uv.clone());
            let h = self.trunk.forward(g, x);
            return self.heads[0].forward(g, h);
        }
        let mut total: Option<Var> = None;
        let mut start = 0;
        for (head, &c) in self.heads.iter().zip(counts) {
            let rows: Rc<[usize]> = (start..start + c).collect();
            let x = g.leaf(uv.slice(s![start..start + c, ..]).to_owned());
            let h = self.trunk.forward(g, x);
            let y = head.forward(g, h);
            let y = g.scatter_add_rows(y, rows, n);
            total = Some(match total {
                Some(t) => g.add(t, y),
                None => y,
            });
            start += c;
        }
        total.expect("at least one patch")
    }
}

/// i.i.d. uniform samples in `[0, 1)^dim`.
pub fn sample_unit_cube<T: Real, R: Rng>(n: usize, dim: usize, rng: &mut R) -> Result<Array2<T>> {
    if n == 0 {
        return invalid("sample count must be positive");
    }
    Ok(Array2::from_shape_simple_fn((n, dim), || T::lit(rng.random::<f64>())))
}

/// i.i.d. uniform samples in the unit square.
pub fn sample_unit_square<T: Real, R: Rng>(n: usize, rng: &mut R) -> Result<Array2<T>> {
    sample_unit_cube(n, 2, rng)
}

/// Points per patch when `n` points are split as evenly as possible.
pub fn patch_counts(n: usize, patches: usize) -> Vec<usize> {
    (0..patches)
        .map(|k| n / patches + usize::from(k < n % patches))
        .collect()
}

/// Fresh parameters for every patch, mapped through the network (numeric).
pub fn generate_chart<T: Real, R: Rng>(
    net: &ParamNet<T>,
    n: usize,
    role: ChartRole,
    rng: &mut R,
) -> Result<ChartSample<T>> {
    let uv = sample_unit_cube(n, net.param_dim(), rng)?;
    let xyz = multi_patch_forward(net, &uv)?;
    Ok(ChartSample { uv, xyz, role })
}

/// Maps stacked per-patch parameters: rows are split by [`patch_counts`]
/// and each block goes through its own head.
pub fn multi_patch_forward<T: Real>(net: &ParamNet<T>, uv: &Array2<T>) -> Result<Array2<T>> {
    let counts = patch_counts(uv.nrows(), net.patch_count());
    let mut out = Array2::zeros((uv.nrows(), net.out_dim()));
    let mut start = 0;
    for (k, &c) in counts.iter().enumerate() {
        let block = net.forward_patch(k, uv.slice(s![start..start + c, ..]))?;
        out.slice_mut(s![start..start + c, ..]).assign(&block);
        start += c;
    }
    Ok(out)
}

/// Symmetric squared Chamfer loss between recorded chart points and a fixed
/// target. Matches are found on the current values and held constant.
pub fn chamfer_loss<T: Real>(
    g: &mut Graph<T>,
    chart: Var,
    target: &NearestIndex<T>,
) -> Result<Var> {
    let pts = g.value(chart).clone();
    if pts.nrows() == 0 {
        return invalid("chart is empty");
    }
    let tgt = target.points();
    let to_target: Vec<usize> = target.nearest_all(&pts).into_iter().map(|(i, _)| i).collect();
    let chart_index = NearestIndex::new(pts.clone())?;
    let to_chart: Rc<[usize]> = chart_index.nearest_all(tgt).into_iter().map(|(i, _)| i).collect();

    let matched = Array2::from_shape_fn(pts.dim(), |(r, c)| tgt[[to_target[r], c]]);
    let matched = g.leaf(matched);
    let d1 = g.sub(chart, matched);
    let d1 = g.square(d1);
    let t1 = g.sum(d1);
    let t1 = g.scale(t1, T::one() / T::from_usize_lossy(pts.nrows()));

    let picked = g.gather_rows(chart, to_chart);
    let fixed = g.leaf(tgt.clone());
    let d2 = g.sub(picked, fixed);
    let d2 = g.square(d2);
    let t2 = g.sum(d2);
    let t2 = g.scale(t2, T::one() / T::from_usize_lossy(tgt.nrows()));
    Ok(g.add(t1, t2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn small(patches: usize) -> ParamOptions {
        ParamOptions {
            hidden_width: 16,
            patch_count: patches,
            ..ParamOptions::default()
        }
    }

    #[test]
    fn unit_square_samples() {
        let a: Array2<f64> = sample_unit_square(4, &mut rng(1)).unwrap();
        let b: Array2<f64> = sample_unit_square(4, &mut rng(1)).unwrap();
        assert_eq!(a, b);
        let big: Array2<f64> = sample_unit_square(100_000, &mut rng(2)).unwrap();
        assert!(big.iter().all(|v| (0.0..1.0).contains(v)));
        let mean = big.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| (m - 0.5).abs() < 0.01));
        assert!(sample_unit_square::<f64, _>(0, &mut rng(0)).is_err());
    }

    #[test]
    fn planar_net_maps_into_plane() {
        let mut net = ParamNet::<f64>::new(3, small(1), &mut rng(3)).unwrap();
        let last = net.heads[0].layers.last_mut().unwrap();
        last.weight.row_mut(2).fill(0.0);
        last.bias.as_mut().unwrap()[[0, 2]] = 0.25;
        let c = generate_chart(&net, 50, ChartRole::Supervision, &mut rng(4)).unwrap();
        assert!(c.xyz.column(2).iter().all(|z| *z == 0.25));
        assert_eq!(c.uv.nrows(), c.xyz.nrows());
    }

    #[test]
    fn charts_are_deterministic_and_sized() {
        let net = ParamNet::<f64>::new(3, small(1), &mut rng(5)).unwrap();
        let a = generate_chart(&net, 2000, ChartRole::Regulated, &mut rng(6)).unwrap();
        let b = generate_chart(&net, 2000, ChartRole::Regulated, &mut rng(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.xyz.dim(), (2000, 3));
        let g = generate_chart(&net, 5000, ChartRole::Supervision, &mut rng(6)).unwrap();
        assert_eq!(g.xyz.nrows(), 5000);
    }

    #[test]
    fn patch_partition_and_single_patch_reduction() {
        assert_eq!(patch_counts(900, 3), vec![300, 300, 300]);
        assert_eq!(patch_counts(11, 5), vec![3, 2, 2, 2, 2]);
        let net = ParamNet::<f64>::new(3, small(1), &mut rng(7)).unwrap();
        let uv: Array2<f64> = sample_unit_square(40, &mut rng(8)).unwrap();
        assert_eq!(multi_patch_forward(&net, &uv).unwrap(), net.forward_patch(0, uv.view()).unwrap());
        assert!(ParamNet::<f64>::new(3, small(0), &mut rng(7)).is_err());
        assert!(ParamNet::<f64>::new(3, small(MAX_PATCHES + 1), &mut rng(7)).is_err());
    }

    #[test]
    fn recorded_multi_patch_matches_numeric() {
        let net = ParamNet::<f64>::new(3, small(3), &mut rng(9)).unwrap();
        let uv: Array2<f64> = sample_unit_square(31, &mut rng(10)).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let y = b.forward(&mut g, &uv, &patch_counts(31, 3));
        let direct = multi_patch_forward(&net, &uv).unwrap();
        assert!((g.value(y) - &direct).iter().all(|d| d.abs() < 1e-12));
        // each patch differs
        let p0 = net.forward_patch(0, uv.view()).unwrap();
        let p1 = net.forward_patch(1, uv.view()).unwrap();
        assert_ne!(p0, p1);
    }

    #[test]
    fn chamfer_examples() {
        let tgt = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 1.0]];
        let idx = NearestIndex::new(tgt.clone()).unwrap();
        let mut g = Graph::new();
        let same = g.leaf(tgt.clone());
        let l = chamfer_loss(&mut g, same, &idx).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let d = [0.01, -0.02, 0.005];
        let shifted = g.leaf(&tgt + &array![[d[0], d[1], d[2]]]);
        let l = chamfer_loss(&mut g, shifted, &idx).unwrap();
        let dd: f64 = d.iter().map(|v| v * v).sum();
        assert!((g.scalar(l) - 2.0 * dd).abs() < 1e-15);
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let tgt = Array2::from_shape_simple_fn((7, 3), || r.random_range(-1.0..1.0));
        let chart = Array2::from_shape_simple_fn((9, 3), || r.random_range(-1.0..1.0));
        let idx = NearestIndex::new(tgt).unwrap();
        let value = |c: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.leaf(c.clone());
            let l = chamfer_loss(&mut g, v, &idx).unwrap();
            g.scalar(l)
        };
        let mut g = Graph::new();
        let v = g.leaf(chart.clone());
        let l = chamfer_loss(&mut g, v, &idx).unwrap();
        let grad = g.backward(l, &[v]).unwrap().grads.remove(0);
        let h = 1e-7;
        for i in 0..9 {
            for d in 0..3 {
                let mut a = chart.clone();
                a[[i, d]] += h;
                let mut b = chart.clone();
                b[[i, d]] -= h;
                let fd = (value(&a) - value(&b)) / (2.0 * h);
                assert!((fd - grad[[i, d]]).abs() < 1e-6, "{fd} vs {}", grad[[i, d]]);
            }
        }
    }

    #[test]
    fn chart_continuity_bound() {
        let net = ParamNet::<f64>::new(3, small(1), &mut rng(12)).unwrap();
        let bound = net.lipschitz_bound(0);
        let mut r = rng(13);
        for _ in 0..100 {
            let u: f64 = r.random();
            let v: f64 = r.random();
            let a = array![[u, v]];
            let b = array![[u + 6e-5, v + 8e-5]];
            let d = &net.forward_patch(0, a.view()).unwrap() - &net.forward_patch(0, b.view()).unwrap();
            assert!(d.iter().map(|x| x * x).sum::<f64>().sqrt() <= bound * 1e-4);
        }
    }

    #[test]
    fn two_dimensional_chart_uses_unit_interval() {
        let net = ParamNet::<f64>::new(2, small(1), &mut rng(14)).unwrap();
        let c = generate_chart(&net, 10, ChartRole::Regulated, &mut rng(15)).unwrap();
        assert_eq!((c.uv.ncols(), c.xyz.ncols()), (1, 2));
    }
}
