//! Dense multilayer perceptrons: parameters, initialization, numeric and
//! recorded forward passes.

use std::rc::Rc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::elementwise::{Elementwise, Relu, Softplus};
use super::graph::{Graph, Var};
use crate::error::{invalid, Result};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus { beta: f64 },
}

impl Activation {
    pub fn tag(&self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::Softplus { beta } => format!("softplus:{beta}"),
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            t => t
                .strip_prefix("softplus:")
                .and_then(|b| b.parse().ok())
                .map(|beta| Activation::Softplus { beta }),
        }
    }

    fn function<T: Real>(&self) -> Option<Rc<dyn Elementwise<T>>> {
        match *self {
            Activation::Identity => None,
            Activation::Relu => Some(Rc::new(Relu)),
            Activation::Softplus { beta } => Some(Rc::new(Softplus { beta: T::lit(beta) })),
        }
    }
}

/// One affine layer `y = act(x W^T + b)`; `weight` is `out x in`, `bias` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array2<T>>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Weight initialization scheme for a freshly built network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(gain * 3 / fan_in)`; gain 2 for rectifiers.
    KaimingUniform,
    /// Gaussian `N(0, 2 / fan_out)` hidden weights with zero bias.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layers: Vec<Layer<T>>,
}

/// Anything that owns an ordered list of trainable tensors.
pub trait ParamTensors<T> {
    fn tensors(&self) -> Vec<&Array2<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl<T: Real> ParamTensors<T> for MlpParams<T> {
    fn tensors(&self) -> Vec<&Array2<T>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }
}

fn uniform_matrix<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        T::lit(rng.random_range(-bound..=bound))
    })
}

pub(crate) fn gaussian_matrix<T: Real, R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
) -> Array2<T> {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(mean, std).expect("valid normal");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(n.sample(rng)))
}

impl<T: Real> MlpParams<T> {
    /// Builds `dims.len() - 1` layers with `hidden` activation everywhere but
    /// the last layer, which is linear.
    pub fn new<R: Rng>(dims: &[usize], hidden: Activation, init: Init, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return invalid(format!("bad layer dimensions {dims:?}"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let activation = if i + 1 == n {
                    Activation::Identity
                } else {
                    hidden
                };
                let (weight, bias) = match init {
                    Init::KaimingUniform => {
                        let gain = if i + 1 == n { 1.0 } else { 2.0 };
                        let bound = (3.0 * gain / fan_in as f64).sqrt();
                        let bias_bound = 1.0 / (fan_in as f64).sqrt();
                        (
                            uniform_matrix(rng, fan_out, fan_in, bound),
                            uniform_matrix(rng, 1, fan_out, bias_bound),
                        )
                    }
                    Init::Gaussian => (
                        gaussian_matrix(rng, fan_out, fan_in, 0.0, (2.0 / fan_out as f64).sqrt()),
                        Array2::zeros((1, fan_out)),
                    ),
                };
                Layer {
                    weight,
                    bias: Some(bias),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn check_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return invalid("network without layers");
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                ));
            }
        }
        for l in &self.layers {
            if let Some(b) = &l.bias {
                if b.dim() != (1, l.out_dim()) {
                    return invalid("bias shape does not match layer output");
                }
            }
        }
        Ok(())
    }

    /// Batched numeric forward pass, rows are samples.
    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_dim() {
            return invalid(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.in_dim()
            ));
        }
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight.t());
            if let Some(b) = &l.bias {
                z += b;
            }
            if let Some(f) = l.activation.function::<T>() {
                z.mapv_inplace(|v| f.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: g.leaf(l.weight.clone()),
                bias: l.bias.as_ref().map(|b| g.leaf(b.clone())),
                activation: l.activation,
            })
            .collect();
        BoundMlp { layers }
    }

    /// Upper bound on the Lipschitz constant: product of per-layer spectral
    /// norms, estimated by power iteration. Rectifiers and softplus are 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> T {
        self.layers
            .iter()
            .map(|l| spectral_norm(&l.weight))
            .fold(T::one(), |acc, s| acc * s)
    }
}

/// Largest singular value of `w` (power iteration on `w^T w`), padded by a
/// relative margin so it is a safe upper bound.
pub fn spectral_norm<T: Real>(w: &Array2<T>) -> T {
    let mut v = Array2::from_elem((w.ncols(), 1), T::one());
    let mut sigma = T::zero();
    for _ in 0..200 {
        let u = w.dot(&v);
        let wtu = w.t().dot(&u);
        let norm = wtu.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm == T::zero() {
            return T::zero();
        }
        v = wtu.mapv(|x| x / norm);
        let wu = w.dot(&v);
        sigma = wu.iter().map(|x| *x * *x).sum::<T>().sqrt();
    }
    sigma * T::lit(1.0 + 1e-6)
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    pub activation: Activation,
}

/// An [`MlpParams`] whose tensors live as leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLayer>,
}

impl BoundMlp {
    /// Leaves in the same order as [`ParamTensors::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight);
            if let Some(b) = l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.forward_range(g, x, 0..self.layers.len())
    }

    /// Applies layers `range` only; used for shared trunks with separate heads.
    pub fn forward_range<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        range: std::ops::Range<usize>,
    ) -> Var {
        let mut h = x;
        for l in &self.layers[range] {
            let mut z = g.matmul_t(h, l.weight, false, true);
            if let Some(b) = l.bias {
                z = g.add_row(z, b);
            }
            if let Some(f) = l.activation.function::<T>() {
                z = g.map(z, f);
            }
            h = z;
        }
        h
    }
}

/// Gradient of a scalar-output network with respect to its input.
pub fn input_gradient<T: Real>(params: &MlpParams<T>, input: &[T]) -> Result<Vec<T>> {
    if params.out_dim() != 1 {
        return invalid(format!(
            "input gradient needs a scalar output, network has {}",
            params.out_dim()
        ));
    }
    if input.len() != params.in_dim() {
        return invalid("input dimension mismatch");
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.leaf(Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap());
    let y = bound.forward(&mut g, x);
    let dx = g.grad(y, None, &[x])[0];
    Ok(match dx {
        Some(d) => g.value(d).iter().copied().collect(),
        None => vec![T::zero(); input.len()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn single(weight: Array2<f64>, bias: Array2<f64>) -> MlpParams<f64> {
        MlpParams {
            layers: vec![Layer {
                weight,
                bias: Some(bias),
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(Array2::eye(3), Array2::zeros((1, 3)));
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn scaled_identity_plus_bias() {
        let net = single(Array2::eye(3) * 2.0, Array2::ones((1, 3)));
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![3.0, -3.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = single(Array2::eye(3), Array2::zeros((1, 3)));
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    /// Independent scalar-loop evaluation of the same weights.
    fn straight_line(net: &MlpParams<f64>, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &net.layers {
            let mut z = vec![0.0; l.out_dim()];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = l.bias.as_ref().map(|b| b[[0, o]]).unwrap_or(0.0);
                for (i, hi) in h.iter().enumerate() {
                    acc += l.weight[[o, i]] * hi;
                }
                *zo = match l.activation {
                    Activation::Identity => acc,
                    Activation::Relu => acc.max(0.0),
                    Activation::Softplus { beta } => (1.0 + (beta * acc).exp()).ln() / beta,
                };
            }
            h = z;
        }
        h
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        let mut r = rng();
        for act in [Activation::Relu, Activation::Softplus { beta: 10.0 }] {
            let net = MlpParams::<f64>::new(&[3, 7, 5, 2], act, Init::KaimingUniform, &mut r).unwrap();
            for k in 0..20 {
                let x = [0.1 * k as f64 - 1.0, 0.3, -0.7 + 0.05 * k as f64];
                let a = net.forward(&x).unwrap();
                let b = straight_line(&net, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn recorded_forward_matches_numeric_forward() {
        let mut r = rng();
        let net = MlpParams::<f64>::new(&[2, 6, 6, 3], Activation::Relu, Init::KaimingUniform, &mut r).unwrap();
        let x = gaussian_matrix::<f64, _>(&mut r, 11, 2, 0.0, 1.0);
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let xv = g.leaf(x.clone());
        let y = b.forward(&mut g, xv);
        assert_eq!(g.value(y), &net.forward_batch(x.view()).unwrap());
    }

    #[test]
    fn linear_input_gradient_is_weight() {
        let net = single(ndarray::array![[0.5, -1.0, 2.0]], ndarray::array![[0.3]]);
        for x in [[0.0, 0.0, 0.0], [1.0, 5.0, -3.0]] {
            assert_eq!(input_gradient(&net, &x).unwrap(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn squared_norm_gradient_from_primitives() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ndarray::array![[1.0, -2.0, 3.0]]);
        let sq = g.square(x);
        let f = g.sum(sq);
        let dx = g.grad(f, None, &[x])[0].unwrap();
        assert_eq!(g.value(dx), &ndarray::array![[2.0, -4.0, 6.0]]);
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mut r = rng();
        let net = MlpParams::<f64>::new(
            &[3, 16, 16, 1],
            Activation::Softplus { beta: 10.0 },
            Init::KaimingUniform,
            &mut r,
        )
        .unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..64 {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let an = input_gradient(&net, &x).unwrap();
            for d in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (net.forward(&xp).unwrap()[0] - net.forward(&xm).unwrap()[0]) / (2.0 * h);
                let rel = (fd - an[d]).abs() / an[d].abs().max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn input_gradient_scales_with_output_weights() {
        let mut r = rng();
        let mut net = MlpParams::<f64>::new(&[3, 8, 1], Activation::Relu, Init::KaimingUniform, &mut r).unwrap();
        let x = [0.2, -0.4, 0.9];
        let g1 = input_gradient(&net, &x).unwrap();
        net.layers.last_mut().unwrap().weight *= 4.0;
        let g4 = input_gradient(&net, &x).unwrap();
        for (a, b) in g1.iter().zip(&g4) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_network_rejected_for_input_gradient() {
        let net = single(Array2::eye(2), Array2::zeros((1, 2)));
        assert!(input_gradient(&net, &[1.0, 1.0]).is_err());
    }
}
