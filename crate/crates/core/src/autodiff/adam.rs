use ndarray::{Array2, Zip};

use super::mlp::ParamTensors;
use crate::error::{invalid, Error, Result};
use crate::Real;

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamTensors<T> + ?Sized>(params: &P) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(|t| t.dim()).collect();
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Real, P: ParamTensors<T> + ?Sized>(
    params: &mut P,
    grads: &[Array2<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if !(lr > T::zero()) {
        return invalid("learning rate must be positive");
    }
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return invalid(format!(
            "adam: {} tensors, {} gradients, {} moments",
            tensors.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (k, (t, g)) in tensors.iter().zip(grads).enumerate() {
        if t.dim() != g.dim() {
            return invalid(format!("adam: gradient {k} shape {:?} vs {:?}", g.dim(), t.dim()));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("adam: non-finite gradient in tensor {k}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for ((p, g), (m, v)) in tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Layer, MlpParams};
    use ndarray::array;

    fn one_tensor(w: Array2<f64>) -> MlpParams<f64> {
        MlpParams {
            layers: vec![Layer {
                weight: w,
                bias: None,
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_tensor(array![[1.0, -2.0]]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Array2::zeros((1, 2))], &mut s, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = one_tensor(array![[1.0, -2.0, 0.5]]);
        let mut s = AdamState::new(&p);
        let g = array![[3.0, -0.01, 250.0]];
        adam_step(&mut p, &[g.clone()], &mut s, 1e-3).unwrap();
        // step 1: m_hat = g, v_hat = g^2 → update = lr * g / (|g| + eps)
        let expect = [1.0 - 1e-3 * 3.0 / (3.0 + 1e-8), -2.0 + 1e-3 * 0.01 / (0.01 + 1e-8), 0.5 - 1e-3 * 250.0 / (250.0 + 1e-8)];
        for (a, e) in p.layers[0].weight.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn nan_gradient_is_numerical_error() {
        let mut p = one_tensor(array![[1.0]]);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[array![[f64::NAN]]], &mut s, 0.1).unwrap_err();
        assert_eq!(err.class(), "numerical");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = array![[3.0, -1.0, 0.25, 2.0]];
        let mut p = one_tensor(Array2::zeros((1, 4)));
        let mut s = AdamState::new(&p);
        let loss = |w: &Array2<f64>| (w - &target).mapv(|d| d * d).sum();
        let start = loss(&p.layers[0].weight);
        for _ in 0..500 {
            let g = (&p.layers[0].weight - &target) * 2.0;
            adam_step(&mut p, &[g], &mut s, 0.05).unwrap();
        }
        let end = loss(&p.layers[0].weight);
        assert!(end < 1e-4 * start, "{end} vs {start}");
    }
}
