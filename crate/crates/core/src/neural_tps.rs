//! Signed distance as a thin plate spline over learned point features.
//!
//! `f(q) = sum_i c_i psi(|e(p_i) - e(q)|^2) + h(e(q))`, where `e` is a deep
//! feature network shared between queries and the control points `p_i`,
//! `c` is one learnable weight per control and `h` is a linear head.

use std::rc::Rc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::elementwise::Elementwise;
use crate::autodiff::{
    gaussian_matrix, Activation, BoundMlp, Graph, Init, MlpParams, ParamTensors, Var,
};
use crate::error::{invalid, Error, Result};
use crate::Real;

/// Radial basis of the spline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// `r^2 ln r`
    #[default]
    ThinPlate,
    /// `|r|^3`
    Cubic,
}

impl BasisKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "thin_plate" | "thin-plate" => Ok(BasisKind::ThinPlate),
            "cubic" => Ok(BasisKind::Cubic),
            _ => invalid(format!("unknown basis '{s}'")),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            BasisKind::ThinPlate => "thin_plate",
            BasisKind::Cubic => "cubic",
        }
    }

    /// The basis as a function of the squared distance `d = r^2`, or of
    /// `r` itself when `squared_arg` is off.
    pub(crate) fn kernel<T: Real>(self, squared_arg: bool) -> LogPow<T> {
        let h = T::lit(0.5);
        match (self, squared_arg) {
            // psi(d) with d the squared distance
            (BasisKind::ThinPlate, true) => LogPow::new(T::lit(2.0), T::one(), T::zero()),
            (BasisKind::Cubic, true) => LogPow::new(T::lit(3.0), T::zero(), T::one()),
            // psi(sqrt(d)): r^2 ln r = d ln d / 2, r^3 = d^1.5
            (BasisKind::ThinPlate, false) => LogPow::new(T::one(), h, T::zero()),
            (BasisKind::Cubic, false) => LogPow::new(T::lit(1.5), T::zero(), T::one()),
        }
    }
}

const PSI_GUARD: f64 = 1e-30;

/// `x^p (a ln x + b)` for `x > 0`, and 0 below a tiny guard.
///
/// The family is closed under differentiation, so the spline can be
/// differentiated to any order inside the graph.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogPow<T> {
    power: T,
    log_coef: T,
    coef: T,
}

impl<T: Real> LogPow<T> {
    fn new(power: T, log_coef: T, coef: T) -> Self {
        Self {
            power,
            log_coef,
            coef,
        }
    }
}

impl<T: Real> Elementwise<T> for LogPow<T> {
    fn name(&self) -> &'static str {
        "logpow"
    }

    fn apply(&self, x: T) -> T {
        if !(x >= T::lit(PSI_GUARD)) {
            return T::zero();
        }
        let p = self.power;
        let xp = if p == T::zero() {
            T::one()
        } else if p == p.round() {
            x.powi(p.to_i32().unwrap_or(0))
        } else {
            x.powf(p)
        };
        let inner = if self.log_coef == T::zero() {
            self.coef
        } else {
            self.log_coef * x.ln() + self.coef
        };
        xp * inner
    }

    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>> {
        let a = self.log_coef * self.power;
        let b = self.coef * self.power + self.log_coef;
        if a == T::zero() && b == T::zero() {
            return None;
        }
        Some(Rc::new(LogPow::new(self.power - T::one(), a, b)))
    }
}

/// The radial basis at a non-negative argument: `r^2 ln r` or `r^3`, with `psi(0) = 0`.
pub fn psi<T: Real>(r: T, kind: BasisKind) -> Result<T> {
    if !(r >= T::zero()) {
        return invalid(format!("basis argument must be non-negative, got {r}"));
    }
    // in terms of r itself: the unsquared kernel of r^2
    Ok(kind.kernel::<T>(false).apply(r * r))
}

/// Network shape and ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpsOptions {
    pub feature_dim: usize,
    pub hidden_width: usize,
    /// Fully connected layers in the feature network.
    pub feature_layers: usize,
    pub activation: ActivationKind,
    pub basis: BasisKind,
    /// Feed the squared feature distance to the basis (as the spline is
    /// written); `false` feeds the plain distance.
    pub squared_arg: bool,
    /// `false` replaces the feature network by the identity on coordinates.
    pub use_features: bool,
    /// `false` removes the linear displacement head.
    pub use_displacement: bool,
    /// Radius of the sphere the field approximates at initialization.
    pub init_radius: f64,
}

impl Default for TpsOptions {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            hidden_width: 128,
            feature_layers: 10,
            activation: ActivationKind::Softplus { beta: 100.0 },
            basis: BasisKind::ThinPlate,
            squared_arg: true,
            use_features: true,
            use_displacement: true,
            init_radius: 0.3,
        }
    }
}

/// Serializable hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActivationKind {
    Relu,
    Softplus { beta: f64 },
}

impl ActivationKind {
    pub fn activation(self) -> Activation {
        match self {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Softplus { beta } => Activation::Softplus { beta },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FeatureCache<T> {
    version: u64,
    features: Array2<T>,
    sq_norms: Array2<T>,
}

/// The signed distance network.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsNet<T> {
    pub options: TpsOptions,
    /// Control points, one per row; the same points the field should vanish on.
    controls: Array2<T>,
    feature_net: Option<MlpParams<T>>,
    /// Spline weights as a `1 x I` row.
    weights: Array2<T>,
    head: Option<MlpParams<T>>,
    version: u64,
    cache: Option<FeatureCache<T>>,
}

impl<T: Real> TpsNet<T> {
    /// Builds the network so that at initialization the field approximates
    /// `|x| - init_radius`, negative inside.
    pub fn new<R: Rng>(controls: Array2<T>, options: TpsOptions, rng: &mut R) -> Result<Self> {
        let dim = controls.ncols();
        if controls.nrows() == 0 || dim == 0 {
            return invalid("neural spline needs at least one control point");
        }
        if options.use_features && (options.feature_layers == 0 || options.feature_dim == 0) {
            return invalid("feature network needs at least one layer and one feature");
        }
        let act = options.activation.activation();
        let feature_net = if options.use_features {
            let mut dims = vec![dim];
            dims.extend(std::iter::repeat_n(options.hidden_width, options.feature_layers - 1));
            dims.push(options.feature_dim);
            let mut net = MlpParams::new(&dims, act, Init::Gaussian, rng)?;
            if options.feature_layers > 1 && options.hidden_width == options.feature_dim {
                // features start as the last rectified hidden layer
                let last = net.layers.last_mut().expect("non-empty");
                last.weight = Array2::eye(options.feature_dim);
            }
            Some(net)
        } else {
            None
        };
        let feat_dim = if options.use_features {
            options.feature_dim
        } else {
            dim
        };
        let head = if options.use_displacement {
            let mut h = MlpParams::new(&[feat_dim, 1], Activation::Identity, Init::Gaussian, rng)?;
            let mean = (std::f64::consts::PI / feat_dim as f64).sqrt();
            h.layers[0].weight = gaussian_matrix(rng, 1, feat_dim, mean, 1e-5);
            h.layers[0].bias = Some(Array2::from_elem((1, 1), T::lit(-options.init_radius)));
            Some(h)
        } else {
            None
        };
        Ok(Self {
            options,
            weights: Array2::zeros((1, controls.nrows())),
            controls,
            feature_net,
            head,
            version: 0,
            cache: None,
        })
    }

    /// Number of control points.
    pub fn len(&self) -> usize {
        self.controls.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.controls.ncols()
    }

    pub fn controls(&self) -> &Array2<T> {
        &self.controls
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_net
            .as_ref()
            .map(|n| n.out_dim())
            .unwrap_or(self.dim())
    }

    pub fn feature_net(&self) -> Option<&MlpParams<T>> {
        self.feature_net.as_ref()
    }

    pub fn head(&self) -> Option<&MlpParams<T>> {
        self.head.as_ref()
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }

    /// Replaces the spline weights; invalidates nothing but the weights.
    pub fn set_weights(&mut self, w: Array2<T>) -> Result<()> {
        if w.dim() != self.weights.dim() {
            return invalid("spline weight shape mismatch");
        }
        self.weights = w;
        Ok(())
    }

    /// Reassembles a network from stored parts.
    pub fn from_parts(
        options: TpsOptions,
        controls: Array2<T>,
        feature_net: Option<MlpParams<T>>,
        weights: Array2<T>,
        head: Option<MlpParams<T>>,
    ) -> Result<Self> {
        if weights.dim() != (1, controls.nrows()) {
            return invalid("one spline weight per control point expected");
        }
        if let Some(f) = &feature_net {
            f.check_chain()?;
            if f.in_dim() != controls.ncols() {
                return invalid("feature network input does not match control dimension");
            }
        }
        let feat = feature_net
            .as_ref()
            .map(|f| f.out_dim())
            .unwrap_or(controls.ncols());
        if let Some(h) = &head {
            h.check_chain()?;
            if h.in_dim() != feat || h.out_dim() != 1 {
                return invalid("displacement head shape mismatch");
            }
        }
        Ok(Self {
            options,
            controls,
            feature_net,
            weights,
            head,
            version: 0,
            cache: None,
        })
    }

    /// Features of many points, one per row.
    pub fn embed_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        match &self.feature_net {
            Some(n) => n.forward_batch(x),
            None => {
                if x.ncols() != self.dim() {
                    return invalid("point dimension mismatch");
                }
                Ok(x.to_owned())
            }
        }
    }

    pub fn embed(&self, point: &[T]) -> Result<Vec<T>> {
        let x = ArrayView2::from_shape((1, point.len()), point)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self.embed_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Recomputes the control features for the current parameters.
    pub fn refresh_features(&mut self) -> Result<()> {
        let features = self.embed_batch(self.controls.view())?;
        let sq_norms = features
            .map_axis(Axis(1), |r| r.dot(&r))
            .insert_axis(Axis(0));
        self.cache = Some(FeatureCache {
            version: self.version,
            features,
            sq_norms,
        });
        Ok(())
    }

    pub fn features_fresh(&self) -> bool {
        self.cache.as_ref().is_some_and(|c| c.version == self.version)
    }

    fn fresh_cache(&self) -> Result<&FeatureCache<T>> {
        match &self.cache {
            Some(c) if c.version == self.version => Ok(c),
            _ => Err(Error::Internal(
                "control features are stale; refresh them after changing the feature network"
                    .into(),
            )),
        }
    }

    fn spline_batch(&self, cache: &FeatureCache<T>, eq: &Array2<T>) -> Array2<T> {
        let kernel = self.options.basis.kernel::<T>(self.options.squared_arg);
        let sq = eq.map_axis(Axis(1), |r| r.dot(&r)).insert_axis(Axis(1));
        let mut d = eq.dot(&cache.features.t());
        let two = T::lit(2.0);
        for ((i, j), v) in d.indexed_iter_mut() {
            let r2 = sq[[i, 0]] + cache.sq_norms[[0, j]] - two * *v;
            *v = kernel.apply(r2.max(T::zero()));
        }
        d.dot(&self.weights.t())
    }

    /// The spline term for one query feature vector; needs fresh control features.
    pub fn tps_interpolate(&self, q_feature: &[T]) -> Result<T> {
        let cache = self.fresh_cache()?;
        if q_feature.len() != cache.features.ncols() {
            return invalid("feature dimension mismatch");
        }
        let eq = Array2::from_shape_vec((1, q_feature.len()), q_feature.to_vec())
            .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(self.spline_batch(cache, &eq)[[0, 0]])
    }

    /// Field values at many points; needs fresh control features.
    pub fn sdf_batch(&self, q: ArrayView2<T>) -> Result<Vec<T>> {
        let cache = self.fresh_cache()?;
        let mut out = Vec::with_capacity(q.nrows());
        const CHUNK: usize = 2048;
        for start in (0..q.nrows()).step_by(CHUNK) {
            let block = q.slice(ndarray::s![start..(start + CHUNK).min(q.nrows()), ..]);
            let eq = self.embed_batch(block)?;
            let mut f = self.spline_batch(cache, &eq);
            if let Some(h) = &self.head {
                f += &h.forward_batch(eq.view())?;
            }
            out.extend(f.iter().copied());
        }
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("field is not finite at query {i}")));
        }
        Ok(out)
    }

    /// Field value at one point. Uses cached control features when fresh and
    /// recomputes them otherwise.
    pub fn sdf_eval(&self, q: &[T]) -> Result<T> {
        let x = ArrayView2::from_shape((1, q.len()), q)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        if self.features_fresh() {
            return Ok(self.sdf_batch(x)?[0]);
        }
        let mut tmp = self.clone();
        tmp.refresh_features()?;
        Ok(tmp.sdf_batch(x)?[0])
    }

    /// Field values and spatial gradients, through the recorded graph.
    pub fn sdf_with_gradient(&self, q: &Array2<T>) -> Result<(Vec<T>, Array2<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let qv = g.leaf(q.clone());
        let f = bound.sdf(&mut g, qv);
        let total = g.sum(f);
        let grad = g.grad(total, None, &[qv])[0]
            .map(|v| g.value(v).clone())
            .unwrap_or_else(|| Array2::zeros(q.dim()));
        Ok((g.value(f).iter().copied().collect(), grad))
    }

    /// Registers every tensor as a graph leaf and records the control features.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundTps<T> {
        let feature_net = self.feature_net.as_ref().map(|n| n.bind(g));
        let weights = g.leaf(self.weights.clone());
        let head = self.head.as_ref().map(|n| n.bind(g));
        let controls = g.leaf(self.controls.clone());
        let mut b = BoundTps {
            feature_net,
            weights,
            head,
            control_features: controls,
            control_sq: controls,
            kernel: Rc::new(self.options.basis.kernel::<T>(self.options.squared_arg)),
        };
        let cf = b.embed(g, controls);
        let sq = g.mul(cf, cf);
        let sq = g.sum_rows(sq);
        b.control_features = cf;
        b.control_sq = g.transpose(sq);
        b
    }
}

impl<T: Real> ParamTensors<T> for TpsNet<T> {
    fn tensors(&self) -> Vec<&Array2<T>> {
        let mut out = Vec::new();
        if let Some(n) = &self.feature_net {
            out.extend(n.tensors());
        }
        out.push(&self.weights);
        if let Some(n) = &self.head {
            out.extend(n.tensors());
        }
        out
    }

    /// Invalidates cached control features.
    fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.version += 1;
        let mut out = Vec::new();
        if let Some(n) = &mut self.feature_net {
            out.extend(n.tensors_mut());
        }
        out.push(&mut self.weights);
        if let Some(n) = &mut self.head {
            out.extend(n.tensors_mut());
        }
        out
    }
}

/// A [`TpsNet`] recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundTps<T: Real> {
    pub feature_net: Option<BoundMlp>,
    pub weights: Var,
    pub head: Option<BoundMlp>,
    /// `I x F` control features.
    pub control_features: Var,
    /// `1 x I` squared feature norms of the controls.
    pub control_sq: Var,
    kernel: Rc<LogPow<T>>,
}

impl<T: Real> BoundTps<T> {
    /// Leaves in the same order as [`ParamTensors::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(n) = &self.feature_net {
            out.extend(n.vars());
        }
        out.push(self.weights);
        if let Some(n) = &self.head {
            out.extend(n.vars());
        }
        out
    }

    pub fn embed(&self, g: &mut Graph<T>, x: Var) -> Var {
        match &self.feature_net {
            Some(n) => n.forward(g, x),
            None => x,
        }
    }

    /// Spline term `n x 1` for query features `n x F`.
    pub fn spline(&self, g: &mut Graph<T>, eq: Var) -> Var {
        let sq = g.mul(eq, eq);
        let sq = g.sum_rows(sq);
        let cross = g.matmul_t(eq, self.control_features, false, true);
        let d = g.scale(cross, T::lit(-2.0));
        let d = g.add_col(d, sq);
        let d = g.add_row(d, self.control_sq);
        // cancellation can leave tiny negatives
        let d = g.relu(d);
        let k: Rc<dyn Elementwise<T>> = self.kernel.clone();
        let basis = g.map(d, k);
        g.matmul_t(basis, self.weights, false, true)
    }

    /// Field values `n x 1` at query rows `q`.
    pub fn sdf(&self, g: &mut Graph<T>, q: Var) -> Var {
        let eq = self.embed(g, q);
        let s = self.spline(g, eq);
        match &self.head {
            Some(h) => {
                let d = h.forward(g, eq);
                g.add(s, d)
            }
            None => s,
        }
    }
}

/// Weights `w` with `sum_j w_j psi(|x_i - x_j|) = v_i` at every node.
///
/// A plain radial interpolant without polynomial terms, solved densely.
pub fn classic_tps_solve<T: Real>(
    positions: &Array2<T>,
    values: &[T],
    kind: BasisKind,
) -> Result<Vec<T>> {
    let n = positions.nrows();
    if n < 3 {
        return invalid("interpolation needs at least three nodes");
    }
    if values.len() != n {
        return invalid("one value per node expected");
    }
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let d = &positions.row(i) - &positions.row(j);
            let r = d.dot(&d).sqrt();
            if i != j && r == T::zero() {
                return invalid(format!("nodes {j} and {i} coincide"));
            }
            a[[i, j]] = psi(r, kind)?;
        }
    }
    solve_dense(a, values.to_vec())
}

/// Evaluates the interpolant built by [`classic_tps_solve`] at `x`.
pub fn classic_tps_eval<T: Real>(
    positions: &Array2<T>,
    weights: &[T],
    x: &[T],
    kind: BasisKind,
) -> Result<T> {
    let mut s = T::zero();
    for (row, w) in positions.rows().into_iter().zip(weights) {
        let r = row
            .iter()
            .zip(x)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>()
            .sqrt();
        s += *w * psi(r, kind)?;
    }
    Ok(s)
}

/// Gaussian elimination with partial pivoting.
fn solve_dense<T: Real>(mut a: Array2<T>, mut b: Vec<T>) -> Result<Vec<T>> {
    let n = b.len();
    let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tiny = scale * T::lit(1e-14);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap())
            .expect("non-empty range");
        if !(a[[piv, col]].abs() > tiny) {
            return Err(Error::Numerical(format!(
                "interpolation system is singular at column {col}"
            )));
        }
        if piv != col {
            for k in 0..n {
                a.swap([piv, k], [col, k]);
            }
            b.swap(piv, col);
        }
        for i in col + 1..n {
            let f = a[[i, col]] / a[[col, col]];
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[[col, k]];
                a[[i, k]] -= f * v;
            }
            let v = b[col];
            b[i] -= f * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[[i, k]] * x[k];
        }
        x[i] = s / a[[i, i]];
    }
    Ok(x)
}
