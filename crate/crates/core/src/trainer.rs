//! Joint optimization of the chart and the spline field.
//!
//! Each step maps fresh parameter samples through the chart (a regulated
//! set fitted to the input, and a supervision set used as pull targets),
//! draws Gaussian queries around chart or input points, pulls every query
//! onto the current zero level set and penalizes its distance to the nearest
//! target with a confidence weight.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::elementwise::Exp;
use crate::autodiff::{adam_step, AdamState, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{local_sigma, NearestIndex, PointCloud};
use crate::neural_tps::{ActivationKind, BasisKind, BoundTps, TpsNet, TpsOptions};
use crate::surface_param::{
    multi_patch_forward, patch_counts, sample_unit_cube, BoundParam, ChartSample, ChartRole,
    ParamNet, ParamOptions,
};
use crate::Real;

/// Gradients at or below this norm make a query unusable for pulling.
pub const GRAD_EPS: f64 = 1e-12;

/// Where queries are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum QueryAnchor {
    /// Around the regulated chart points.
    #[default]
    S,
    /// Around the input points.
    P,
}

/// Switches that remove or alter parts of the method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Drop the Chamfer term; pull toward the input only.
    pub no_cd: bool,
    /// Drop the surface term.
    pub no_surf: bool,
    /// Let the pull loss backpropagate into the chart.
    pub grad_diff: bool,
    /// Fit the chart first, freeze it, then fit the field.
    pub separate: bool,
    pub basis_kind: BasisKind,
    /// Spline and head act on raw coordinates.
    pub no_feature: bool,
    /// Remove the displacement head.
    pub no_disp: bool,
    pub patch_count: usize,
    /// Feed plain rather than squared feature distances to the basis.
    pub unsquared_arg: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            no_cd: false,
            no_surf: false,
            grad_diff: false,
            separate: false,
            basis_kind: BasisKind::ThinPlate,
            no_feature: false,
            no_disp: false,
            patch_count: 1,
            unsquared_arg: false,
        }
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the surface term.
    pub alpha: f64,
    /// Weight of the pull term.
    pub beta: f64,
    /// Decay of the confidence weight.
    pub delta: f64,
    pub iterations: usize,
    pub lr: f64,
    /// Fractions of `iterations` after which the rate is halved.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub seed: u64,
    pub queries_per_iter: usize,
    /// Neighbour rank used for the per-anchor query spread.
    pub sigma_k: usize,
    /// Multiplier on the per-anchor query spread.
    pub sigma_scale: f64,
    /// Spread multiplier for curves in the plane, where `sigma_k` neighbours
    /// cover a much shorter stretch of the shape than on a surface.
    pub sigma_scale_2d: f64,
    pub query_anchor: QueryAnchor,
    /// Regulated chart points per step.
    pub chart_points: usize,
    /// Supervision chart points per step.
    pub supervision_points: usize,
    /// Chart-only steps before the field is trained (separate mode).
    pub separate_iterations: usize,
    pub log_every: usize,
    pub feature_dim: usize,
    pub feature_layers: usize,
    pub feature_width: usize,
    pub activation: ActivationKind,
    pub init_radius: f64,
    pub chart_width: usize,
    pub chart_layers: usize,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            delta: 50.0,
            iterations: 2000,
            lr: 1e-3,
            lr_milestones: vec![0.5, 0.75],
            lr_gamma: 0.5,
            seed: 0,
            queries_per_iter: 1000,
            sigma_k: 50,
            sigma_scale: 1.0,
            sigma_scale_2d: 5.0,
            query_anchor: QueryAnchor::S,
            chart_points: 2000,
            supervision_points: 5000,
            separate_iterations: 1000,
            log_every: 50,
            feature_dim: 64,
            feature_layers: 10,
            feature_width: 64,
            activation: ActivationKind::Softplus { beta: 100.0 },
            init_radius: 0.3,
            chart_width: 128,
            chart_layers: 5,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.alpha) || !nonneg(self.beta) {
            return invalid("alpha and beta must be non-negative");
        }
        if !(self.delta > 0.0) {
            return invalid("delta must be positive");
        }
        if self.iterations == 0 {
            return invalid("iterations must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_gamma > 0.0) {
            return invalid("learning rate and decay must be positive");
        }
        if self.queries_per_iter == 0 || self.chart_points == 0 || self.supervision_points == 0 {
            return invalid("sample counts must be positive");
        }
        if self.sigma_k == 0 || !(self.sigma_scale > 0.0) || !(self.sigma_scale_2d > 0.0) {
            return invalid("query spread parameters must be positive");
        }
        if self.log_every == 0 {
            return invalid("log interval must be positive");
        }
        if self.ablations.patch_count == 0 {
            return invalid("patch count must be positive");
        }
        Ok(())
    }

    pub fn tps_options(&self) -> TpsOptions {
        TpsOptions {
            feature_dim: self.feature_dim,
            hidden_width: self.feature_width,
            feature_layers: self.feature_layers,
            activation: self.activation,
            basis: self.ablations.basis_kind,
            squared_arg: !self.ablations.unsquared_arg,
            use_features: !self.ablations.no_feature,
            use_displacement: !self.ablations.no_disp,
            init_radius: self.init_radius,
        }
    }

    pub fn param_options(&self) -> ParamOptions {
        ParamOptions {
            hidden_width: self.chart_width,
            layers: self.chart_layers,
            head_layers: 2.min(self.chart_layers.saturating_sub(1)).max(1),
            patch_count: self.ablations.patch_count,
        }
    }

    /// Learning rate in effect at `iteration` (0-based) of a phase of `total` steps.
    pub fn lr_at(&self, iteration: usize, total: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|m| iteration as f64 >= **m * total as f64)
            .count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub cd: f64,
    pub surf: f64,
    pub pull: f64,
    pub total: f64,
    /// Fraction of queries skipped for a vanishing gradient.
    pub skip_rate: f64,
}

impl LossRecord {
    pub const HEADER: &'static str = "iter\tL_CD\tL_Surf\tL_Pull\ttotal\tskip_rate";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.6}",
            self.iter, self.cd, self.surf, self.pull, self.total, self.skip_rate
        )
    }
}

/// `q - f * grad / |grad|`; fails when the gradient vanishes.
pub fn pull<T: Real>(q: &[T], f: T, grad: &[T]) -> Result<Vec<T>> {
    if q.len() != grad.len() {
        return invalid("query and gradient dimensions differ");
    }
    let norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
    if !(norm > T::lit(GRAD_EPS)) {
        return Err(Error::Numerical("field gradient vanishes at the query".into()));
    }
    Ok(q.iter().zip(grad).map(|(x, g)| *x - f * *g / norm).collect())
}

/// `exp(-delta |g - p|^2)` with `p` the input point nearest to `g`.
pub fn confidence_weight<T: Real>(g: &[T], input: &NearestIndex<T>, delta: T) -> T {
    let q = ndarray::ArrayView1::from(g);
    let (_, d2) = input.nearest_sq(q);
    (-delta * d2).exp()
}

/// Sum of squared field values at the control points.
pub fn loss_surf<T: Real>(g: &mut Graph<T>, tps: &BoundTps<T>) -> Var {
    let f = sdf_at_controls(g, tps);
    let f2 = g.mul(f, f);
    g.sum(f2)
}

/// Field values at the control points, reusing their recorded features.
fn sdf_at_controls<T: Real>(g: &mut Graph<T>, tps: &BoundTps<T>) -> Var {
    let cf = tps.control_features;
    let s = tps.spline(g, cf);
    match &tps.head {
        Some(h) => {
            let d = h.forward(g, cf);
            g.add(s, d)
        }
        None => s,
    }
}

/// Pull targets of one step: the supervision chart (maybe recorded) and the input.
pub struct PullTargets<'a, T> {
    /// Numeric supervision points (none when pulling toward the input only).
    pub supervision: Option<&'a Array2<T>>,
    /// Recorded supervision points, for gradient flow into the chart.
    pub supervision_var: Option<Var>,
    pub input: &'a NearestIndex<T>,
    pub delta: T,
}

/// Result of [`loss_pull`].
pub struct PullLoss {
    pub loss: Var,
    pub skipped: usize,
    pub queries: usize,
}

/// Confidence-weighted squared distance between pulled queries and the
/// targets nearest to the unpulled queries, averaged over usable queries.
pub fn loss_pull<T: Real>(
    g: &mut Graph<T>,
    tps: &BoundTps<T>,
    queries: &Array2<T>,
    targets: &PullTargets<'_, T>,
) -> Result<PullLoss> {
    let n = queries.nrows();
    let dim = queries.ncols();
    let input = targets.input.points();
    let n_sup = targets.supervision.map(|s| s.nrows()).unwrap_or(0);
    // nearest target among supervision then input rows
    let all = match targets.supervision {
        Some(s) => ndarray::concatenate(Axis(0), &[s.view(), input.view()])
            .map_err(|e| Error::Internal(e.to_string()))?,
        None => input.clone(),
    };
    let index = NearestIndex::new(all.clone())?;
    let matches: Vec<usize> = queries
        .rows()
        .into_iter()
        .map(|q| index.nearest_sq(q).0)
        .collect();
    let weights: Vec<T> = matches
        .iter()
        .map(|&m| {
            if m >= n_sup {
                T::one()
            } else {
                let row = all.row(m).to_vec();
                confidence_weight(&row, targets.input, targets.delta)
            }
        })
        .collect();

    let qv = g.leaf(queries.clone());
    let f = tps.sdf(g, qv);
    let total_f = g.sum(f);
    let grad = g.grad(total_f, None, &[qv])[0]
        .ok_or_else(|| Error::Internal("field does not depend on the queries".into()))?;
    let gv = g.value(grad);
    let mut skipped = 0;
    let mut w = Array2::zeros((n, 1));
    for i in 0..n {
        let norm2: T = gv.row(i).iter().map(|v| *v * *v).sum();
        if norm2.sqrt() > T::lit(GRAD_EPS) {
            w[[i, 0]] = weights[i];
        } else {
            skipped += 1;
        }
    }
    if skipped == n {
        return Err(Error::Numerical(format!(
            "all {n} queries have a vanishing field gradient"
        )));
    }
    let g2 = g.mul(grad, grad);
    let norm2 = g2;
    let norm2 = g.sum_rows(norm2);
    let norm2 = g.affine(norm2, T::one(), T::lit(GRAD_EPS * GRAD_EPS));
    let norm = g.sqrt(norm2);
    let inv = g.recip(norm);
    let step = g.mul(f, inv);
    let shift = g.mul_col(grad, step);
    let pulled = g.sub(qv, shift);

    let (target, wv) = match targets.supervision_var {
        Some(sv) => {
            let n_all = all.nrows();
            let sup_rows: Rc<[usize]> = (0..n_sup).collect();
            let sup = g.scatter_add_rows(sv, sup_rows, n_all);
            let mut inp = Array2::zeros((n_all, dim));
            inp.slice_mut(ndarray::s![n_sup.., ..]).assign(input);
            let inp = g.leaf(inp);
            let stacked = g.add(sup, inp);
            let target = g.gather_rows(stacked, matches.clone().into());
            // the confidence weight is recorded too, as it depends on the chart
            let rows: Rc<[usize]> = matches.iter().map(|&m| if m < n_sup { m } else { 0 }).collect();
            let picked = g.gather_rows(sv, rows.clone());
            let nearest = Array2::from_shape_fn((n, dim), |(i, d)| {
                let (j, _) = targets.input.nearest_sq(all.row(rows[i]));
                input[[j, d]]
            });
            let nearest = g.leaf(nearest);
            let off = g.sub(picked, nearest);
            let off2 = g.mul(off, off);
            let off2 = g.sum_rows(off2);
            let arg = g.scale(off2, -targets.delta);
            let conf = g.map(arg, Rc::new(Exp));
            let mask = |on_sup: bool| {
                Array2::from_shape_fn((n, 1), |(i, _)| {
                    if w[[i, 0]] != T::zero() && (matches[i] < n_sup) == on_sup {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            };
            let sup_mask = g.leaf(mask(true));
            let inp_mask = g.leaf(mask(false));
            let conf = g.mul(conf, sup_mask);
            (target, g.add(conf, inp_mask))
        }
        None => {
            let t = Array2::from_shape_fn((n, dim), |(i, d)| all[[matches[i], d]]);
            (g.leaf(t), g.leaf(w))
        }
    };
    let diff = g.sub(pulled, target);
    let d2 = g.mul(diff, diff);
    let d2 = g.sum_rows(d2);
    let weighted = g.mul(d2, wv);
    let s = g.sum(weighted);
    let loss = g.scale(s, T::one() / T::from_usize_lossy(n - skipped));
    Ok(PullLoss {
        loss,
        skipped,
        queries: n,
    })
}

/// Everything random about one step.
#[derive(Debug, Clone)]
pub struct StepDraws<T> {
    pub uv_regulated: Array2<T>,
    pub uv_supervision: Array2<T>,
    /// Fixed query positions; when absent they are derived from the
    /// regulated chart values with `anchor_pick` and `noise`.
    pub queries: Option<Array2<T>>,
    pub anchor_pick: Vec<usize>,
    pub noise: Array2<T>,
}

/// Recorded losses of one step.
pub struct StepLoss {
    pub total: Var,
    pub cd: Option<Var>,
    pub surf: Option<Var>,
    pub pull: Var,
    pub skipped: usize,
    pub queries: usize,
}

/// The full model: chart, field, input points and their search index.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub chart: ParamNet<T>,
    pub field: TpsNet<T>,
    pub input: NearestIndex<T>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(cloud: &PointCloud<T>, config: &TrainConfig, rng: &mut R) -> Result<Self> {
        if cloud.len() < 3 {
            return invalid("training needs at least three points");
        }
        let chart = ParamNet::new(cloud.dim(), config.param_options(), rng)?;
        let mut field = TpsNet::new(cloud.points().clone(), config.tps_options(), rng)?;
        field.refresh_features()?;
        Ok(Self {
            chart,
            field,
            input: NearestIndex::new(cloud.points().clone())?,
        })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Draws the random inputs of one step.
    pub fn draw_step<R: Rng>(&self, config: &TrainConfig, rng: &mut R) -> Result<StepDraws<T>> {
        let pd = self.chart.param_dim();
        let uv_regulated = sample_unit_cube(config.chart_points, pd, rng)?;
        let uv_supervision = sample_unit_cube(config.supervision_points, pd, rng)?;
        let n_anchor = match self.anchor_kind(config) {
            QueryAnchor::S => config.chart_points,
            QueryAnchor::P => self.input.len(),
        };
        let nq = config.queries_per_iter;
        let anchor_pick = (0..nq).map(|_| rng.random_range(0..n_anchor)).collect();
        let noise = Array2::from_shape_simple_fn((nq, self.dim()), || {
            T::lit(StandardNormal.sample(rng))
        });
        Ok(StepDraws {
            uv_regulated,
            uv_supervision,
            queries: None,
            anchor_pick,
            noise,
        })
    }

    fn anchor_kind(&self, config: &TrainConfig) -> QueryAnchor {
        if config.ablations.no_cd {
            QueryAnchor::P
        } else {
            config.query_anchor
        }
    }

    /// Queries around the given anchors with spreads from their neighbourhoods.
    pub fn queries_from(
        &self,
        anchors: &Array2<T>,
        draws: &StepDraws<T>,
        config: &TrainConfig,
    ) -> Result<Array2<T>> {
        let n = anchors.nrows();
        // keep the spread comparable to a dense chart when anchoring on few points
        let k = if n >= config.chart_points {
            config.sigma_k
        } else {
            ((config.sigma_k * n) as f64 / config.chart_points as f64).round() as usize
        };
        let k = k.clamp(1, n.saturating_sub(1).max(1));
        let cloud = PointCloud::new(anchors.clone())?;
        let sigma = local_sigma(&cloud, k)?;
        let scale = T::lit(if anchors.ncols() == 2 {
            config.sigma_scale_2d
        } else {
            config.sigma_scale
        });
        Ok(Array2::from_shape_fn(draws.noise.dim(), |(i, d)| {
            let a = draws.anchor_pick[i];
            anchors[[a, d]] + scale * sigma[a] * draws.noise[[i, d]]
        }))
    }

    /// Queries of a step for the current chart (numeric).
    pub fn resolve_queries(&self, draws: &StepDraws<T>, config: &TrainConfig) -> Result<Array2<T>> {
        if let Some(q) = &draws.queries {
            return Ok(q.clone());
        }
        let anchors = match self.anchor_kind(config) {
            QueryAnchor::S => multi_patch_forward(&self.chart, &draws.uv_regulated)?,
            QueryAnchor::P => self.input.points().clone(),
        };
        self.queries_from(&anchors, draws, config)
    }

    /// Records the step loss. With `fixed_supervision` the supervision
    /// points are taken as given instead of mapped from `draws`.
    pub fn build_loss(
        &self,
        g: &mut Graph<T>,
        chart: &BoundParam,
        field: &BoundTps<T>,
        draws: &StepDraws<T>,
        config: &TrainConfig,
        fixed_supervision: Option<&Array2<T>>,
        train_field_only: bool,
    ) -> Result<StepLoss> {
        let ab = &config.ablations;
        let mut total: Option<Var> = None;
        let mut add = |g: &mut Graph<T>, v: Var, w: f64| {
            let v = if w == 1.0 { v } else { g.scale(v, T::lit(w)) };
            total = Some(match total {
                Some(t) => g.add(t, v),
                None => v,
            });
        };

        let mut cd = None;
        let mut regulated_values = None;
        if !ab.no_cd {
            let counts = patch_counts(draws.uv_regulated.nrows(), self.chart.patch_count());
            let s = chart.forward(g, &draws.uv_regulated, &counts);
            regulated_values = Some(g.value(s).clone());
            if !train_field_only {
                let l = crate::surface_param::chamfer_loss(g, s, &self.input)?;
                add(g, l, 1.0);
                cd = Some(l);
            }
        }

        let mut surf = None;
        if !ab.no_surf {
            let l = loss_surf(g, field);
            add(g, l, config.alpha);
            surf = Some(l);
        }

        let queries = match (&draws.queries, self.anchor_kind(config), &regulated_values) {
            (Some(q), _, _) => q.clone(),
            (None, QueryAnchor::S, Some(s)) => self.queries_from(s, draws, config)?,
            (None, QueryAnchor::S, None) => {
                let s = multi_patch_forward(&self.chart, &draws.uv_regulated)?;
                self.queries_from(&s, draws, config)?
            }
            (None, QueryAnchor::P, _) => self.queries_from(self.input.points(), draws, config)?,
        };

        let (sup_values, sup_var) = if ab.no_cd {
            (None, None)
        } else if let Some(fixed) = fixed_supervision {
            (Some(fixed.clone()), None)
        } else if ab.grad_diff && !train_field_only {
            let counts = patch_counts(draws.uv_supervision.nrows(), self.chart.patch_count());
            let v = chart.forward(g, &draws.uv_supervision, &counts);
            (Some(g.value(v).clone()), Some(v))
        } else {
            (Some(multi_patch_forward(&self.chart, &draws.uv_supervision)?), None)
        };
        let targets = PullTargets {
            supervision: sup_values.as_ref(),
            supervision_var: sup_var,
            input: &self.input,
            delta: T::lit(config.delta),
        };
        let pl = loss_pull(g, field, &queries, &targets)?;
        add(g, pl.loss, config.beta);

        Ok(StepLoss {
            total: total.expect("pull term always present"),
            cd,
            surf,
            pull: pl.loss,
            skipped: pl.skipped,
            queries: pl.queries,
        })
    }

    /// Loss value and gradients for the chart and field tensors on fixed draws.
    pub fn loss_and_grads(
        &self,
        draws: &StepDraws<T>,
        config: &TrainConfig,
    ) -> Result<(LossRecord, Vec<Array2<T>>, Vec<Array2<T>>)> {
        let mut g = Graph::new();
        let chart = self.chart.bind(&mut g);
        let field = self.field.bind(&mut g);
        let step = self.build_loss(&mut g, &chart, &field, draws, config, None, false)?;
        let cv = chart.vars();
        let fv = field.vars();
        let all: Vec<Var> = cv.iter().chain(&fv).copied().collect();
        let bundle = g.backward(step.total, &all)?;
        let mut grads = bundle.grads;
        let field_grads = grads.split_off(cv.len());
        Ok((record(&g, &step, 0), grads, field_grads))
    }
}

fn record<T: Real>(g: &Graph<T>, step: &StepLoss, iter: usize) -> LossRecord {
    let val = |v: Option<Var>| v.map(|v| g.scalar(v).to_f64_lossy()).unwrap_or(0.0);
    LossRecord {
        iter,
        cd: val(step.cd),
        surf: val(step.surf),
        pull: g.scalar(step.pull).to_f64_lossy(),
        total: g.scalar(step.total).to_f64_lossy(),
        skip_rate: step.skipped as f64 / step.queries.max(1) as f64,
    }
}

/// Final (or intermediate) state of a run.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub model: Model<T>,
    pub chart_opt: AdamState<T>,
    pub field_opt: AdamState<T>,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Trains on `cloud` (taken as already normalized).
pub fn train<T: Real>(cloud: &PointCloud<T>, config: &TrainConfig) -> Result<TrainState<T>> {
    train_with(cloud, config, |_| {})
}

/// Like [`train`], calling `observer` for every step record.
pub fn train_with<T: Real, F: FnMut(&LossRecord)>(
    cloud: &PointCloud<T>,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainState<T>> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let model = Model::new(cloud, config, &mut init_rng)?;
    let mut state = TrainState {
        chart_opt: AdamState::new(&model.chart),
        field_opt: AdamState::new(&model.field),
        model,
        iteration: 0,
        history: Vec::new(),
    };

    let ab = config.ablations;
    let mut fixed_supervision = None;
    if ab.separate && !ab.no_cd {
        let n = config.separate_iterations;
        for it in 0..n {
            let draws = state.model.draw_step(config, &mut rng)?;
            let mut g = Graph::new();
            let chart = state.model.chart.bind(&mut g);
            let counts = patch_counts(draws.uv_regulated.nrows(), state.model.chart.patch_count());
            let s = chart.forward(&mut g, &draws.uv_regulated, &counts);
            let l = crate::surface_param::chamfer_loss(&mut g, s, &state.model.input)?;
            let bundle = g.backward(l, &chart.vars())?;
            let rec = LossRecord {
                iter: state.iteration,
                cd: bundle.loss.to_f64_lossy(),
                surf: 0.0,
                pull: 0.0,
                total: bundle.loss.to_f64_lossy(),
                skip_rate: 0.0,
            };
            check_divergence(&rec, &state.history)?;
            let lr = T::lit(config.lr_at(it, n));
            adam_step(&mut state.model.chart, &bundle.grads, &mut state.chart_opt, lr)?;
            observer(&rec);
            state.history.push(rec);
            state.iteration += 1;
        }
        let uv = sample_unit_cube(
            config.supervision_points,
            state.model.chart.param_dim(),
            &mut rng,
        )?;
        fixed_supervision = Some(multi_patch_forward(&state.model.chart, &uv)?);
    }
    let field_only = ab.separate && !ab.no_cd;

    for it in 0..config.iterations {
        let draws = state.model.draw_step(config, &mut rng)?;
        let mut g = Graph::new();
        let chart = state.model.chart.bind(&mut g);
        let field = state.model.field.bind(&mut g);
        let step = state.model.build_loss(
            &mut g,
            &chart,
            &field,
            &draws,
            config,
            fixed_supervision.as_ref(),
            field_only,
        )?;
        let rec = record(&g, &step, state.iteration);
        check_divergence(&rec, &state.history)?;
        let train_chart = !ab.no_cd && !field_only;
        let cv = if train_chart { chart.vars() } else { Vec::new() };
        let fv = field.vars();
        let all: Vec<Var> = cv.iter().chain(&fv).copied().collect();
        let bundle = g.backward(step.total, &all)?;
        drop(g);
        let mut grads = bundle.grads;
        let field_grads = grads.split_off(cv.len());
        let lr = T::lit(config.lr_at(it, config.iterations));
        if train_chart {
            adam_step(&mut state.model.chart, &grads, &mut state.chart_opt, lr)?;
        }
        adam_step(&mut state.model.field, &field_grads, &mut state.field_opt, lr)?;
        observer(&rec);
        state.history.push(rec);
        state.iteration += 1;
    }
    state.model.field.refresh_features()?;
    Ok(state)
}

fn check_divergence(rec: &LossRecord, history: &[LossRecord]) -> Result<()> {
    if rec.total.is_finite() && rec.total <= DIVERGENCE_LIMIT {
        return Ok(());
    }
    let last = history
        .last()
        .map(|r| r.to_line())
        .unwrap_or_else(|| "none".into());
    Err(Error::Diverged {
        iteration: rec.iter,
        msg: format!("loss {} ({}); previous record: {last}", rec.total, rec.to_line()),
    })
}

/// A chart sample of the trained model, for inspection.
pub fn chart_sample<T: Real, R: Rng>(model: &Model<T>, n: usize, rng: &mut R) -> Result<ChartSample<T>> {
    crate::surface_param::generate_chart(&model.chart, n, ChartRole::Regulated, rng)
}
