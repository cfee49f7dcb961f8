//! Tape of dense 2-D tensor operations with a reverse pass that is itself
//! recorded on the tape.
//!
//! Every value is an `Array2`; scalars are `1 x 1`. [`Graph::grad`] appends
//! the adjoint computation as ordinary nodes, so a gradient obtained from it
//! (for example the gradient of a network with respect to its input) can be
//! fed into a loss and differentiated again with [`Graph::backward`].

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use super::elementwise::{Elementwise, Relu, ScaledPow};
use crate::error::{Error, Result};
use crate::Real;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T, T),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastScalar(Var),
    RepeatRows(Var),
    RepeatCols(Var),
    Transpose(Var),
    Map(Var, Rc<dyn Elementwise<T>>),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    StopGrad(Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::AddRow(..) => "add-row",
            Op::AddCol(..) => "add-col",
            Op::MulRow(..) => "mul-row",
            Op::MulCol(..) => "mul-col",
            Op::SumAll(..) => "sum",
            Op::SumRows(..) => "sum-rows",
            Op::SumCols(..) => "sum-cols",
            Op::BroadcastScalar(..) => "broadcast",
            Op::RepeatRows(..) => "repeat-rows",
            Op::RepeatCols(..) => "repeat-cols",
            Op::Transpose(..) => "transpose",
            Op::Map(_, f) => f.name(),
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter-add",
            Op::StopGrad(..) => "stop-gradient",
        }
    }

    fn inputs(&self) -> ([Option<Var>; 2], bool) {
        // second flag: whether gradient passes through at all
        match *self {
            Op::Leaf => ([None, None], false),
            Op::StopGrad(a) => ([Some(a), None], false),
            Op::MatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => ([Some(a), Some(b)], true),
            Op::Affine(a, ..)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastScalar(a)
            | Op::RepeatRows(a)
            | Op::RepeatCols(a)
            | Op::Transpose(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => ([Some(a), None], true),
            Op::Map(a, ref f) => ([Some(a), None], f.derivative().is_some()),
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Array2<T>,
}

/// Scalar loss value plus one gradient tensor per requested parameter leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T> {
    pub loss: T,
    pub grads: Vec<Array2<T>>,
}

impl<T: Real> GradientBundle<T> {
    pub fn squared_norm(&self) -> T {
        self.grads
            .iter()
            .map(|g| g.iter().map(|&x| x * x).sum::<T>())
            .sum()
    }
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, op: Op<T>, value: Array2<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Parameters and constants are both leaves; which ones get gradients is
    /// decided by the `wrt` list at reverse time.
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, v: T) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let la = if ta { va.t() } else { va.view() };
        let lb = if tb { vb.t() } else { vb.view() };
        assert_eq!(
            la.ncols(),
            lb.nrows(),
            "matmul inner dimension mismatch {:?} x {:?}",
            la.dim(),
            lb.dim()
        );
        let out = la.dot(&lb);
        self.push(Op::MatMul { a, b, ta, tb }, out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.push(Op::Affine(a, scale, shift), out)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::zero())
    }

    /// `a[n x m] + row[1 x m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row shape");
        let mut out = self.value(a).clone();
        let r = self.value(row).row(0).to_owned();
        for mut line in out.rows_mut() {
            line += &r;
        }
        debug_assert_eq!(out.nrows(), n);
        self.push(Op::AddRow(a, row), out)
    }

    /// `a[n x m] + col[n x 1]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "add_col shape");
        let mut out = self.value(a).clone();
        let c = self.value(col);
        Zip::from(out.rows_mut())
            .and(c.rows())
            .for_each(|mut line, cv| line.mapv_inplace(|x| x + cv[0]));
        self.push(Op::AddCol(a, col), out)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "mul_row shape");
        let mut out = self.value(a).clone();
        let r = self.value(row).row(0).to_owned();
        for mut line in out.rows_mut() {
            line *= &r;
        }
        self.push(Op::MulRow(a, row), out)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col shape");
        let mut out = self.value(a).clone();
        let c = self.value(col);
        Zip::from(out.rows_mut())
            .and(c.rows())
            .for_each(|mut line, cv| line.mapv_inplace(|x| x * cv[0]));
        self.push(Op::MulCol(a, col), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Array2::from_elem((1, 1), s))
    }

    /// Sum across columns: `n x m -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumRows(a), out)
    }

    /// Sum across rows: `n x m -> 1 x m`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumCols(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n * m))
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let s = self.scalar(a);
        self.push(
            Op::BroadcastScalar(a),
            Array2::from_elem((rows, cols), s),
        )
    }

    /// `1 x m -> n x m`
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, m) = self.shape(a);
        assert_eq!(r, 1, "repeat_rows expects a row");
        let out = self.value(a).broadcast((n, m)).unwrap().to_owned();
        self.push(Op::RepeatRows(a), out)
    }

    /// `n x 1 -> n x m`
    pub fn repeat_cols(&mut self, a: Var, m: usize) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(c, 1, "repeat_cols expects a column");
        let col = self.value(a).column(0).to_owned();
        let out = Array2::from_shape_fn((n, m), |(i, _)| col[i]);
        self.push(Op::RepeatCols(a), out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), out)
    }

    pub fn map(&mut self, a: Var, f: Rc<dyn Elementwise<T>>) -> Var {
        let out = self.value(a).mapv(|x| f.apply(x));
        self.push(Op::Map(a, f), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(
            a,
            Rc::new(ScaledPow {
                scale: T::one(),
                power: T::lit(2.0),
            }),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(
            a,
            Rc::new(ScaledPow {
                scale: T::one(),
                power: T::lit(0.5),
            }),
        )
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(
            a,
            Rc::new(ScaledPow {
                scale: T::one(),
                power: -T::one(),
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Rc::new(Relu))
    }

    /// Select rows `idx` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let out = self.value(a).select(Axis(0), &idx);
        self.push(Op::Gather(a, idx), out)
    }

    /// Rows of `a` added into an `n`-row zero tensor at positions `idx`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), idx.len(), "scatter index length");
        let mut out = Array2::zeros((n, va.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += &va.row(k);
        }
        self.push(Op::ScatterAdd(a, idx), out)
    }

    /// Identity forward; blocks every reverse contribution.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(Op::StopGrad(a), out)
    }

    /// Per-node flag: does the node depend on any of `wrt` through
    /// differentiable edges.
    fn dependency_mask(&self, upto: usize, wrt: &[Var]) -> Vec<bool> {
        let mut needs = vec![false; upto + 1];
        for w in wrt {
            if w.0 <= upto {
                needs[w.0] = true;
            }
        }
        for i in 0..=upto {
            if needs[i] {
                continue;
            }
            let (ins, passes) = self.nodes[i].op.inputs();
            if passes {
                needs[i] = ins.iter().flatten().any(|v| needs[v.0]);
            }
        }
        needs
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) {
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution),
        });
    }

    /// Reverse pass recorded as graph nodes.
    ///
    /// Returns the adjoint of each `wrt` entry with respect to `output`,
    /// seeded with `seed` (defaults to ones of the output's shape). `None`
    /// marks an exactly-zero gradient: no differentiable path exists.
    pub fn grad(&mut self, output: Var, seed: Option<Var>, wrt: &[Var]) -> Vec<Option<Var>> {
        let top = output.0;
        let needs = self.dependency_mask(top, wrt);
        let mut adj: Vec<Option<Var>> = vec![None; top + 1];
        if !needs[top] {
            return vec![None; wrt.len()];
        }
        let seed = match seed {
            Some(s) => {
                assert_eq!(self.shape(s), self.shape(output), "seed shape");
                s
            }
            None => {
                let (r, c) = self.shape(output);
                self.leaf(Array2::from_elem((r, c), T::one()))
            }
        };
        adj[top] = Some(seed);
        for i in (0..=top).rev() {
            let Some(g) = adj[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let need = |v: Var| needs[v.0];
            match op {
                Op::Leaf | Op::StopGrad(_) => {}
                Op::MatMul { a, b, ta, tb } => {
                    if need(a) {
                        let da = match (ta, tb) {
                            (false, false) => self.matmul_t(g, b, false, true),
                            (false, true) => self.matmul_t(g, b, false, false),
                            (true, false) => self.matmul_t(b, g, false, true),
                            (true, true) => self.matmul_t(b, g, true, true),
                        };
                        self.accumulate(&mut adj, a, da);
                    }
                    if need(b) {
                        let db = match (ta, tb) {
                            (false, false) => self.matmul_t(a, g, true, false),
                            (false, true) => self.matmul_t(g, a, true, false),
                            (true, false) => self.matmul_t(a, g, false, false),
                            (true, true) => self.matmul_t(g, a, true, true),
                        };
                        self.accumulate(&mut adj, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if need(b) {
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if need(b) {
                        let d = self.neg(g);
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        let d = self.mul(g, b);
                        self.accumulate(&mut adj, a, d);
                    }
                    if need(b) {
                        let d = self.mul(g, a);
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Affine(a, s, _) => {
                    let d = self.scale(g, s);
                    self.accumulate(&mut adj, a, d);
                }
                Op::AddRow(a, r) => {
                    if need(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if need(r) {
                        let d = self.sum_cols(g);
                        self.accumulate(&mut adj, r, d);
                    }
                }
                Op::AddCol(a, c) => {
                    if need(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if need(c) {
                        let d = self.sum_rows(g);
                        self.accumulate(&mut adj, c, d);
                    }
                }
                Op::MulRow(a, r) => {
                    if need(a) {
                        let d = self.mul_row(g, r);
                        self.accumulate(&mut adj, a, d);
                    }
                    if need(r) {
                        let p = self.mul(g, a);
                        let d = self.sum_cols(p);
                        self.accumulate(&mut adj, r, d);
                    }
                }
                Op::MulCol(a, c) => {
                    if need(a) {
                        let d = self.mul_col(g, c);
                        self.accumulate(&mut adj, a, d);
                    }
                    if need(c) {
                        let p = self.mul(g, a);
                        let d = self.sum_rows(p);
                        self.accumulate(&mut adj, c, d);
                    }
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    let d = self.broadcast_scalar(g, r, c);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumRows(a) => {
                    let m = self.shape(a).1;
                    let d = self.repeat_cols(g, m);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumCols(a) => {
                    let n = self.shape(a).0;
                    let d = self.repeat_rows(g, n);
                    self.accumulate(&mut adj, a, d);
                }
                Op::BroadcastScalar(a) => {
                    let d = self.sum(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::RepeatRows(a) => {
                    let d = self.sum_cols(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::RepeatCols(a) => {
                    let d = self.sum_rows(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Transpose(a) => {
                    let d = self.transpose(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Map(a, f) => {
                    if let Some(df) = f.derivative() {
                        let slope = self.map(a, df);
                        let d = self.mul(g, slope);
                        self.accumulate(&mut adj, a, d);
                    }
                }
                Op::Gather(a, idx) => {
                    let n = self.shape(a).0;
                    let d = self.scatter_add_rows(g, idx, n);
                    self.accumulate(&mut adj, a, d);
                }
                Op::ScatterAdd(a, idx) => {
                    let d = self.gather_rows(g, idx);
                    self.accumulate(&mut adj, a, d);
                }
            }
        }
        wrt.iter()
            .map(|w| if w.0 <= top { adj[w.0] } else { None })
            .collect()
    }

    /// Numeric parameter gradients of a scalar loss.
    ///
    /// Fails with the first non-finite node if the loss is not finite.
    pub fn backward(&mut self, loss: Var, params: &[Var]) -> Result<GradientBundle<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::InvalidInput(format!(
                "loss must be 1x1, got {:?}",
                self.shape(loss)
            )));
        }
        let lv = self.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {lv}; {}",
                self.non_finite_report(loss)
            )));
        }
        let adj = self.grad(loss, None, params);
        let grads = params
            .iter()
            .zip(adj)
            .map(|(p, a)| match a {
                Some(a) => self.value(a).clone(),
                None => Array2::zeros(self.shape(*p)),
            })
            .collect::<Vec<_>>();
        for (k, g) in grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {k} (node {})",
                    params[k].0
                )));
            }
        }
        Ok(GradientBundle { loss: lv, grads })
    }

    /// Describes the earliest node whose value is not finite, up to `upto`.
    pub fn non_finite_report(&self, upto: Var) -> String {
        for (i, n) in self.nodes.iter().enumerate().take(upto.0 + 1) {
            if n.value.iter().any(|x| !x.is_finite()) {
                return format!("first non-finite value at node {i} ({})", n.op.name());
            }
        }
        "no non-finite node found".to_string()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}
