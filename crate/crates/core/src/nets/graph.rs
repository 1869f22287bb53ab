//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the tape in reverse from a `1 x 1` output. Only nodes that depend on a
//! leaf created with `requires_grad` receive gradients.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Exp(Var),
    Ln(Var),
    Square(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PickRows(Vec<Var>, Vec<usize>, Vec<usize>),
    SumCols(Var),
    SumAll(Var),
    LogSumExpCols(Var),
    Reshape(Var),
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// `None` when the node is off the loss path or never needed a gradient.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var {
        let value = f(&self.value(a));
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>) -> Var {
        let value = f(&self.value(a), &self.value(b));
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs)
    }

    pub fn value(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a, b), |x, y| x.dot(y))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, Op::AddRow(a, row), |x, r| x + r)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.mapv(|v| v.max(0.0)))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.mapv(|v| v.clamp(lo, hi)))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.mapv(f64::exp))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.mapv(f64::ln))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x.mapv(|v| v * v))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, Op::SliceCols(a, start), |x| x.slice(s![.., start..end]).to_owned())
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Array2<f64>>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let needs = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Var {
        let idx = index.to_vec();
        self.unary(a, Op::GatherRows(a, idx), |x| gather(x, index))
    }

    /// Row `i` of the output is row `i` of `sources[choice[i]]`.
    pub fn pick_rows(&self, sources: &[Var], choice: &[usize]) -> Var {
        let rows: Vec<usize> = (0..choice.len()).collect();
        self.pick_gather(sources, choice, &rows)
    }

    /// Row `i` of the output is row `rows[i]` of `sources[choice[i]]`.
    pub fn pick_gather(&self, sources: &[Var], choice: &[usize], rows: &[usize]) -> Var {
        let values: Vec<Rc<Array2<f64>>> = sources.iter().map(|&p| self.value(p)).collect();
        let mut out = Array2::zeros((choice.len(), values[0].ncols()));
        for (i, (&c, &r)) in choice.iter().zip(rows).enumerate() {
            out.row_mut(i).assign(&values[c].row(r));
        }
        let needs = self.needs(sources);
        self.push(out, Op::PickRows(sources.to_vec(), choice.to_vec(), rows.to_vec()), needs)
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, Op::SumCols(a), |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(a, Op::SumAll(a), |x| Array2::from_elem((1, 1), x.sum()))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = {
            let (r, c) = self.shape(a);
            (r * c) as f64
        };
        let total = self.sum_all(a);
        self.scale(total, 1.0 / n)
    }

    /// Row-wise log-sum-exp as an `n x 1` column.
    pub fn logsumexp_cols(&self, a: Var) -> Var {
        self.unary(a, Op::LogSumExpCols(a), |x| {
            let out: Vec<f64> = x
                .rows()
                .into_iter()
                .map(|row| {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if max.is_finite() {
                        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                    } else {
                        max
                    }
                })
                .collect();
            Array2::from_shape_vec((out.len(), 1), out).expect("column")
        })
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        self.unary(a, Op::Reshape(a), |x| {
            let flat: Vec<f64> = x.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), flat).expect("element count preserved")
        })
    }

    /// Gradients of the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[loss.0].value.dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Array2::ones((1, 1)));
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let wants = |v: Var| nodes[v.0].needs_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], val(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, r) => {
                    if wants(*r) {
                        accumulate(&mut grads[r.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], &g * &**val(*b));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], &g * &**val(*a));
                    }
                }
                Op::Div(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], &g / &**val(*b));
                    }
                    if wants(*b) {
                        let mut d = &g * &*node.value;
                        Zip::from(&mut d).and(&**val(*b)).for_each(|d, &y| *d = -*d / y);
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&**val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&**val(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], g * &*node.value),
                Op::Ln(a) => accumulate(&mut grads[a.0], g / &**val(*a)),
                Op::Square(a) => accumulate(&mut grads[a.0], g * &**val(*a) * 2.0),
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = val(*p).ncols();
                        if wants(*p) {
                            accumulate(&mut grads[p.0], g.slice(s![.., offset..offset + width]).to_owned());
                        }
                        offset += width;
                    }
                }
                Op::GatherRows(a, index) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (row, &src) in g.rows().into_iter().zip(index) {
                        for (t, v) in d.row_mut(src).iter_mut().zip(row) {
                            *t += v;
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::PickRows(sources, choice, rows) => {
                    let mut parts: Vec<Option<Array2<f64>>> = vec![None; sources.len()];
                    for (i, (&c, &r)) in choice.iter().zip(rows).enumerate() {
                        if !wants(sources[c]) {
                            continue;
                        }
                        let d = parts[c].get_or_insert_with(|| Array2::zeros(val(sources[c]).dim()));
                        let mut row = d.row_mut(r);
                        row += &g.row(i);
                    }
                    for (src, part) in sources.iter().zip(parts) {
                        if let Some(d) = part {
                            accumulate(&mut grads[src.0], d);
                        }
                    }
                }
                Op::SumCols(a) => {
                    let cols = val(*a).ncols();
                    let d = g.broadcast((g.nrows(), cols)).expect("n x 1 broadcasts").to_owned();
                    accumulate(&mut grads[a.0], d);
                }
                Op::SumAll(a) => {
                    accumulate(&mut grads[a.0], Array2::from_elem(val(*a).dim(), g[[0, 0]]));
                }
                Op::LogSumExpCols(a) => {
                    let x = val(*a);
                    let mut d = Array2::zeros(x.dim());
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let lse = node.value[[i, 0]];
                        if !lse.is_finite() {
                            continue;
                        }
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = g[[i, 0]] * (x[[i, j]] - lse).exp();
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Reshape(a) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let d = Array2::from_shape_vec(val(*a).dim(), flat).expect("element count preserved");
                    accumulate(&mut grads[a.0], d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Rows of `x` in `index` order.
fn gather(x: &Array2<f64>, index: &[usize]) -> Array2<f64> {
    let cols = x.ncols();
    let mut out = Vec::with_capacity(index.len() * cols);
    match x.as_slice() {
        Some(flat) => index.iter().for_each(|&r| out.extend_from_slice(&flat[r * cols..(r + 1) * cols])),
        None => index.iter().for_each(|&r| out.extend(x.row(r).iter().copied())),
    }
    Array2::from_shape_vec((index.len(), cols), out).expect("shape matches")
}
