//! Tape of batched matrix operations with reverse-mode gradients.
//!
//! Every node holds a `(batch, features)` matrix. Operations are appended in
//! evaluation order, so replaying the tape backwards visits each node after
//! all of its consumers.

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule of an operation implemented outside the tape.
///
/// Receives the gradient of the op's output and returns one gradient per
/// input, in the order the inputs were registered.
pub trait CustomBackward {
    fn backward(&self, grad_out: &Array2<f64>) -> Vec<Array2<f64>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    /// `x · wᵀ + b` with `w: (out, in)` and `b: (1, out)`.
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    SliceCols { x: Var, start: usize },
    Concat(Vec<Var>),
    SelectCols { x: Var, index: Vec<usize> },
    SumCols(Var),
    MeanAll(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the input node `v`, if it influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).values.clone(), Op::Param(id))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input width {} vs weight {}", xv.ncols(), wv.ncols());
        let mut out = xv.dot(&wv.t());
        out += self.value(b);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Output column `j` is input column `index[j]`.
    pub fn select_cols(&mut self, x: Var, index: &[usize]) -> Var {
        let out = self.value(x).select(Axis(1), index);
        self.push(out, Op::SelectCols { x, index: index.to_vec() })
    }

    /// Row sums as a `(batch, 1)` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    /// Mean of every entry as a `1×1` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::MeanAll(a))
    }

    /// Registers an externally computed value with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Array2<f64>, rule: Box<dyn CustomBackward>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Replays the tape backwards from the scalar `loss`, adding parameter
    /// gradients into `store` (existing gradients are accumulated, not reset).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let l = self.scalar(loss);
        if !l.is_finite() {
            return Err(Error::Numerical(format!("loss is not finite: {l}")));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            // Leaf gradients stay in place for `Gradients::wrt`.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Param(id) => {
                    store.get_mut(*id).grad += &g;
                }
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, g.dot(wv));
                    accumulate(&mut grads, *w, g.t().dot(xv));
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = g * self.value(*a) * 2.0;
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::SelectCols { x, index } => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    for (j, &src) in index.iter().enumerate() {
                        let mut dst = d.column_mut(src);
                        dst += &g.column(j);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::SumCols(a) => {
                    let cols = self.value(*a).ncols();
                    let d = g.broadcast((g.nrows(), cols)).expect("column broadcast").to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanAll(a) => {
                    let v = self.value(*a);
                    let d = Array2::from_elem(v.raw_dim(), g[[0, 0]] / v.len() as f64);
                    accumulate(&mut grads, *a, d);
                }
                Op::Custom { inputs, rule } => {
                    let parts = rule.backward(&g);
                    assert_eq!(parts.len(), inputs.len(), "custom op returned wrong gradient count");
                    for (&v, d) in inputs.iter().zip(parts) {
                        accumulate(&mut grads, v, d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
