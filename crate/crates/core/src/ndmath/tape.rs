//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records each operation as it is evaluated. [`Tape::gradients`]
//! walks the records in exact reverse order and returns the adjoints of the
//! leaf and parameter nodes; [`Tape::backward`] additionally accumulates the adjoints of
//! parameter nodes into their [`ParamTensor::grad`](super::ParamTensor).
//! Backward passes do not mutate the tape, so replaying one is deterministic.

use super::ops::{self, Activation};
use super::param::{ParamId, ParamSet};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One hinge of the margin loss: `(margin − S[pos] + S[neg]) / count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct HingeTerm {
    pub pos: (usize, usize),
    pub neg: (usize, usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulT {
        a: Var,
        b: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    LogSoftmax {
        x: Var,
        tau: f64,
    },
    Exp {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Hinge {
        s: Var,
        terms: Vec<HingeTerm>,
        denom: f64,
    },
    CrossEntropy {
        logp: Var,
        target: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaf and parameter nodes for one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of a leaf or parameter node, or `None` if the loss does not
    /// depend on it. Interior adjoints are consumed during the pass.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(
            value.is_finite() || matches!(op, Op::Leaf),
            "non-finite tape value"
        );
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT { a, b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(x), kind);
        self.push(out, Op::Activation { x, kind })
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (out, norms) = ops::l2_normalize_rows(self.value(x))?;
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    pub fn log_softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        let out = ops::log_softmax_rows(self.value(x), tau)?;
        Ok(self.push(out, Op::LogSoftmax { x, tau }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp { x })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::Scale { x, c })
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Same data, new shape (row-major order is kept).
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = Matrix::from_vec(rows, cols, self.value(x).as_slice().to_vec())?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// `Σ_terms max(0, margin − S[pos] + S[neg]) / denom` over precomputed
    /// index pairs; inactive hinges are dropped here.
    pub(crate) fn hinge_sum(
        &mut self,
        s: Var,
        margin: f64,
        candidates: Vec<HingeTerm>,
        denom: f64,
    ) -> Var {
        let sm = self.value(s);
        let mut total = 0.0;
        let mut terms = Vec::with_capacity(candidates.len());
        for t in candidates {
            let h = margin - sm[t.pos] + sm[t.neg];
            if h > 0.0 {
                total += h;
                terms.push(t);
            }
        }
        self.push(Matrix::scalar(total / denom), Op::Hinge { s, terms, denom })
    }

    /// Mean over rows of `−Σ_y target[i][y] · logp[i][y]`; the target is a
    /// constant.
    pub fn cross_entropy_rows(&mut self, logp: Var, target: &Matrix) -> Result<Var> {
        let lp = self.value(logp);
        if lp.shape() != target.shape() {
            return Err(Error::dim(
                "cross_entropy_rows",
                format!("log-probs {:?} vs targets {:?}", lp.shape(), target.shape()),
            ));
        }
        if lp.rows() == 0 {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        let mut total = 0.0;
        for (l, t) in lp.as_slice().iter().zip(target.as_slice()) {
            if *t != 0.0 {
                total -= t * l;
            }
        }
        let out = Matrix::scalar(total / lp.rows() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logp,
                target: target.clone(),
            },
        ))
    }

    /// Adjoints with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss is not a node of this tape".into()))?;
        if node.value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Affine { x, w, b } => {
                    accumulate(&mut grads, *x, g.matmul_t(self.value(*w))?);
                    accumulate(&mut grads, *w, self.value(*x).t_matmul(&g)?);
                    let cs = g.col_sums();
                    accumulate(&mut grads, *b, Matrix::from_vec(1, cs.len(), cs)?);
                }
                Op::MatMul { a, b } => {
                    accumulate(&mut grads, *a, g.matmul_t(self.value(*b))?);
                    accumulate(&mut grads, *b, self.value(*a).t_matmul(&g)?);
                }
                Op::MatMulT { a, b } => {
                    accumulate(&mut grads, *a, g.matmul(self.value(*b))?);
                    accumulate(&mut grads, *b, g.t_matmul(self.value(*a))?);
                }
                Op::Activation { x, kind } => {
                    let xin = self.value(*x);
                    let mut d = g;
                    for ((dv, &xv), &yv) in d
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xin.as_slice())
                        .zip(out.as_slice())
                    {
                        *dv *= kind.derivative(xv, yv);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::L2Normalize { x, norms } => {
                    // d/dx (x/|x|) applied to g: (g − y·(g·y)) / |x|
                    let mut d = g;
                    for (i, &norm) in norms.iter().enumerate() {
                        let y = out.row(i);
                        let gy = super::dot(d.row(i), y);
                        for (dv, &yv) in d.row_mut(i).iter_mut().zip(y) {
                            *dv = (*dv - yv * gy) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::LogSoftmax { x, tau } => {
                    // (g − softmax·Σg) / τ per row
                    let mut d = g;
                    for i in 0..out.rows() {
                        let gs: f64 = d.row(i).iter().sum();
                        for (dv, &lv) in d.row_mut(i).iter_mut().zip(out.row(i)) {
                            *dv = (*dv - lv.exp() * gs) / tau;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Exp { x } => {
                    accumulate(&mut grads, *x, g.zip_map(out, |a, b| a * b)?);
                }
                Op::Mul { a, b } => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*b), |p, q| p * q)?);
                    accumulate(&mut grads, *b, g.zip_map(self.value(*a), |p, q| p * q)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, g.map(|v| c * v));
                }
                Op::Sum { x } => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Matrix::filled(r, c, g.item()));
                }
                Op::Reshape { x } => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Matrix::from_vec(r, c, g.into_vec())?);
                }
                Op::Hinge { s, terms, denom } => {
                    let (r, c) = self.value(*s).shape();
                    let mut d = Matrix::zeros(r, c);
                    let w = g.item() / denom;
                    for t in terms {
                        d[t.pos] -= w;
                        d[t.neg] += w;
                    }
                    accumulate(&mut grads, *s, d);
                }
                Op::CrossEntropy { logp, target } => {
                    let w = g.item() / target.rows() as f64;
                    accumulate(&mut grads, *logp, target.map(|t| -t * w));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::gradients`] and adds each parameter node's adjoint to the
    /// parameter's `grad`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.wrt(Var(idx))) {
                let p = params.get_mut(*id);
                if p.grad.shape() != g.shape() {
                    return Err(Error::Contract(format!(
                        "parameter {} changed shape since it was recorded",
                        id.index()
                    )));
                }
                p.grad.add_assign(g);
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
