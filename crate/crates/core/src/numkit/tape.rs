//! Reverse-mode differentiation over a Wengert list of vector operations.
//!
//! A [`Tape`] records every value produced by the kernel operations used in
//! this crate. Parameters are borrowed into the tape as leaves, so building a
//! tape per optimization step costs no parameter copies. [`Tape::backward`]
//! walks the list once in reverse and returns the gradient of a scalar node
//! with respect to every leaf that influenced it.

use std::borrow::Cow;

use super::nn::{Activation, Mlp2Params, RnnParams};
use super::kernel::{dot, matvec_cols_acc, matvec_cols_backward, norm};
use super::pool::{recycle, zeroed, GradVec};
use super::{NumError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec { w: Var, offset: usize, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Row { table: Var, index: usize },
    SumScalars(Vec<Var>),
    SumElements(Var),
    Scale(Var, f64),
    CosineDistance(Var, Var),
    Hinge { x: Var, margin: f64 },
    SoftmaxCe { logits: Var, target: usize, probs: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    cols: usize,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar with respect to every node that reached it.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a dense vector; zeros when `v` did not influence the loss.
    pub fn dense(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    /// Moves out the dense gradients of `vars`, in order.
    pub fn into_dense<const N: usize>(mut self, vars: [Var; N]) -> [GradVec; N] {
        vars.map(|v| GradVec::new(self.grads[v.0].take().unwrap_or_else(|| zeroed(self.lens[v.0]))))
    }

    pub fn tensor(&self, v: Var, like: &Tensor) -> Tensor {
        let mut t = Tensor::zeros(like.shape());
        if let Some(g) = self.get(v) {
            t.as_mut_slice().copy_from_slice(g);
        }
        t
    }
}

impl Drop for Grads {
    fn drop(&mut self) {
        self.grads.drain(..).flatten().for_each(recycle);
    }
}

/// Leaf handles for a two-layer network registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2Vars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub activation: Activation,
}

impl Mlp2Vars {
    pub fn leaves(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RnnVars {
    pub w_in: Var,
    pub w_h: Var,
    pub b: Var,
}

impl RnnVars {
    pub fn leaves(&self) -> [Var; 3] {
        [self.w_in, self.w_h, self.b]
    }
}

fn shape_err(op: &str, detail: String) -> NumError {
    NumError::Shape(format!("{op}: {detail}"))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, cols: usize, op: Op) -> Var {
        self.nodes.push(Node { value, cols, op });
        Var(self.nodes.len() - 1)
    }

    /// Borrow a parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        let cols = if t.shape().len() >= 2 { t.cols() } else { 1 };
        self.push(Cow::Borrowed(t.as_slice()), cols, Op::Leaf)
    }

    /// Owned input (features, constants). Gradients are still reported.
    pub fn input(&mut self, values: Vec<f64>) -> Var {
        self.push(Cow::Owned(values), 1, Op::Leaf)
    }

    pub fn input_slice(&mut self, values: &'a [f64]) -> Var {
        self.push(Cow::Borrowed(values), 1, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn n(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// `W[:, offset..offset + len(x)] · x`.
    pub fn matvec_cols(&mut self, w: Var, x: Var, offset: usize) -> Result<Var, NumError> {
        let cols = self.nodes[w.0].cols;
        let (wn, xn) = (self.n(w), self.n(x));
        if cols == 0 || wn % cols != 0 || offset + xn > cols {
            return Err(shape_err(
                "matvec",
                format!("matrix with {cols} columns, offset {offset}, vector of length {xn}"),
            ));
        }
        let rows = wn / cols;
        let mut out = vec![0.0; rows];
        matvec_cols_acc(self.value(w), cols, offset, self.value(x), &mut out);
        Ok(self.push(Cow::Owned(out), 1, Op::MatVec { w, offset, x }))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, NumError> {
        let cols = self.nodes[w.0].cols;
        if cols != self.n(x) {
            return Err(shape_err(
                "matvec",
                format!("matrix with {cols} columns times vector of length {}", self.n(x)),
            ));
        }
        self.matvec_cols(w, x, 0)
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        if self.n(a) != self.n(b) {
            return Err(shape_err(
                name,
                format!("operands of length {} and {}", self.n(a), self.n(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(Cow::Owned(out), 1, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::with_capacity(parts.iter().map(|p| self.n(*p)).sum());
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        self.push(Cow::Owned(out), 1, Op::Concat(parts.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.max(0.0)).collect();
        self.push(Cow::Owned(out), 1, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.tanh()).collect();
        self.push(Cow::Owned(out), 1, Op::Tanh(a))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
        }
    }

    /// Row `index` of a matrix leaf (embedding lookup).
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var, NumError> {
        let cols = self.nodes[table.0].cols;
        let rows = self.n(table) / cols;
        if index >= rows {
            return Err(NumError::Index { index, len: rows });
        }
        let out = self.value(table)[index * cols..(index + 1) * cols].to_vec();
        Ok(self.push(Cow::Owned(out), 1, Op::Row { table, index }))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if let Some(p) = parts.iter().find(|p| self.n(**p) != 1) {
            return Err(shape_err("sum", format!("node of length {} is not a scalar", self.n(*p))));
        }
        let total = parts.iter().map(|p| self.scalar(*p)).sum::<f64>();
        Ok(self.push(Cow::Owned(vec![total]), 1, Op::SumScalars(parts.to_vec())))
    }

    pub fn sum_elements(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum::<f64>();
        self.push(Cow::Owned(vec![total]), 1, Op::SumElements(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * c).collect();
        self.push(Cow::Owned(out), 1, Op::Scale(a, c))
    }

    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let d = super::nn::cosine_distance(self.value(a), self.value(b))?;
        Ok(self.push(Cow::Owned(vec![d]), 1, Op::CosineDistance(a, b)))
    }

    /// `max(0, margin - x)` for a scalar `x`.
    pub fn hinge(&mut self, x: Var, margin: f64) -> Result<Var, NumError> {
        if self.n(x) != 1 {
            return Err(shape_err("hinge", format!("input of length {}", self.n(x))));
        }
        let v = (margin - self.scalar(x)).max(0.0);
        Ok(self.push(Cow::Owned(vec![v]), 1, Op::Hinge { x, margin }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumError> {
        let (loss, probs) = super::nn::softmax_cross_entropy(self.value(logits), target)?;
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            },
        ))
    }

    pub fn mlp2(&mut self, p: &'a Mlp2Params) -> Mlp2Vars {
        Mlp2Vars {
            w1: self.leaf(&p.w1),
            b1: self.leaf(&p.b1),
            w2: self.leaf(&p.w2),
            b2: self.leaf(&p.b2),
            activation: p.activation,
        }
    }

    pub fn rnn(&mut self, p: &'a RnnParams) -> RnnVars {
        RnnVars {
            w_in: self.leaf(&p.w_in),
            w_h: self.leaf(&p.w_h),
            b: self.leaf(&p.b),
        }
    }

    /// First-layer pre-activation `b1 + Σ W1[:, block_k] · part_k` for the
    /// parts that occupy the leading columns of the input, in order.
    ///
    /// Callers that score many candidates against a shared context compute the
    /// shared prefix once and finish each candidate with [`Tape::mlp2_finish`].
    pub fn mlp2_partial(
        &mut self,
        net: &Mlp2Vars,
        parts: &[Var],
        first_col: usize,
    ) -> Result<(Var, usize), NumError> {
        let mut acc = net.b1;
        let mut offset = first_col;
        for p in parts {
            let term = self.matvec_cols(net.w1, *p, offset)?;
            acc = self.add(acc, term)?;
            offset += self.n(*p);
        }
        Ok((acc, offset))
    }

    /// Completes a forward pass from a partial pre-activation and the
    /// remaining input parts (which start at column `offset`).
    pub fn mlp2_finish(
        &mut self,
        net: &Mlp2Vars,
        partial: Var,
        offset: usize,
        rest: &[Var],
    ) -> Result<Var, NumError> {
        let mut acc = partial;
        let mut off = offset;
        for p in rest {
            let term = self.matvec_cols(net.w1, *p, off)?;
            acc = self.add(acc, term)?;
            off += self.n(*p);
        }
        let in_cols = self.nodes[net.w1.0].cols;
        if off != in_cols {
            return Err(shape_err(
                "two-layer net",
                format!("inputs cover {off} of {in_cols} columns"),
            ));
        }
        let hidden = self.activate(acc, net.activation);
        let out = self.matvec(net.w2, hidden)?;
        self.add(out, net.b2)
    }

    /// Forward pass over the concatenation of `parts`.
    pub fn mlp2_forward(&mut self, net: &Mlp2Vars, parts: &[Var]) -> Result<Var, NumError> {
        self.mlp2_finish(net, net.b1, 0, parts)
    }

    pub fn rnn_step(&mut self, cell: &RnnVars, h_prev: Var, x: Var) -> Result<Var, NumError> {
        let a = self.matvec(cell.w_in, x)?;
        let b = self.matvec(cell.w_h, h_prev)?;
        let s = self.add(a, b)?;
        let s = self.add(s, cell.b)?;
        Ok(self.tanh(s))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads, NumError> {
        if self.n(loss) != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar loss, got a node of length {}",
                self.n(loss)
            )));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], lens: &[usize], v: Var) -> &'g mut [f64] {
            grads[v.0].get_or_insert_with(|| zeroed(lens[v.0]))
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatVec { w, offset, x } => {
                    let cols = self.nodes[w.0].cols;
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    debug_assert_ne!(w.0, x.0);
                    let mut gx = grads[x.0].take().unwrap_or_else(|| zeroed(lens[x.0]));
                    let gw = acc(&mut grads, &lens, *w);
                    matvec_cols_backward(wv, cols, *offset, xv, &g, Some(&mut gx), gw);
                    grads[x.0] = Some(gx);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let t = acc(&mut grads, &lens, *v);
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &lens, *a)
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(t, g)| *t += g);
                    acc(&mut grads, &lens, *b)
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(t, g)| *t -= g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, &lens, *a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(t, (g, y))| *t += g * y);
                    acc(&mut grads, &lens, *b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(t, (g, x))| *t += g * x);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = lens[p.0];
                        acc(&mut grads, &lens, *p)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(t, g)| *t += g);
                        off += n;
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, &lens, *a)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(t, (g, x))| {
                            if *x > 0.0 {
                                *t += g
                            }
                        });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, &lens, *a)
                        .iter_mut()
                        .zip(g.iter().zip(y.iter()))
                        .for_each(|(t, (g, y))| *t += g * (1.0 - y * y));
                }
                Op::Row { table, index } => {
                    let n = g.len();
                    let t = acc(&mut grads, &lens, *table);
                    t[index * n..(index + 1) * n]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(t, g)| *t += g);
                }
                Op::SumScalars(parts) => {
                    for p in parts {
                        acc(&mut grads, &lens, *p)[0] += g[0];
                    }
                }
                Op::SumElements(a) => {
                    acc(&mut grads, &lens, *a)
                        .iter_mut()
                        .for_each(|t| *t += g[0]);
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, &lens, *a)
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(t, g)| *t += g * c);
                }
                Op::CosineDistance(a, b) => {
                    // d = 1 - a·b / (|a||b|)
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (na, nb) = (norm(av), norm(bv));
                    let ab = dot(av, bv);
                    let s = g[0];
                    let inv = 1.0 / (na * nb);
                    let ca = ab / (na * na * na * nb);
                    let cb = ab / (na * nb * nb * nb);
                    acc(&mut grads, &lens, *a)
                        .iter_mut()
                        .zip(av.iter().zip(bv))
                        .for_each(|(t, (x, y))| *t += s * (ca * x - inv * y));
                    acc(&mut grads, &lens, *b)
                        .iter_mut()
                        .zip(av.iter().zip(bv))
                        .for_each(|(t, (x, y))| *t += s * (cb * y - inv * x));
                }
                Op::Hinge { x, margin } => {
                    if margin - self.scalar(*x) > 0.0 {
                        acc(&mut grads, &lens, *x)[0] -= g[0];
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    target,
                    probs,
                } => {
                    let t = acc(&mut grads, &lens, *logits);
                    for (k, (tk, pk)) in t.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *tk += g[0] * (pk - onehot);
                    }
                }
            }
            recycle(g);
        }
        Ok(Grads { grads, lens })
    }
}
