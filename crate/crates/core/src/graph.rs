//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! `Array2<T>`; scalars are `1×1` matrices. [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node created with
//! [`Graph::param`] (and for everything derived from one).
//!
//! The operation set is the one the pose network needs: dense layers, layer
//! normalization, GELU, fused masked multi-head attention, row gathers and
//! concatenations, and the fused losses of the training objective.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        rstd: Array1<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    Reshape(Var),
    SmoothL1 {
        pred: Var,
        diff: Array2<T>,
        weight: Array2<T>,
        beta: T,
        denom: T,
    },
    Bce {
        prob: Var,
        target: Array2<T>,
        weight: Array2<T>,
        eps: T,
        denom: T,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Array2<T>,
        denom: T,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation of one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_A: f64 = 0.044715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(GELU_A) * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Smooth-L1 with transition `beta`.
#[inline]
pub fn smooth_l1<T: Real>(d: T, beta: T) -> T {
    let a = d.abs();
    if a < beta {
        T::lit(0.5) * d * d / beta
    } else {
        a - T::lit(0.5) * beta
    }
}

#[inline]
fn smooth_l1_grad<T: Real>(d: T, beta: T) -> T {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn row_softmax_in_place<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
            sum += *v;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddBias(x, bias), rg)
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x) * c;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Per-row layer normalization with affine `1×n` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::lit(1e-5);
        let xv = self.value(x);
        let n = T::lit(xv.ncols() as f64);
        let mut xhat = xv.clone();
        let mut rstd = Array1::zeros(xv.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            *r = inv;
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over the rows of `q`, `k`,
    /// `v` (all `S×C`). Keys/values whose `key_mask` entry is false are
    /// excluded from every softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (s, c) = qv.dim();
        assert_eq!(c % heads, 0, "width {c} not divisible by {heads} heads");
        assert_eq!(key_mask.len(), kv.nrows());
        let d = c / heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut out = Array2::zeros((s, c));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            for (j, &keep) in key_mask.iter().enumerate() {
                if keep {
                    p.column_mut(j).mapv_inplace(|x| x * scale);
                } else {
                    p.column_mut(j).fill(T::neg_infinity());
                }
            }
            row_softmax_in_place(&mut p);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceRows(x, start), rg)
    }

    /// Row gather: output row `i` is `src[index[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, src: Var, index: Vec<Option<usize>>) -> Var {
        let sv = self.value(src);
        let mut value = Array2::zeros((index.len(), sv.ncols()));
        for (mut row, ix) in value.rows_mut().into_iter().zip(&index) {
            if let Some(i) = ix {
                row.assign(&sv.row(*i));
            }
        }
        let rg = self.rg(src);
        self.push(value, Op::Gather(src, index), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<T> = self.value(x).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("element count must agree");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Mean smooth-L1 over elements with non-zero `weight`; `0` when none.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &Array2<T>, weight: &Array2<T>, beta: T) -> Var {
        let diff = self.value(pred) - target;
        let wsum: T = weight.sum();
        let denom = if wsum > T::zero() { wsum } else { T::one() };
        let mut total = T::zero();
        Zip::from(&diff).and(weight).for_each(|&d, &w| {
            if w != T::zero() {
                total += w * smooth_l1(d, beta);
            }
        });
        let value = Array2::from_elem((1, 1), total / denom);
        let rg = self.rg(pred);
        self.push(
            value,
            Op::SmoothL1 {
                pred,
                diff,
                weight: weight.clone(),
                beta,
                denom,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy on probabilities clamped to `[eps, 1-eps]`.
    pub fn bce_loss(&mut self, prob: Var, target: &Array2<T>, weight: &Array2<T>, eps: T) -> Var {
        let pv = self.value(prob);
        let wsum: T = weight.sum();
        let denom = if wsum > T::zero() { wsum } else { T::one() };
        let mut total = T::zero();
        Zip::from(pv).and(target).and(weight).for_each(|&p, &t, &w| {
            if w != T::zero() {
                let p = p.max(eps).min(T::one() - eps);
                total -= w * (t * p.ln() + (T::one() - t) * (T::one() - p).ln());
            }
        });
        let value = Array2::from_elem((1, 1), total / denom);
        let rg = self.rg(prob);
        self.push(
            value,
            Op::Bce {
                prob,
                target: target.clone(),
                weight: weight.clone(),
                eps,
                denom,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy over rows with `mask[i]`; `0` when none.
    pub fn softmax_ce_loss(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Var {
        let lv = self.value(logits);
        assert_eq!(labels.len(), lv.nrows());
        assert_eq!(mask.len(), lv.nrows());
        let mut probs = lv.clone();
        row_softmax_in_place(&mut probs);
        let count = mask.iter().filter(|m| **m).count();
        let denom = T::lit(count.max(1) as f64);
        let mut total = T::zero();
        for (i, row) in lv.rows().into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[labels[i]];
        }
        let value = Array2::from_elem((1, 1), total / denom);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
                denom,
            },
            rg,
        )
    }

    /// `Σ w_i · x_i` over `1×1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for (v, w) in terms {
            total += *w * self.scalar(*v);
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse pass from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let d = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *b, d);
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut grads, *x, g.mapv(|v| v * c));
                }
                Op::Gelu(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*x)).for_each(|d, &x| *d *= gelu_grad(x));
                    self.acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (T::one() - y));
                    self.acc(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.rg(*gamma) {
                        let d = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *gamma, d);
                    }
                    if self.rg(*beta) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *beta, d);
                    }
                    if self.rg(*x) {
                        let mut dxhat = g * self.value(*gamma);
                        let n = T::lit(xhat.ncols() as f64);
                        for ((mut row, xh), &r) in dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(rstd.iter()) {
                            let m1 = row.sum() / n;
                            let m2 = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                            Zip::from(&mut row).and(&xh).for_each(|d, &h| *d = r * (*d - m1 - h * m2));
                        }
                        self.acc(&mut grads, *x, dxhat);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let c = qv.ncols();
                    let d = c / heads;
                    let scale = T::one() / T::lit(d as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * d..(h + 1) * d];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let mut ds = go.dot(&vv.slice(cols).t());
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: T = row.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                            Zip::from(&mut row).and(&prow).for_each(|x, &pp| *x = pp * (*x - dot) * scale);
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    self.acc(&mut grads, *q, dq);
                    self.acc(&mut grads, *k, dk);
                    self.acc(&mut grads, *v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            let d = g.slice(s![.., off..off + w]).to_owned();
                            self.acc(&mut grads, *p, d);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.rg(*p) {
                            let d = g.slice(s![off..off + h, ..]).to_owned();
                            self.acc(&mut grads, *p, d);
                        }
                        off += h;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.acc(&mut grads, *x, d);
                }
                Op::Gather(src, index) => {
                    let mut d = Array2::zeros(self.value(*src).dim());
                    for (row, ix) in g.rows().into_iter().zip(index) {
                        if let Some(i) = ix {
                            let mut target = d.row_mut(*i);
                            target += &row;
                        }
                    }
                    self.acc(&mut grads, *src, d);
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).dim();
                    let flat: Vec<T> = g.iter().copied().collect();
                    let d = Array2::from_shape_vec(dim, flat).expect("reshape gradient");
                    self.acc(&mut grads, *x, d);
                }
                Op::SmoothL1 {
                    pred,
                    diff,
                    weight,
                    beta,
                    denom,
                } => {
                    let up = g[[0, 0]] / *denom;
                    let mut d = Array2::zeros(diff.dim());
                    Zip::from(&mut d).and(diff).and(weight).for_each(|o, &df, &w| {
                        if w != T::zero() {
                            *o = up * w * smooth_l1_grad(df, *beta);
                        }
                    });
                    self.acc(&mut grads, *pred, d);
                }
                Op::Bce {
                    prob,
                    target,
                    weight,
                    eps,
                    denom,
                } => {
                    let up = g[[0, 0]] / *denom;
                    let mut d = Array2::zeros(target.dim());
                    let pv = self.value(*prob);
                    let (lo, hi) = (*eps, T::one() - *eps);
                    Zip::from(&mut d).and(pv).and(target).and(weight).for_each(|o, &p, &t, &w| {
                        if w != T::zero() && p > lo && p < hi {
                            *o = up * w * (-t / p + (T::one() - t) / (T::one() - p));
                        }
                    });
                    self.acc(&mut grads, *prob, d);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    mask,
                    probs,
                    denom,
                } => {
                    let up = g[[0, 0]] / *denom;
                    let mut d = probs.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        if mask[i] {
                            row[labels[i]] -= T::one();
                            row.mapv_inplace(|v| v * up);
                        } else {
                            row.fill(T::zero());
                        }
                    }
                    self.acc(&mut grads, *logits, d);
                }
                Op::WeightedSum(terms) => {
                    let up = g[[0, 0]];
                    for (v, w) in terms {
                        if self.rg(*v) {
                            self.acc(&mut grads, *v, Array2::from_elem((1, 1), up * *w));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        }
    }
}

/// Gradients of the backward root with respect to differentiable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
