//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward computation as an arena of nodes; [`Var`]
//! is an index into that arena. Ops may only reference earlier vars, so the
//! arena order is already topological and the backward pass is a single
//! reverse sweep with gradient accumulation at fan-out points.

use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    SoftmaxCols(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat(Vec<Var>),
    TileVec(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    Linear {
        w: Var,
        x: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Upsample(Var),
    Reshape(Var),
    MeanStack(Vec<Var>),
    CrossEntropy {
        logits: Var,
        target: Tensor<S>,
        valid: Tensor<S>,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires: bool,
}

#[derive(Debug)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Record an input. `requires_grad` marks trainable parameters; frozen
    /// inputs (encoder features, embeddings) pass `false`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = ops::matmul(self.value(a), self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(v, Op::MatMul(a, b), r)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = ops::transpose2(self.value(a));
        let r = self.req(a);
        self.push(v, Op::Transpose(a), r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).scale(s);
        let r = self.req(a);
        self.push(v, Op::Scale(a, s), r)
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let v = ops::softmax_cols(self.value(a));
        let r = self.req(a);
        self.push(v, Op::SoftmaxCols(a), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = ops::sigmoid(self.value(a));
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        let r = self.req(a);
        self.push(v, Op::Relu(a), r)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ops::concat_channels(&tensors);
        let r = parts.iter().any(|p| self.req(*p));
        self.push(v, Op::Concat(parts.to_vec()), r)
    }

    pub fn tile_vector(&mut self, z: Var, h: usize, w: usize) -> Var {
        let v = ops::tile_vector(self.value(z), h, w);
        let r = self.req(z);
        self.push(v, Op::TileVec(z), r)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, dilation: usize) -> Var {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad, dilation);
        let r = self.req(x) || self.req(w) || self.req(b);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            },
            r,
        )
    }

    /// `y = W x + b` for a 1-D `x`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Var {
        let wt = self.value(w);
        let xt = self.value(x);
        let bt = self.value(b);
        assert_eq!(wt.cols(), xt.len(), "linear input length");
        assert_eq!(wt.rows(), bt.len(), "linear output length");
        let mut out = vec![S::zero(); wt.rows()];
        for i in 0..wt.rows() {
            let mut acc = bt.data()[i];
            for j in 0..wt.cols() {
                acc = acc + wt.at2(i, j) * xt.data()[j];
            }
            out[i] = acc;
        }
        let r = self.req(w) || self.req(x) || self.req(b);
        self.push(Tensor::vector(out), Op::Linear { w, x, b }, r)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = ops::global_avg_pool(self.value(x));
        let r = self.req(x);
        self.push(v, Op::GlobalAvgPool(x), r)
    }

    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = ops::upsample_bilinear(self.value(x), oh, ow);
        let r = self.req(x);
        self.push(v, Op::Upsample(x), r)
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Var {
        let v = self.value(x).reshaped(dims);
        let r = self.req(x);
        self.push(v, Op::Reshape(x), r)
    }

    /// Elementwise mean of same-shape vars.
    pub fn mean_stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let mut acc = self.value(parts[0]).clone();
        for p in &parts[1..] {
            acc.add_assign(self.value(*p));
        }
        let v = acc.scale(S::from_usize(parts.len()).recip());
        let r = parts.iter().any(|p| self.req(*p));
        self.push(v, Op::MeanStack(parts.to_vec()), r)
    }

    /// Scalar (shape `[1]`) mean cross-entropy over valid pixels.
    pub fn cross_entropy(&mut self, logits: Var, target: Tensor<S>, valid: Tensor<S>) -> Var {
        let loss = ops::softmax2_cross_entropy(self.value(logits), &target, &valid);
        let r = self.req(logits);
        self.push(
            Tensor::vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                target,
                valid,
            },
            r,
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per var;
    /// slots stay `None` for vars the root does not depend on and for vars
    /// with `requires_grad` false everywhere beneath them.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(
            self.value(root).dims().to_vec(),
            vec![S::one()],
        ));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                if self.req(*a) {
                    self.accum(grads, *a, ops::matmul(dy, &ops::transpose2(bt)));
                }
                if self.req(*b) {
                    self.accum(grads, *b, ops::matmul(&ops::transpose2(at), dy));
                }
            }
            Op::Transpose(a) => {
                self.accum(grads, *a, ops::transpose2(dy));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    self.accum(grads, *a, dy.mul(self.value(*b)));
                }
                if self.req(*b) {
                    self.accum(grads, *b, dy.mul(self.value(*a)));
                }
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, dy.scale(*s));
            }
            Op::SoftmaxCols(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *a, ops::softmax_cols_backward(y, dy));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let g = dy.zip_map(y, |d, yy| d * yy * (S::one() - yy));
                self.accum(grads, *a, g);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let g = dy.zip_map(x, |d, xx| if xx > S::zero() { d } else { S::zero() });
                self.accum(grads, *a, g);
            }
            Op::Concat(parts) => {
                let sizes: Vec<usize> = parts.iter().map(|p| self.value(*p).channels()).collect();
                let split = ops::split_channels(dy, &sizes);
                for (p, g) in parts.iter().zip(split) {
                    self.accum(grads, *p, g);
                }
            }
            Op::TileVec(z) => {
                self.accum(grads, *z, ops::tile_vector_backward(dy));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                if self.req(*x) {
                    let dims = (xt.channels(), xt.height(), xt.width());
                    self.accum(
                        grads,
                        *x,
                        ops::conv2d_input_grad(dy, wt, dims, *stride, *pad, *dilation),
                    );
                }
                if self.req(*w) || self.req(*b) {
                    let (dw, db) = ops::conv2d_param_grads(xt, dy, wt.dims(), *stride, *pad, *dilation);
                    if self.req(*w) {
                        self.accum(grads, *w, dw);
                    }
                    if self.req(*b) {
                        self.accum(grads, *b, db);
                    }
                }
            }
            Op::Linear { w, x, b } => {
                let wt = self.value(*w);
                let xt = self.value(*x);
                if self.req(*w) {
                    let mut dw = vec![S::zero(); wt.len()];
                    for i2 in 0..wt.rows() {
                        for j in 0..wt.cols() {
                            dw[i2 * wt.cols() + j] = dy.data()[i2] * xt.data()[j];
                        }
                    }
                    self.accum(grads, *w, Tensor::matrix(wt.rows(), wt.cols(), dw));
                }
                if self.req(*x) {
                    let mut dx = vec![S::zero(); xt.len()];
                    for j in 0..wt.cols() {
                        let mut acc = S::zero();
                        for i2 in 0..wt.rows() {
                            acc = acc + wt.at2(i2, j) * dy.data()[i2];
                        }
                        dx[j] = acc;
                    }
                    self.accum(grads, *x, Tensor::vector(dx));
                }
                if self.req(*b) {
                    self.accum(grads, *b, dy.clone());
                }
            }
            Op::GlobalAvgPool(x) => {
                let xt = self.value(*x);
                self.accum(
                    grads,
                    *x,
                    ops::global_avg_pool_backward(dy, xt.height(), xt.width()),
                );
            }
            Op::Upsample(x) => {
                let xt = self.value(*x);
                self.accum(
                    grads,
                    *x,
                    ops::upsample_bilinear_backward(dy, xt.height(), xt.width()),
                );
            }
            Op::Reshape(x) => {
                let dims = self.value(*x).dims().to_vec();
                self.accum(grads, *x, dy.reshaped(dims));
            }
            Op::MeanStack(parts) => {
                let k = S::from_usize(parts.len());
                for p in parts {
                    self.accum(grads, *p, dy.scale(k.recip()));
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                valid,
            } => {
                let g = ops::softmax2_cross_entropy_backward(
                    self.value(*logits),
                    target,
                    valid,
                    dy.data()[0],
                );
                self.accum(grads, *logits, g);
            }
        }
    }
}

/// Central finite differences of `f` at `x`, one element at a time.
/// Test helper for gradient verification; f64 recommended.
pub fn numeric_gradient<S, F>(f: F, x: &Tensor<S>, step: S) -> Tensor<S>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> S,
{
    let mut grad = Tensor::zeros(x.dims().to_vec());
    let two = S::from_f64(2.0);
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] = hi.data()[i] + step;
        let mut lo = x.clone();
        lo.data_mut()[i] = lo.data()[i] - step;
        grad.data_mut()[i] = (f(&hi) - f(&lo)) / (two * step);
    }
    grad
}

/// Max relative error between analytic and numeric gradients, with an
/// absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_error<S: Scalar>(analytic: &Tensor<S>, numeric: &Tensor<S>) -> S {
    assert_eq!(analytic.dims(), numeric.dims());
    let floor = S::from_f64(1e-8);
    let mut worst = S::zero();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (*a - *n).abs() / denom;
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn randn(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(dims, |_| rng::normal(&mut r))
    }

    /// Reduce an arbitrary output to a scalar with fixed random weights so
    /// every element contributes a distinct gradient path.
    fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let dims = t.value(y).dims().to_vec();
        let w = t.leaf(randn(dims.clone(), seed), false);
        let prod = t.mul(y, w);
        let flat: Vec<usize> = vec![t.value(prod).len()];
        let reshaped = t.reshape(prod, flat.clone());
        // sum via matmul with a ones row
        let ones = t.leaf(Tensor::matrix(1, flat[0], vec![1.0; flat[0]]), false);
        let col = t.reshape(reshaped, vec![flat[0], 1]);
        t.matmul(ones, col)
    }

    fn check_unary<F>(build: F, dims: Vec<usize>, seed: u64)
    where
        F: Fn(&mut Tape<f64>, Var) -> Var,
    {
        let x0 = randn(dims, seed);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = build(&mut tape, x);
        let loss = weighted_sum(&mut tape, y, seed + 1000);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).expect("missing grad").clone();

        let numeric = numeric_gradient(
            |xt| {
                let mut t = Tape::new();
                let x = t.leaf(xt.clone(), true);
                let y = build(&mut t, x);
                let l = weighted_sum(&mut t, y, seed + 1000);
                t.value(l).data()[0]
            },
            &x0,
            STEP,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn grad_matmul_both_sides() {
        let a0 = randn(vec![3, 4], 1);
        let b0 = randn(vec![4, 2], 2);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let y = tape.matmul(a, b);
        let loss = weighted_sum(&mut tape, y, 3);
        let grads = tape.backward(loss);

        let eval = |at: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(at.clone(), true);
            let b = t.leaf(bt.clone(), true);
            let y = t.matmul(a, b);
            let l = weighted_sum(&mut t, y, 3);
            t.value(l).data()[0]
        };
        let na = numeric_gradient(|at| eval(at, &b0), &a0, STEP);
        let nb = numeric_gradient(|bt| eval(&a0, bt), &b0, STEP);
        assert!(max_rel_error(grads.get(a).unwrap(), &na) < TOL);
        assert!(max_rel_error(grads.get(b).unwrap(), &nb) < TOL);
    }

    #[test]
    fn grad_transpose() {
        check_unary(|t, x| t.transpose(x), vec![3, 5], 4);
    }

    #[test]
    fn grad_softmax_cols() {
        check_unary(|t, x| t.softmax_cols(x), vec![4, 3], 5);
    }

    #[test]
    fn grad_sigmoid() {
        check_unary(|t, x| t.sigmoid(x), vec![2, 3, 2], 6);
    }

    #[test]
    fn grad_relu_away_from_kink() {
        // shift inputs away from 0 so finite differences stay valid
        check_unary(
            |t, x| {
                let half = t.leaf(Tensor::full(vec![2, 4], 0.5), false);
                let shifted = t.add(x, half);
                t.relu(shifted)
            },
            vec![2, 4],
            7,
        );
    }

    #[test]
    fn grad_elementwise_mul_fanout() {
        // same var on both sides: y = x * x exercises accumulation
        check_unary(|t, x| t.mul(x, x), vec![3, 3], 8);
    }

    #[test]
    fn grad_conv2d_all_inputs() {
        let x0 = randn(vec![2, 5, 5], 10);
        let w0 = randn(vec![3, 2, 3, 3], 11).scale(0.5);
        let b0 = randn(vec![3], 12);
        let eval = |xt: &Tensor<f64>, wt: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(xt.clone(), true);
            let w = t.leaf(wt.clone(), true);
            let b = t.leaf(bt.clone(), true);
            let y = t.conv2d(x, w, b, 2, 1, 1);
            let l = weighted_sum(&mut t, y, 13);
            t.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let w = tape.leaf(w0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let y = tape.conv2d(x, w, b, 2, 1, 1);
        let loss = weighted_sum(&mut tape, y, 13);
        let grads = tape.backward(loss);

        let nx = numeric_gradient(|t| eval(t, &w0, &b0), &x0, STEP);
        let nw = numeric_gradient(|t| eval(&x0, t, &b0), &w0, STEP);
        let nb = numeric_gradient(|t| eval(&x0, &w0, t), &b0, STEP);
        assert!(max_rel_error(grads.get(x).unwrap(), &nx) < TOL);
        assert!(max_rel_error(grads.get(w).unwrap(), &nw) < TOL);
        assert!(max_rel_error(grads.get(b).unwrap(), &nb) < TOL);
    }

    #[test]
    fn grad_dilated_conv() {
        let x0 = randn(vec![1, 6, 6], 20);
        let w0 = randn(vec![2, 1, 3, 3], 21);
        let b0 = randn(vec![2], 22);
        let eval = |xt: &Tensor<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(xt.clone(), true);
            let w = t.leaf(w0.clone(), false);
            let b = t.leaf(b0.clone(), false);
            let y = t.conv2d(x, w, b, 1, 2, 2);
            let l = weighted_sum(&mut t, y, 23);
            t.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let w = tape.leaf(w0.clone(), false);
        let b = tape.leaf(b0.clone(), false);
        let y = tape.conv2d(x, w, b, 1, 2, 2);
        let loss = weighted_sum(&mut tape, y, 23);
        let grads = tape.backward(loss);
        let nx = numeric_gradient(eval, &x0, STEP);
        assert!(max_rel_error(grads.get(x).unwrap(), &nx) < TOL);
    }

    #[test]
    fn grad_linear() {
        let w0 = randn(vec![4, 3], 30);
        let x0 = randn(vec![3], 31);
        let b0 = randn(vec![4], 32);
        let eval = |wt: &Tensor<f64>, xt: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut t = Tape::new();
            let w = t.leaf(wt.clone(), true);
            let x = t.leaf(xt.clone(), true);
            let b = t.leaf(bt.clone(), true);
            let y = t.linear(w, x, b);
            let l = weighted_sum(&mut t, y, 33);
            t.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone(), true);
        let x = tape.leaf(x0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let y = tape.linear(w, x, b);
        let loss = weighted_sum(&mut tape, y, 33);
        let grads = tape.backward(loss);
        let nw = numeric_gradient(|t| eval(t, &x0, &b0), &w0, STEP);
        let nx = numeric_gradient(|t| eval(&w0, t, &b0), &x0, STEP);
        let nb = numeric_gradient(|t| eval(&w0, &x0, t), &b0, STEP);
        assert!(max_rel_error(grads.get(w).unwrap(), &nw) < TOL);
        assert!(max_rel_error(grads.get(x).unwrap(), &nx) < TOL);
        assert!(max_rel_error(grads.get(b).unwrap(), &nb) < TOL);
    }

    #[test]
    fn grad_concat_tile_pool() {
        check_unary(
            |t, x| {
                let pooled = t.global_avg_pool(x);
                let flat = t.reshape(pooled, vec![2]);
                let tiled = t.tile_vector(flat, 3, 3);
                t.concat_channels(&[x, tiled])
            },
            vec![2, 3, 3],
            40,
        );
    }

    #[test]
    fn grad_upsample() {
        check_unary(|t, x| t.upsample_bilinear(x, 5, 7), vec![2, 3, 3], 41);
    }

    #[test]
    fn grad_mean_stack_and_scale() {
        let x0 = randn(vec![2, 2], 50);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y1 = tape.scale(x, 3.0);
        let y2 = tape.mul(x, x);
        let m = tape.mean_stack(&[y1, y2, x]);
        let loss = weighted_sum(&mut tape, m, 51);
        let grads = tape.backward(loss);
        let numeric = numeric_gradient(
            |xt| {
                let mut t = Tape::new();
                let x = t.leaf(xt.clone(), true);
                let y1 = t.scale(x, 3.0);
                let y2 = t.mul(x, x);
                let m = t.mean_stack(&[y1, y2, x]);
                let l = weighted_sum(&mut t, m, 51);
                t.value(l).data()[0]
            },
            &x0,
            STEP,
        );
        assert!(max_rel_error(grads.get(x).unwrap(), &numeric) < TOL);
    }

    #[test]
    fn grad_cross_entropy_with_ignored_pixels() {
        let x0 = randn(vec![2, 3, 3], 60);
        let mut target = Tensor::<f64>::zeros(vec![3, 3]);
        target.set2(0, 0, 1.0);
        target.set2(1, 2, 1.0);
        let mut valid = Tensor::full(vec![3, 3], 1.0);
        valid.set2(2, 2, 0.0);
        let eval = |xt: &Tensor<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(xt.clone(), true);
            let l = t.cross_entropy(x, target.clone(), valid.clone());
            t.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = tape.cross_entropy(x, target.clone(), valid.clone());
        let grads = tape.backward(loss);
        let numeric = numeric_gradient(eval, &x0, STEP);
        assert!(max_rel_error(grads.get(x).unwrap(), &numeric) < TOL);
        // masked pixel took no gradient
        let g = grads.get(x).unwrap();
        assert_eq!(g.at3(0, 2, 2), 0.0);
        assert_eq!(g.at3(1, 2, 2), 0.0);
    }

    #[test]
    fn no_grad_for_frozen_leaves() {
        let mut tape = Tape::<f64>::new();
        let frozen = tape.leaf(randn(vec![2, 2], 70), false);
        let live = tape.leaf(randn(vec![2, 2], 71), true);
        let y = tape.mul(frozen, live);
        let loss = weighted_sum(&mut tape, y, 72);
        let grads = tape.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }
}
