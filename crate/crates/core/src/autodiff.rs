//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! node order is a topological order and the backward sweep is a single
//! reverse pass over it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Row `i` multiplied by `factors[i]`.
    ScaleRows(Var, Vec<f64>),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    /// `[n, d] -> [n, 1]`, squared norm of each row.
    RowSumSquares(Var),
    Sum(Var),
    Mean(Var),
    /// Column-wise concatenation of two `[n, *]` tensors.
    Concat(Var, Var),
    /// `[n, d] -> [n, 1]` through an opaque per-row function whose gradient
    /// was evaluated during the forward pass.
    RowMap { input: Var, jacobian: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::wrt`] but materializes zeros for unreachable leaves.
    pub fn wrt_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.wrt(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn matmul(x: &[f64], w: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * m..(i + 1) * m];
        for (p, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wp = &w[p * m..(p + 1) * m];
            for (o, &wv) in oi.iter_mut().zip(wp) {
                *o += xv * wv;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(&[xs[0], ws[0]], &xs));
        }
        let (n, k, m) = (xs[0], ws[0], ws[1]);
        if bs != [m] {
            return Err(Error::shape(&[m], &bs));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        matmul(self.value(x).data(), self.value(w).data(), n, k, m, &mut out);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::from_raw(vec![n, m], out), Op::Affine { x, w, b }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        let rg = self.needs(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let src = self.value(a);
        if factors.len() != src.rows() {
            return Err(Error::shape(&[src.rows()], &[factors.len()]));
        }
        let d = src.last_dim();
        let mut v = src.clone();
        for (row, f) in v.data_mut().chunks_exact_mut(d).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::ScaleRows(a, factors), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.needs(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.needs(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// Elementwise square root. Inputs must be strictly positive wherever a
    /// gradient is taken.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Sqrt(a), rg))
    }

    pub fn row_sum_squares(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data: Vec<f64> = src.row_iter().map(|r| r.iter().map(|x| x * x).sum()).collect();
        let v = Tensor::from_raw(vec![data.len(), 1], data);
        let rg = self.needs(&[a]);
        self.push(v, Op::RowSumSquares(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Tensor::scalar(src.sum() / src.len() as f64);
        let rg = self.needs(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape(&[ta.rows()], &[tb.rows()]));
        }
        let (da, db) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.row_iter().zip(tb.row_iter()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let v = Tensor::from_raw(vec![ta.rows(), da + db], data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Concat(a, b), rg))
    }

    /// Applies `f` to every row of `a`. `f` returns the row's value and the
    /// gradient of that value with respect to the row.
    pub fn row_map<F>(&mut self, a: Var, f: F) -> Result<Var>
    where
        F: Fn(usize, &[f64]) -> (f64, Vec<f64>),
    {
        let src = self.value(a);
        let d = src.last_dim();
        let mut values = Vec::with_capacity(src.rows());
        let mut jacobian = Vec::with_capacity(src.len());
        for (i, row) in src.row_iter().enumerate() {
            let (value, grad) = f(i, row);
            if grad.len() != d {
                return Err(Error::shape(&[d], &[grad.len()]));
            }
            values.push(value);
            jacobian.extend(grad);
        }
        let v = Tensor::from_raw(vec![values.len(), 1], values);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::RowMap { input: a, jacobian }, rg))
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, k) = (xv.rows(), xv.last_dim());
                let m = wv.last_dim();
                if wants(*x) {
                    // dx = g · wᵀ
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        let gi = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let wp = &wv.data()[p * m..(p + 1) * m];
                            dx[i * k + p] = gi.iter().zip(wp).map(|(a, b)| a * b).sum();
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_raw(vec![n, k], dx));
                }
                if wants(*w) {
                    // dw = xᵀ · g
                    let mut dw = vec![0.0; k * m];
                    for i in 0..n {
                        let gi = &gd[i * m..(i + 1) * m];
                        for (p, &xv) in xv.row(i).iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, &gv) in dw[p * m..(p + 1) * m].iter_mut().zip(gi) {
                                *o += xv * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], Tensor::from_raw(vec![k, m], dw));
                }
                if wants(*b) {
                    let mut db = vec![0.0; m];
                    for gi in gd.chunks_exact(m) {
                        for (o, &gv) in db.iter_mut().zip(gi) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::from_raw(vec![m], db));
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(&mut grads[a.0], Tensor::from_raw(g.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], Tensor::from_raw(g.shape().to_vec(), d));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.zip_map(self.value(*b), |g, y| g * y).expect("shapes checked");
                    accumulate(&mut grads[a.0], d);
                }
                if wants(*b) {
                    let d = g.zip_map(self.value(*a), |g, x| g * x).expect("shapes checked");
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, f) => accumulate(&mut grads[a.0], g.scale(*f)),
            Op::ScaleRows(a, factors) => {
                let d = g.last_dim();
                let mut out = g.clone();
                for (row, f) in out.data_mut().chunks_exact_mut(d).zip(factors) {
                    row.iter_mut().for_each(|x| *x *= f);
                }
                accumulate(&mut grads[a.0], out);
            }
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |g, x| 2.0 * g * x).expect("same shape");
                accumulate(&mut grads[a.0], d);
            }
            Op::Sqrt(a) => {
                let d = g.zip_map(&node.value, |g, y| 0.5 * g / y).expect("same shape");
                accumulate(&mut grads[a.0], d);
            }
            Op::RowSumSquares(a) => {
                let x = self.value(*a);
                let d = x.last_dim();
                let mut out = x.scale(2.0);
                for (row, &gi) in out.data_mut().chunks_exact_mut(d).zip(gd) {
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                accumulate(&mut grads[a.0], out);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                accumulate(&mut grads[a.0], Tensor::full(shape, gd[0]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], Tensor::full(x.shape(), gd[0] / x.len() as f64));
            }
            Op::Concat(a, b) => {
                let (da, db) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let n = g.rows();
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for row in g.row_iter() {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                if wants(*a) {
                    accumulate(&mut grads[a.0], Tensor::from_raw(vec![n, da], ga));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], Tensor::from_raw(vec![n, db], gb));
                }
            }
            Op::RowMap { input, jacobian } => {
                let x = self.value(*input);
                let d = x.last_dim();
                let mut out = jacobian.clone();
                for (row, &gi) in out.chunks_exact_mut(d).zip(gd) {
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                accumulate(&mut grads[input.0], Tensor::from_raw(x.shape().to_vec(), out));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(param) for a graph built by `build`.
    fn check_gradient<F>(param: Tensor, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let p = tape.parameter(param.clone());
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt_or_zeros(p, param.shape());

        let h = 1e-5;
        for i in 0..param.len() {
            let eval = |delta: f64| {
                let mut shifted = param.clone();
                shifted.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let p = tape.parameter(shifted);
                let loss = build(&mut tape, p);
                tape.value(loss).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "coord {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.parameter(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn quadratic_form_matches_closed_form() {
        // loss = ||x W||² with x a row vector; dL/dW = 2 xᵀ (x W).
        let x = Tensor::from_rows(&[vec![1.0, 2.0, -1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.parameter(w.clone());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.affine(xv, wv, b).unwrap();
        let sq = tape.square(y);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        let y = tape.value(y).clone();
        let mut expected = Vec::new();
        for &xi in x.data() {
            for &yj in y.data() {
                expected.push(2.0 * xi * yj);
            }
        }
        assert_eq!(g.wrt(wv).unwrap().data(), expected.as_slice());
        assert!(g.wrt(xv).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.parameter(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn primitive_ops_match_finite_differences() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[3, 4], -1.0, 1.0);
            let other = random(&mut rng, &[3, 4], -1.0, 1.0);
            let w = random(&mut rng, &[4, 2], -1.0, 1.0);
            let factors: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();

            check_gradient(x.clone(), |t, p| {
                let th = t.tanh(p);
                let o = t.constant(other.clone());
                let m = t.mul(th, o).unwrap();
                let s = t.sub(m, p).unwrap();
                let sr = t.scale_rows(s, factors.clone()).unwrap();
                let sq = t.row_sum_squares(sr);
                let shifted = t.add_scalar(sq, 0.3);
                let r = t.sqrt(shifted).unwrap();
                t.mean(r)
            });
            check_gradient(x.clone(), |t, p| {
                let wv = t.constant(w.clone());
                let b = t.constant(Tensor::full(&[2], 0.1));
                let y = t.affine(p, wv, b).unwrap();
                let r = t.relu(y);
                let c = t.concat(r, p).unwrap();
                let sc = t.scale(c, 1.7);
                let sq = t.square(sc);
                t.sum(sq)
            });
            check_gradient(w.clone(), |t, p| {
                let xv = t.constant(x.clone());
                let b = t.constant(Tensor::zeros(&[2]));
                let y = t.affine(xv, p, b).unwrap();
                let y2 = t.tanh(y);
                let rm = t.row_map(y2, |_, row| {
                    let v: f64 = row.iter().map(|x| x.powi(3)).sum();
                    (v, row.iter().map(|x| 3.0 * x * x).collect())
                })
                .unwrap();
                let s = t.add(rm, rm).unwrap();
                t.sum(s)
            });
        }
    }
}
