//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Leaves carry no gradient logic: trainable parameters and constants are
//! both leaves, and callers decide which leaf gradients they consume.

use super::tensor::{smooth_norm, Tensor2};
use crate::error::{shape_err, Error, Result};

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
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    NormalizeRows(Var),
    StraightThrough(Var),
    SelectRows(Var, Vec<usize>),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Tensor2,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; all-zero when the loss does not reach it.
    pub fn get(&self, var: Var) -> Tensor2 {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(var.0).copied().unwrap_or((0, 0));
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor2> {
        vars.iter().map(|v| self.get(*v)).collect()
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

    pub fn value(&self, var: Var) -> &Tensor2 {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Tensor2> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::State(format!("variable {} is not on this tape", var.0)))
    }

    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaves(&mut self, values: &[&Tensor2]) -> Vec<Var> {
        values.iter().map(|v| self.leaf((*v).clone())).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.check(a)?.matmul_t(self.check(b)?)?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    /// Broadcast-adds the `1 x cols` node `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.check(a)?.add_row(self.check(row)?)?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.check(a)?.add(self.check(b)?)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.check(a)?.mul(self.check(b)?)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.check(a)?.map(|x| scale * x + shift);
        Ok(self.push(v, Op::Affine(a, scale)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a)?.map(|x| x.max(0.0));
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a)?.map(f64::tanh);
        Ok(self.push(v, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a)?.map(sigmoid);
        Ok(self.push(v, Op::Sigmoid(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor2::scalar(self.check(a)?.sum());
        Ok(self.push(v, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        if t.is_empty() {
            return Err(Error::Argument("mean of an empty tensor".into()));
        }
        let v = Tensor2::scalar(t.mean());
        Ok(self.push(v, Op::Mean(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a)?.map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a)?.map(f64::exp);
        Ok(self.push(v, Op::Exp(a)))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.check(a)?.map(|x| x.clamp(lo, hi));
        Ok(self.push(v, Op::Clamp(a, lo, hi)))
    }

    /// Row-wise L2 normalisation.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.check(a)?.normalize_rows();
        Ok(self.push(v, Op::NormalizeRows(a)))
    }

    /// Forward value is `replacement`; the backward pass hands the incoming
    /// gradient to `a` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, a: Var, replacement: Tensor2) -> Result<Var> {
        let src = self.check(a)?;
        if src.shape() != replacement.shape() {
            return shape_err("straight_through", format!("{:?} vs {:?}", src.shape(), replacement.shape()));
        }
        Ok(self.push(replacement, Op::StraightThrough(a)))
    }

    /// Rows `indices` of `a` (repeats allowed); gradients scatter back.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.check(a)?.select_rows(indices)?;
        Ok(self.push(v, Op::SelectRows(a, indices.to_vec())))
    }

    /// Fused, max-shifted softmax cross-entropy:
    /// `-(1/B) Σ_i w_i · log softmax(logits_i)[targets_i]`, with `w_i = 1`
    /// when `weights` is `None`. Weights are constants.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let l = self.check(logits)?;
        let (b, n) = l.shape();
        if b == 0 || targets.len() != b {
            return shape_err("softmax_ce", format!("{} targets for {b} rows", targets.len()));
        }
        if let Some(w) = weights {
            if w.len() != b {
                return shape_err("softmax_ce", format!("{} weights for {b} rows", w.len()));
            }
        }
        let mut probs = Tensor2::zeros(b, n);
        let mut loss = 0.0;
        for i in 0..b {
            let t = targets[i];
            if t >= n {
                return Err(Error::Argument(format!("target {t} out of range for {n} classes")));
            }
            let row = l.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let log_z = z.ln() + m;
            for (p, x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            let w = weights.map_or(1.0, |w| w[i]);
            loss -= w * (row[t] - log_z);
        }
        let value = Tensor2::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        let root = self.check(loss)?;
        if root.shape() != (1, 1) {
            return Err(Error::State(format!("backward needs a scalar loss, got {:?}", root.shape())));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_t(val(*b))?)?;
                accumulate(grads, *b, val(*a).t_matmul(g)?)?;
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                accumulate(grads, *a, g.matmul(val(*b))?)?;
                accumulate(grads, *b, g.t_matmul(val(*a))?)?;
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *row, g.sum_rows())?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b))?)?;
                accumulate(grads, *b, g.mul(val(*a))?)?;
            }
            Op::Affine(a, scale) => accumulate(grads, *a, g.scale(*scale))?,
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?;
                accumulate(grads, *a, d)?;
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, "tanh'", |g, y| g * (1.0 - y * y))?;
                accumulate(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, "sigmoid'", |g, y| g * y * (1.0 - y))?;
                accumulate(grads, *a, d)?;
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Tensor2::filled(r, c, g.data()[0]))?;
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Tensor2::filled(r, c, g.data()[0] / (r * c) as f64))?;
            }
            Op::Log(a) => {
                let d = g.zip_map(val(*a), "log'", |g, x| g / x)?;
                accumulate(grads, *a, d)?;
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, "exp'", |g, y| g * y)?;
                accumulate(grads, *a, d)?;
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(val(*a), "clamp'", |g, x| if x >= lo && x <= hi { g } else { 0.0 })?;
                accumulate(grads, *a, d)?;
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let mut d = Tensor2::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let n = smooth_norm(xr);
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let n3 = n * n * n;
                    for ((o, xv), gv) in d.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = gv / n - xv * xg / n3;
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::StraightThrough(a) => accumulate(grads, *a, g.clone())?,
            Op::SelectRows(a, indices) => {
                let x = val(*a);
                let mut d = Tensor2::zeros(x.rows(), x.cols());
                for (i, &r) in indices.iter().enumerate() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let b = probs.rows();
                let scale = g.data()[0] / b as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[i]);
                    let row = d.row_mut(i);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * scale;
                    }
                }
                accumulate(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], var: Var, g: Tensor2) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => *existing = existing.add(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::row_vector(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::row_vector(&[1.0, 2.0]));
        let unused = tape.leaf(Tensor2::zeros(3, 2));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(unused);
        assert_eq!(g.shape(), (3, 2));
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_without_computation_is_state_error() {
        let tape = Tape::new();
        let other = {
            let mut t = Tape::new();
            t.leaf(Tensor2::scalar(1.0))
        };
        assert!(matches!(tape.backward(other), Err(Error::State(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::row_vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn softmax_ce_survives_huge_logits() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor2::from_rows(&[[1000.0, 0.0], [0.0, 1000.0]]).unwrap());
        let loss = tape.softmax_ce(l, &[0, 1], None).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
        let g = tape.backward(loss).unwrap().get(l);
        assert!(g.is_finite());
    }

    #[test]
    fn softmax_ce_two_by_two() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor2::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap());
        let loss = tape.softmax_ce(l, &[0, 1], None).unwrap();
        // ln(1 + e^-2)
        assert!((tape.scalar(loss) - 0.126_928_011_042_972_6).abs() < 1e-12);
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let picked = tape.select_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(picked).unwrap();
        let g = tape.backward(loss).unwrap().get(x);
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
