//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, which is therefore a valid
//! topological order; `backward` walks the tape from the loss to the leaves.
//! Parameters enter the tape through [`Tape::param`], which keys them by the
//! address of the borrowed [`Tensor`] so gradients can be written back with
//! [`Gradients::populate`] once the borrow ends.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    RowSum(Var),
    RepeatRows(Var, usize),
    Reshape(Var),
    LogSumExpRows(Var),
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Elementwise activation selector shared by layers and the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf holding a copy of `t`; tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// A constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Register a model parameter. Registering the same tensor twice returns
    /// the same node.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t);
        if t.requires_grad() {
            self.params.insert(key, v);
        }
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims2(a)?;
        if self.node(bias).value.len() != m {
            return Err(Error::Shape(format!(
                "add_row: bias of length {} for {m} columns",
                self.node(bias).value.len()
            )));
        }
        let b = &self.node(bias).value;
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.node(a).shape.clone();
        let ng = self.ng(a) || self.ng(bias);
        let _ = n;
        Ok(self.push(shape, out, Op::AddRow(a, bias), ng))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(a).shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.ng(a);
        self.push(shape, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Identity => a,
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row of an `n×m` matrix into a length-`n` vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2(a)?;
        let out: Vec<f64> = self.value(a).chunks(m).map(|r| r.iter().sum()).collect();
        let ng = self.ng(a);
        Ok(self.push(vec![n], out, Op::RowSum(a), ng))
    }

    /// Repeats every row `k` times consecutively: row `i*k + j` is row `i`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (n, m) = self.dims2(a)?;
        if k == 0 {
            return Err(Error::InvalidArgument("repeat_rows with k = 0".into()));
        }
        let mut out = Vec::with_capacity(n * m * k);
        for row in self.value(a).chunks(m) {
            for _ in 0..k {
                out.extend_from_slice(row);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![n * k, m], out, Op::RepeatRows(a, k), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} to {shape:?}",
                self.node(a).shape
            )));
        }
        let value = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, value, Op::Reshape(a), ng))
    }

    /// Row-wise `log Σ_j exp(a_ij)`, stabilised by subtracting the row max.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2(a)?;
        let out: Vec<f64> = self.value(a).chunks(m).map(logsumexp).collect();
        let ng = self.ng(a);
        Ok(self.push(vec![n], out, Op::LogSumExpRows(a), ng))
    }

    /// `Σ_i c_i · a_i` over same-shaped inputs.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("combine of no terms".into()))?;
        let shape = self.node(first).shape.clone();
        let mut out = vec![0.0; self.value(first).len()];
        let mut ng = false;
        for &(v, c) in terms {
            if self.node(v).shape != shape {
                return Err(Error::Shape(format!(
                    "combine: {:?} vs {shape:?}",
                    self.node(v).shape
                )));
            }
            for (o, x) in out.iter_mut().zip(self.value(v)) {
                *o += c * x;
            }
            ng |= self.ng(v);
        }
        Ok(self.push(shape, out, Op::Combine(terms.to_vec()), ng))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut by_param = HashMap::with_capacity(self.params.len());
        for (&key, &v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
            by_param.insert(key, g);
        }
        Ok(Gradients { by_param })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).expect("checked in forward");
                let n = node.shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| gemm(m, n, k, g, false, bv, true, ga, true));
                acc(*b, &mut |gb| gemm(k, m, n, av, true, g, false, gb, true));
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let m = self.nodes[bias.0].value.len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for ((o, x), w) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), w) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * w;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += c * x;
                }
            }),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, x), t) in ga.iter_mut().zip(g).zip(y) {
                    *o += x * (1.0 - t * t);
                }
            }),
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((o, x), t) in ga.iter_mut().zip(g).zip(y) {
                    if *t > 0.0 {
                        *o += x;
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, x), s) in ga.iter_mut().zip(g).zip(y) {
                    *o += x * s * (1.0 - s);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, x), e) in ga.iter_mut().zip(g).zip(y) {
                    *o += x * e;
                }
            }),
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        *o += x / v;
                    }
                })
            }
            Op::Square(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * x * v;
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        if v >= lo && v <= hi {
                            *o += x;
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::RowSum(a) => {
                let m = self.nodes[a.0].shape.last().copied().unwrap_or(1);
                acc(*a, &mut |ga| {
                    for (row, gi) in ga.chunks_mut(m).zip(g) {
                        row.iter_mut().for_each(|o| *o += gi);
                    }
                })
            }
            Op::RepeatRows(a, k) => {
                let m = node.shape[1];
                acc(*a, &mut |ga| {
                    for (i, row) in ga.chunks_mut(m).enumerate() {
                        for j in 0..*k {
                            let src = &g[(i * k + j) * m..(i * k + j + 1) * m];
                            add_into(row, src);
                        }
                    }
                })
            }
            Op::LogSumExpRows(a) => {
                let av = &self.nodes[a.0].value;
                let m = self.nodes[a.0].shape.last().copied().unwrap_or(1);
                acc(*a, &mut |ga| {
                    for (((grow, arow), gi), lse) in
                        ga.chunks_mut(m).zip(av.chunks(m)).zip(g).zip(y)
                    {
                        for (o, v) in grow.iter_mut().zip(arow) {
                            *o += gi * (v - lse).exp();
                        }
                    }
                })
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    acc(v, &mut |gv| {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += c * x;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// Max-shifted log-sum-exp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradients produced by [`Tape::backward`], keyed by parameter.
#[derive(Debug)]
pub struct Gradients {
    by_param: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_param
            .get(&(t as *const Tensor as usize))
            .map(Vec::as_slice)
    }

    /// Writes each registered parameter's gradient into its `grad` slot.
    /// Tensors that were not on the tape are left untouched.
    pub fn populate<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        for t in params {
            if let Some(g) = self.by_param.get(&(t as *const Tensor as usize)) {
                t.set_grad(g.clone())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.sum(v);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::vector(vec![2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_tensor_gets_no_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let w = Tensor::vector(vec![3.0, 4.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let wv = tape.param(&w);
        let p = tape.mul(xv, wv).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(&x).is_none());
        assert_eq!(grads.get(&w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((logsumexp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add(a, b).is_err());
    }
}
