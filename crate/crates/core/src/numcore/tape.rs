//! Flat Wengert tape for reverse-mode differentiation over whole tensors.
//!
//! Each recorded node owns its forward value. `backward` walks the nodes in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes recorded before it.

use crate::error::{Error, Result};
use crate::numcore::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
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

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_row(&t.data()[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
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

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Input that never needs a gradient (data, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a length-`m` bias to every row of an `n×m` value.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.value(a).dims2()?;
        let b = self.value(bias);
        if b.len() != m {
            return Err(Error::Dimension(format!("bias of length {} for width {m}", b.len())));
        }
        let bd = b.data();
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().enumerate().map(|(i, &v)| v + bd[i % m]).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        self.push(out, Op::Softmax(a))
    }

    /// Selects rows of a 2-D value; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("row {bad} out of {r}")));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(&src.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![indices.len(), c], data);
        self.push(out, Op::GatherRows(a, indices))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2()?;
        if factors.len() != r {
            return Err(Error::Dimension(format!("{} row factors for {r} rows", factors.len())));
        }
        let data: Vec<f64> = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / c.max(1)])
            .collect();
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(out, Op::ScaleRows(a, factors))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let l = self.value(logits);
        let (r, c) = l.dims2()?;
        if labels.len() != r || r == 0 {
            return Err(Error::Dimension(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Dimension(format!("label {bad} for {c} classes")));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &l.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / r as f64);
        self.push(out, Op::SoftmaxCrossEntropy(logits, labels))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of node {i} ({})",
                        op_name(&self.nodes[i].op)
                    )));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut accumulate = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = av.dims2()?;
                let (_, m) = bv.dims2()?;
                if self.needs(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    accumulate(*a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, av.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(*b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    accumulate(*a, g.clone());
                }
                if self.needs(*bias) {
                    let m = self.value(*bias).len();
                    let mut db = vec![0.0; m];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % m] += v;
                    }
                    accumulate(*bias, Tensor::from_parts(self.value(*bias).shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(*a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(*a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?);
                }
                if self.needs(*b) {
                    accumulate(*b, g.zip_map(self.value(*a), |gv, av| gv * av)?);
                }
            }
            Op::Scale(a, c) => accumulate(*a, g.map(|v| v * c)),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(*a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                accumulate(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let (_, c) = src.dims2()?;
                let mut d = vec![0.0; src.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[row * c + j];
                    }
                }
                accumulate(*a, Tensor::from_parts(src.shape().to_vec(), d));
            }
            Op::ScaleRows(a, factors) => {
                let c = self.value(*a).last_dim().max(1);
                let d: Vec<f64> = g.data().iter().enumerate().map(|(i, &v)| v * factors[i / c]).collect();
                accumulate(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Square(a) => {
                accumulate(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)?);
            }
            Op::Sum(a) => {
                accumulate(*a, Tensor::full(self.value(*a).shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                accumulate(*a, Tensor::full(v.shape(), g.data()[0] / v.len() as f64));
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let l = self.value(*logits);
                let (r, _) = l.dims2()?;
                let mut p = softmax_rows(l)?;
                let c = l.last_dim();
                let scale = g.data()[0] / r as f64;
                let pd = p.data_mut();
                for (i, &y) in labels.iter().enumerate() {
                    pd[i * c + y] -= 1.0;
                }
                pd.iter_mut().for_each(|v| *v *= scale);
                accumulate(*logits, p);
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Silu(a)
        | Op::Softmax(a)
        | Op::GatherRows(a, _)
        | Op::ScaleRows(a, _)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SoftmaxCrossEntropy(a, _) => vec![*a],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Silu(..) => "silu",
        Op::Softmax(..) => "softmax",
        Op::GatherRows(..) => "gather_rows",
        Op::ScaleRows(..) => "scale_rows",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(w*w + w) -> 2w + 1
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.5, -1.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.add(sq, w).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, -1.0]);
    }

    #[test]
    fn overflow_surfaces_as_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1e200]).unwrap());
        assert!(matches!(tape.square(w), Err(Error::NonFinite(_))));
    }
}
