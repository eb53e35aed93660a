//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is built fresh for each forward pass. Every primitive appends a
//! node holding its value and its inputs; [`Tape::backward`] walks the nodes in
//! reverse and returns [`Gradients`], which are then added into the owning
//! [`Parameter`]s. Frozen parameters enter the tape as constants, so nothing is
//! ever accumulated for them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{Matrix, ParamId, ParamSet, Parameter};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Primitive kinds recorded on the tape. Also used to select a backward rule
/// to corrupt for negative-control gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Tanh,
    RowSoftmax,
    LayerNorm,
    FrobeniusSq,
    Sum,
    AddRow,
    MulRow,
    SliceRows,
    ConcatRows,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::RowSoftmax,
        OpKind::LayerNorm,
        OpKind::FrobeniusSq,
        OpKind::Sum,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::SliceRows,
        OpKind::ConcatRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::FrobeniusSq => "frobenius_sq",
            OpKind::Sum => "sum",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind `{s}`")))
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    RowSoftmax(Var),
    LayerNorm(Var),
    FrobeniusSq(Var),
    Sum(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::RowSoftmax(..) => OpKind::RowSoftmax,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::FrobeniusSq(..) => OpKind::FrobeniusSq,
            Op::Sum(..) => OpKind::Sum,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong. Only useful
    /// as a negative control for gradient checking.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter. Trainable parameters become gradient leaves;
    /// frozen ones become constants. Registering the same parameter twice
    /// returns the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(v) = self.params.get(&p.id()) {
            return *v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, p.is_trainable());
        if p.is_trainable() {
            self.params.insert(p.id(), v);
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.set(r, c, e);
                denom += e;
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / denom);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::RowSoftmax(a), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (c, v) in row.iter().enumerate() {
                out.set(r, c, (v - mean) * inv);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a), rg)
    }

    /// Sum of squared entries, as a 1×1 node.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).frobenius_sq());
        let rg = self.rg(a);
        self.push(value, Op::FrobeniusSq(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Adds the 1×c row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let cols = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % cols];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// Multiplies every row of `x` entrywise by the 1×c row `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.rows() != 1 || vv.cols() != xv.cols() {
            return Err(Error::dim("mul_row", xv.shape(), vv.shape()));
        }
        let mut out = xv.clone();
        let cols = xv.cols();
        for (i, e) in out.data_mut().iter_mut().enumerate() {
            *e *= vv.data()[i % cols];
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::MulRow(x, v), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = parts.iter().any(|v| self.rg(*v));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean squared error over all entries, as a 1×1 node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.value(pred).len() as f64;
        let diff = self.sub(pred, target)?;
        let sq = self.frobenius_sq(diff);
        Ok(self.scale(sq, 1.0 / n))
    }

    /// Reverse sweep from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::dim("backward", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let corrupt = self.fault.is_some() && self.fault == node.op.kind();
            let mut contributions = self.local_grads(node, &g)?;
            if corrupt {
                if let Some((_, first)) = contributions.first_mut() {
                    *first = first.scale(1.5).map(|v| v + 1e-3);
                }
            }
            for (input, contrib) in contributions {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            nodes: grads,
            params: self.params.clone(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.rg(*a) {
                    v.push((*a, g.matmul(&val(*b).transpose())?));
                }
                if self.rg(*b) {
                    v.push((*b, val(*a).transpose().matmul(g)?));
                }
                v
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                vec![(*a, Matrix::from_vec(x.rows(), x.cols(), data)?)]
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                vec![(*a, Matrix::from_vec(y.rows(), y.cols(), data)?)]
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gi, yi)| gi * yi).sum();
                    for c in 0..cols {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm(a) => {
                let x = val(*a);
                let y = &node.value;
                let (rows, cols) = y.shape();
                let n = cols as f64;
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let g_mean = g.row(r).iter().sum::<f64>() / n;
                    let gy_mean = g
                        .row(r)
                        .iter()
                        .zip(y.row(r))
                        .map(|(gi, yi)| gi * yi)
                        .sum::<f64>()
                        / n;
                    for c in 0..cols {
                        ga.set(r, c, inv * (g.get(r, c) - g_mean - y.get(r, c) * gy_mean));
                    }
                }
                vec![(*a, ga)]
            }
            Op::FrobeniusSq(a) => vec![(*a, val(*a).scale(2.0 * g.get(0, 0)))],
            Op::Sum(a) => {
                let x = val(*a);
                vec![(*a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0)))]
            }
            Op::AddRow(x, b) => {
                let mut v = vec![(*x, g.clone())];
                if self.rg(*b) {
                    v.push((*b, column_sums(g)));
                }
                v
            }
            Op::MulRow(x, w) => {
                let xv = val(*x);
                let wv = val(*w);
                let cols = xv.cols();
                let mut v = Vec::with_capacity(2);
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for (i, e) in gx.data_mut().iter_mut().enumerate() {
                        *e *= wv.data()[i % cols];
                    }
                    v.push((*x, gx));
                }
                if self.rg(*w) {
                    v.push((*w, column_sums(&g.hadamard(xv)?)));
                }
                v
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                let cols = x.cols();
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                vec![(*a, ga)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let rows = val(*p).rows();
                    v.push((*p, g.slice_rows(offset, rows)?));
                    offset += rows;
                }
                v
            }
        };
        Ok(out)
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node that required one.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn of_param(&self, p: &Parameter) -> Option<&Matrix> {
        self.params.get(&p.id()).and_then(|v| self.of(*v))
    }

    /// Adds this sweep's gradients into every matching trainable parameter.
    pub fn accumulate<P: ParamSet + ?Sized>(&self, set: &mut P) -> Result<()> {
        let mut err = None;
        set.visit_params_mut(&mut |p| {
            if !p.is_trainable() || err.is_some() {
                return;
            }
            if let Some(g) = self.of_param(p) {
                if let Err(e) = p.grad_mut().add_assign(g) {
                    err = Some(e);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_hand_value() {
        let mut tape = Tape::new();
        let a = Parameter::trainable(Matrix::from_rows(&[&[1.0, 1.0]]));
        let av = tape.param(&a);
        let b = tape.constant(Matrix::from_rows(&[&[2.0], &[3.0]]));
        let y = tape.matmul(av, b).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.of_param(&a).unwrap(), &Matrix::from_rows(&[&[2.0, 3.0]]));
    }

    #[test]
    fn frozen_param_is_constant() {
        let mut tape = Tape::new();
        let p = Parameter::frozen(Matrix::identity(2));
        let v = tape.param(&p);
        assert!(!tape.requires_grad(v));
        let l = tape.frobenius_sq(v);
        let g = tape.backward(l).unwrap();
        assert!(g.of_param(&p).is_none());
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut tape = Tape::new();
        let p = Parameter::trainable(Matrix::from_rows(&[&[-1.0, 2.0, 0.0]]));
        let x = tape.param(&p);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &Matrix::from_rows(&[&[0.0, 2.0, 0.0]]));
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(
            g.of_param(&p).unwrap(),
            &Matrix::from_rows(&[&[0.0, 1.0, 0.0]])
        );
    }

    #[test]
    fn scale_and_add_zero() {
        let mut tape = Tape::new();
        let m = tape.constant(Matrix::from_rows(&[&[1.0, 2.0]]));
        let s = tape.scale(m, 0.5);
        assert_eq!(tape.value(s), &Matrix::from_rows(&[&[0.5, 1.0]]));
        let z = tape.constant(Matrix::zeros(1, 2));
        let a = tape.add(m, z).unwrap();
        assert_eq!(tape.value(a), tape.value(m));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[
            &[0.0, 0.0],
            &[1000.0, 1000.0],
            &[0.0, 3f64.ln()],
        ]));
        let s = tape.row_softmax(a);
        let v = tape.value(s);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert_eq!(v.row(1), &[0.5, 0.5]);
        assert!((v.get(2, 0) - 0.25).abs() < 1e-15);
        assert!((v.get(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(1, 2));
        let b = tape.constant(Matrix::zeros(2, 1));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(tape.mul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn shared_param_registered_once() {
        let mut tape = Tape::new();
        let p = Parameter::trainable(Matrix::from_rows(&[&[3.0]]));
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.of_param(&p).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn op_kind_parses_its_name() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!("nope".parse::<OpKind>().is_err());
    }
}
