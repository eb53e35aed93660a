use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Deserializer, Serialize};

use super::Matrix;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique handle used by a [`Tape`](super::Tape) to route gradients
/// back to the owning [`Parameter`]. Never serialized; never affects numerics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A value with an attached gradient accumulator.
///
/// Cloning yields a parameter with a fresh id, so a cloned model can never
/// alias gradients with its source on a shared tape.
#[derive(Debug, Serialize)]
pub struct Parameter {
    #[serde(skip)]
    id: ParamId,
    value: Matrix,
    #[serde(skip)]
    grad: Matrix,
    trainable: bool,
}

impl Parameter {
    pub fn new(value: Matrix, trainable: bool) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            id: ParamId::fresh(),
            value,
            grad,
            trainable,
        }
    }

    pub fn trainable(value: Matrix) -> Self {
        Self::new(value, true)
    }

    pub fn frozen(value: Matrix) -> Self {
        Self::new(value, false)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    /// Direct mutable access for initialization, masking and tests.
    /// Training code goes through the optimizer instead.
    pub fn value_mut(&mut self) -> &mut Matrix {
        &mut self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Matrix {
        &mut self.grad
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

impl<'de> Deserialize<'de> for Parameter {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            value: Matrix,
            trainable: bool,
        }
        let raw = Raw::deserialize(deserializer)?;
        Ok(Parameter::new(raw.value, raw.trainable))
    }
}

/// Anything that owns parameters in a stable visiting order.
pub trait ParamSet {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.is_trainable() {
                n += p.numel();
            }
        });
        n
    }

    fn total_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

impl ParamSet for Vec<Parameter> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.iter().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.iter_mut().for_each(f);
    }
}
