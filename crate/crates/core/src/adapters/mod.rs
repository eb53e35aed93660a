//! Low-rank weight increments and per-weight adapter stacks.
//!
//! Weights are stored input-major: a layer maps `x (n×d_in)` to
//! `x·W + b` with `W: d_in×d_out`. An increment `ΔW` has the same
//! `d_in×d_out` shape, so the effective weight is simply `W + ΣΔW` and the
//! column space of each adapter's `A` lives in the layer's input space.

mod checkpoint;

use std::sync::Once;

use serde::{Deserialize, Serialize};

pub use checkpoint::{AdapterRecord, StackRecord, CHECKPOINT_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Matrix, ParamSet, Parameter, Tape, Var};

/// Standard deviation of the Gaussian used for adapter factors.
pub const INIT_STD: f64 = 0.02;

static LOW_RANK_WARNING: Once = Once::new();

fn check_rank(d1: usize, d2: usize, r: usize) -> Result<()> {
    if r == 0 || r > d1.min(d2) {
        return Err(Error::Rank { rank: r, d1, d2 });
    }
    if 4 * r > d1.min(d2) {
        LOW_RANK_WARNING.call_once(|| {
            log::info!("adapter rank {r} is not small relative to min({d1}, {d2})");
        });
    }
    Ok(())
}

/// `ΔW = A·B`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: Parameter,
    pub b: Parameter,
}

impl LoraAdapter {
    /// `A ~ N(0, 0.02²)`, `B = 0`, so the increment starts at exactly zero.
    pub fn init(d1: usize, d2: usize, r: usize, seed: u64) -> Result<Self> {
        check_rank(d1, d2, r)?;
        let mut rng = rng::stream(seed, &[rng::label("lora")]);
        Ok(Self {
            a: Parameter::trainable(Matrix::randn(d1, r, INIT_STD, &mut rng)),
            b: Parameter::trainable(Matrix::zeros(r, d2)),
        })
    }

    pub fn from_factors(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::dim("lora factors", a.shape(), b.shape()));
        }
        Ok(Self {
            a: Parameter::trainable(a),
            b: Parameter::trainable(b),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape().1
    }
}

/// `ΔW = A·diag(Λ ⊙ mask)·B`.
#[derive(Clone, Debug)]
pub struct AdaLoraAdapter {
    pub a: Parameter,
    /// Singular values as a `1×r` row.
    pub lambda: Parameter,
    pub b: Parameter,
    pub mask: Vec<bool>,
}

impl AdaLoraAdapter {
    /// `A, B ~ N(0, 0.02²)`, `Λ = 0`, all triplets active.
    pub fn init(d1: usize, d2: usize, r: usize, seed: u64) -> Result<Self> {
        check_rank(d1, d2, r)?;
        let mut rng = rng::stream(seed, &[rng::label("adalora")]);
        let a = Matrix::randn(d1, r, INIT_STD, &mut rng);
        let b = Matrix::randn(r, d2, INIT_STD, &mut rng);
        Ok(Self {
            a: Parameter::trainable(a),
            lambda: Parameter::trainable(Matrix::zeros(1, r)),
            b: Parameter::trainable(b),
            mask: vec![true; r],
        })
    }

    pub fn from_factors(a: Matrix, lambda: &[f64], b: Matrix) -> Result<Self> {
        if a.cols() != lambda.len() || b.rows() != lambda.len() {
            return Err(Error::dim("adalora factors", a.shape(), b.shape()));
        }
        Ok(Self {
            a: Parameter::trainable(a),
            lambda: Parameter::trainable(Matrix::row_vector(lambda)),
            b: Parameter::trainable(b),
            mask: vec![true; lambda.len()],
        })
    }

    pub fn rank(&self) -> usize {
        self.mask.len()
    }

    pub fn active_rank(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn mask_row(&self) -> Matrix {
        Matrix::row_vector(
            &self
                .mask
                .iter()
                .map(|m| if *m { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        )
    }

    /// `Λ ⊙ mask` as plain numbers.
    pub fn effective_lambda(&self) -> Vec<f64> {
        self.lambda
            .value()
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(l, m)| if *m { *l } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub enum Adapter {
    Lora(LoraAdapter),
    AdaLora(AdaLoraAdapter),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    AdaLora,
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::AdaLora(_) => AdapterKind::AdaLora,
        }
    }

    pub fn a(&self) -> &Parameter {
        match self {
            Adapter::Lora(l) => &l.a,
            Adapter::AdaLora(l) => &l.a,
        }
    }

    pub fn b(&self) -> &Parameter {
        match self {
            Adapter::Lora(l) => &l.b,
            Adapter::AdaLora(l) => &l.b,
        }
    }

    pub fn d1(&self) -> usize {
        self.a().shape().0
    }

    pub fn d2(&self) -> usize {
        self.b().shape().1
    }

    pub fn rank(&self) -> usize {
        self.a().shape().1
    }

    /// Number of singular directions currently contributing.
    pub fn active_rank(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.rank(),
            Adapter::AdaLora(l) => l.active_rank(),
        }
    }

    pub fn as_adalora(&self) -> Option<&AdaLoraAdapter> {
        match self {
            Adapter::AdaLora(l) => Some(l),
            Adapter::Lora(_) => None,
        }
    }

    pub fn as_adalora_mut(&mut self) -> Option<&mut AdaLoraAdapter> {
        match self {
            Adapter::AdaLora(l) => Some(l),
            Adapter::Lora(_) => None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.a().is_trainable()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.visit_params_mut(&mut |p| p.set_trainable(trainable));
    }

    /// The `d1×d2` increment.
    pub fn delta_weight(&self) -> Matrix {
        match self {
            Adapter::Lora(l) => {
                l.a.value()
                    .matmul(l.b.value())
                    .expect("adapter factors are conformable")
            }
            Adapter::AdaLora(l) => {
                let lam = l.effective_lambda();
                let mut scaled = l.a.value().clone();
                let r = lam.len();
                for (i, v) in scaled.data_mut().iter_mut().enumerate() {
                    *v *= lam[i % r];
                }
                scaled
                    .matmul(l.b.value())
                    .expect("adapter factors are conformable")
            }
        }
    }

    /// `x·ΔW` evaluated as a chain through the rank-r bottleneck.
    pub fn forward_increment(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Adapter::Lora(l) => {
                let a = tape.param(&l.a);
                let b = tape.param(&l.b);
                let xa = tape.matmul(x, a)?;
                tape.matmul(xa, b)
            }
            Adapter::AdaLora(l) => {
                let a = tape.param(&l.a);
                let lam = tape.param(&l.lambda);
                let b = tape.param(&l.b);
                let mask = tape.constant(l.mask_row());
                let lam_m = tape.mul(lam, mask)?;
                let xa = tape.matmul(x, a)?;
                let xal = tape.mul_row(xa, lam_m)?;
                tape.matmul(xal, b)
            }
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        self.visit_params(&mut |p| h = h.rotate_left(17) ^ p.value().checksum());
        if let Adapter::AdaLora(l) = self {
            for m in &l.mask {
                h = h.rotate_left(1) ^ u64::from(*m);
            }
        }
        h
    }
}

impl ParamSet for Adapter {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        match self {
            Adapter::Lora(l) => {
                f(&l.a);
                f(&l.b);
            }
            Adapter::AdaLora(l) => {
                f(&l.a);
                f(&l.lambda);
                f(&l.b);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            Adapter::Lora(l) => {
                f(&mut l.a);
                f(&mut l.b);
            }
            Adapter::AdaLora(l) => {
                f(&mut l.a);
                f(&mut l.lambda);
                f(&mut l.b);
            }
        }
    }
}

/// Ordered frozen history plus at most one trainable adapter, all sharing
/// the same `d1×d2` footprint.
#[derive(Clone, Debug)]
pub struct AdapterStack {
    d1: usize,
    d2: usize,
    frozen: Vec<Adapter>,
    active: Option<Adapter>,
}

impl AdapterStack {
    pub fn new(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d2,
            frozen: Vec::new(),
            active: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn frozen(&self) -> &[Adapter] {
        &self.frozen
    }

    pub fn active(&self) -> Option<&Adapter> {
        self.active.as_ref()
    }

    pub fn active_mut(&mut self) -> Option<&mut Adapter> {
        self.active.as_mut()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty() && self.active.is_none()
    }

    pub fn len(&self) -> usize {
        self.frozen.len() + usize::from(self.active.is_some())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Adapter> {
        self.frozen.iter().chain(self.active.iter())
    }

    /// Freezes the current active adapter (if any) onto the history and makes
    /// `adapter` the new trainable one.
    pub fn freeze_and_extend(&mut self, mut adapter: Adapter) -> Result<()> {
        if (adapter.d1(), adapter.d2()) != (self.d1, self.d2) {
            return Err(Error::dim(
                "freeze_and_extend",
                (self.d1, self.d2),
                (adapter.d1(), adapter.d2()),
            ));
        }
        if let Some(mut prev) = self.active.take() {
            prev.set_trainable(false);
            prev.zero_grads();
            self.frozen.push(prev);
        }
        adapter.set_trainable(true);
        self.active = Some(adapter);
        Ok(())
    }

    /// Freezes the active adapter without installing a new one.
    pub fn freeze_active(&mut self) {
        if let Some(mut prev) = self.active.take() {
            prev.set_trainable(false);
            prev.zero_grads();
            self.frozen.push(prev);
        }
    }

    pub fn clear(&mut self) {
        self.frozen.clear();
        self.active = None;
    }

    pub fn delta_sum(&self) -> Matrix {
        let mut sum = Matrix::zeros(self.d1, self.d2);
        for a in self.iter() {
            sum.add_assign(&a.delta_weight())
                .expect("stack adapters share one shape");
        }
        sum
    }

    pub(crate) fn from_parts(
        d1: usize,
        d2: usize,
        frozen: Vec<Adapter>,
        active: Option<Adapter>,
    ) -> Result<Self> {
        let mut stack = Self::new(d1, d2);
        for a in frozen.iter().chain(active.iter()) {
            if (a.d1(), a.d2()) != (d1, d2) {
                return Err(Error::dim("adapter stack", (d1, d2), (a.d1(), a.d2())));
            }
        }
        stack.frozen = frozen;
        stack.active = active;
        Ok(stack)
    }
}

impl ParamSet for AdapterStack {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        for a in self.frozen.iter().chain(self.active.iter()) {
            a.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for a in self.frozen.iter_mut().chain(self.active.iter_mut()) {
            a.visit_params_mut(f);
        }
    }
}

/// `f(x) = x·(W + ΣΔW) + b`, with the base weight and bias never adapted.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: Parameter,
    pub b: Parameter,
    pub stack: AdapterStack,
}

impl LinearLayer {
    pub fn new(w: Matrix, b: Matrix) -> Result<Self> {
        if b.shape() != (1, w.cols()) {
            return Err(Error::dim("linear bias", (1, w.cols()), b.shape()));
        }
        let (d1, d2) = w.shape();
        Ok(Self {
            w: Parameter::frozen(w),
            b: Parameter::frozen(b),
            stack: AdapterStack::new(d1, d2),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w.shape().0
    }

    pub fn d_out(&self) -> usize {
        self.w.shape().1
    }

    pub fn set_base_trainable(&mut self, trainable: bool) {
        self.w.set_trainable(trainable);
        self.b.set_trainable(trainable);
    }

    /// Base affine map only.
    pub fn base_forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs.1 != self.d_in() {
            return Err(Error::dim("linear forward", xs, self.w.shape()));
        }
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Base map plus every adapter increment in the stack, frozen first.
    /// No `d1×d2` delta is materialized.
    pub fn adapted_forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut y = self.base_forward(tape, x)?;
        for adapter in self.stack.iter() {
            let inc = adapter.forward_increment(tape, x)?;
            y = tape.add(y, inc)?;
        }
        Ok(y)
    }

    /// `W + ΣΔW` over frozen and active adapters. Leaves the layer untouched.
    pub fn merge_stack(&self) -> Matrix {
        self.w
            .value()
            .add(&self.stack.delta_sum())
            .expect("stack shape matches base weight")
    }

    /// Folds every adapter into the base weight and empties the stack.
    pub fn commit_merge(&mut self) {
        let merged = self.merge_stack();
        *self.w.value_mut() = merged;
        self.stack.clear();
    }

    /// Copy of this layer with the stack folded in.
    pub fn merged(&self) -> LinearLayer {
        let mut out = LinearLayer::new(self.merge_stack(), self.b.value().clone())
            .expect("shapes come from an existing layer");
        out.set_base_trainable(false);
        out
    }
}

impl ParamSet for LinearLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.w);
        f(&self.b);
        self.stack.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w);
        f(&mut self.b);
        self.stack.visit_params_mut(f);
    }
}

/// `init_lora` as a free function.
pub fn init_lora(d1: usize, d2: usize, r: usize, seed: u64) -> Result<Adapter> {
    LoraAdapter::init(d1, d2, r, seed).map(Adapter::Lora)
}

/// `init_adalora` as a free function.
pub fn init_adalora(d1: usize, d2: usize, r: usize, seed: u64) -> Result<Adapter> {
    AdaLoraAdapter::init(d1, d2, r, seed).map(Adapter::AdaLora)
}
