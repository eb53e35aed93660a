//! Dynamic rank budgeting for AdaLoRA adapters.
//!
//! After each optimizer step, every trainable entry θ gets a sensitivity
//! `s = |θ·∂L/∂θ|`, smoothed into `ema_s` and an uncertainty `ema_u`. A
//! singular triplet `k` of weight `j` is scored as
//! `I(Λⱼ[k]) · meanᵢ I(Aⱼ[i,k]) · meanᵢ I(Bⱼ[k,i])` with `I = ema_s·ema_u`.
//! The globally highest-scoring triplets up to the current budget stay
//! active; the rest are masked (their Λ zeroed, A/B columns kept).

use serde::{Deserialize, Serialize};

use crate::adapters::AdaLoraAdapter;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Parameter};

#[derive(Clone, Debug)]
struct Smoothed {
    sens: Matrix,
    unc: Matrix,
}

impl Smoothed {
    fn new(shape: (usize, usize)) -> Self {
        Self {
            sens: Matrix::zeros(shape.0, shape.1),
            unc: Matrix::zeros(shape.0, shape.1),
        }
    }

    fn update(&mut self, p: &Parameter, beta1: f64, beta2: f64) -> Result<()> {
        if p.shape() != self.sens.shape() {
            return Err(Error::State(format!(
                "importance statistics shaped {:?} but parameter is {:?}",
                self.sens.shape(),
                p.shape()
            )));
        }
        let value = p.value().data();
        let grad = p.grad().data();
        let sens = self.sens.data_mut();
        let unc = self.unc.data_mut();
        for i in 0..value.len() {
            let s = (value[i] * grad[i]).abs();
            sens[i] = beta1 * sens[i] + (1.0 - beta1) * s;
            unc[i] = beta2 * unc[i] + (1.0 - beta2) * (s - sens[i]).abs();
        }
        Ok(())
    }

    fn importance(&self, i: usize) -> f64 {
        self.sens.data()[i] * self.unc.data()[i]
    }
}

#[derive(Clone, Debug)]
struct AdapterStats {
    a: Smoothed,
    lambda: Smoothed,
    b: Smoothed,
}

/// Smoothed sensitivity statistics for a fixed list of AdaLoRA adapters.
#[derive(Clone, Debug)]
pub struct ImportanceState {
    pub beta1: f64,
    pub beta2: f64,
    stats: Vec<AdapterStats>,
}

impl ImportanceState {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(Self {
            beta1,
            beta2,
            stats: Vec::new(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Folds the current gradients of `adapters` into the statistics. Must be
    /// called after backward and before gradients are cleared.
    pub fn update(&mut self, adapters: &[&AdaLoraAdapter]) -> Result<()> {
        if self.stats.is_empty() {
            self.stats = adapters
                .iter()
                .map(|a| AdapterStats {
                    a: Smoothed::new(a.a.shape()),
                    lambda: Smoothed::new(a.lambda.shape()),
                    b: Smoothed::new(a.b.shape()),
                })
                .collect();
        }
        if self.stats.len() != adapters.len() {
            return Err(Error::State(format!(
                "importance state tracks {} adapters, got {}",
                self.stats.len(),
                adapters.len()
            )));
        }
        for (st, ad) in self.stats.iter_mut().zip(adapters) {
            if !(ad.a.is_trainable() && ad.lambda.is_trainable() && ad.b.is_trainable()) {
                return Err(Error::State("missing gradients: adapter is frozen".into()));
            }
            st.a.update(&ad.a, self.beta1, self.beta2)?;
            st.lambda.update(&ad.lambda, self.beta1, self.beta2)?;
            st.b.update(&ad.b, self.beta1, self.beta2)?;
        }
        Ok(())
    }

    /// Smoothed sensitivity of one entry of an adapter's factor.
    pub fn ema_sensitivity(&self, adapter: usize, factor: Factor, index: usize) -> f64 {
        let st = &self.stats[adapter];
        let s = match factor {
            Factor::A => &st.a,
            Factor::Lambda => &st.lambda,
            Factor::B => &st.b,
        };
        s.sens.data()[index]
    }

    pub fn ema_uncertainty(&self, adapter: usize, factor: Factor, index: usize) -> f64 {
        let st = &self.stats[adapter];
        let s = match factor {
            Factor::A => &st.a,
            Factor::Lambda => &st.lambda,
            Factor::B => &st.b,
        };
        s.unc.data()[index]
    }

    /// Triplet scores, one vector per adapter.
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.stats
            .iter()
            .map(|st| {
                let (d1, r) = st.a.sens.shape();
                let d2 = st.b.sens.cols();
                (0..r)
                    .map(|k| {
                        let lam = st.lambda.importance(k);
                        let a_mean =
                            (0..d1).map(|i| st.a.importance(i * r + k)).sum::<f64>() / d1 as f64;
                        let b_mean =
                            (0..d2).map(|i| st.b.importance(k * d2 + i)).sum::<f64>() / d2 as f64;
                        lam * a_mean * b_mean
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    A,
    Lambda,
    B,
}

/// Total active-triplet budget over a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub r_init: usize,
    pub r_target: usize,
    pub warmup_steps: usize,
    pub decay_end_step: usize,
    pub total_steps: usize,
    /// Number of adapted weight matrices sharing the budget.
    pub n_weights: usize,
}

impl BudgetSchedule {
    pub fn new(
        r_init: usize,
        r_target: usize,
        warmup_steps: usize,
        decay_end_step: usize,
        total_steps: usize,
        n_weights: usize,
    ) -> Result<Self> {
        if r_target > r_init {
            return Err(Error::Config(format!(
                "target rank {r_target} exceeds initial rank {r_init}"
            )));
        }
        if !(warmup_steps <= decay_end_step && decay_end_step <= total_steps) {
            return Err(Error::Config(format!(
                "need warmup {warmup_steps} <= decay end {decay_end_step} <= total {total_steps}"
            )));
        }
        Ok(Self {
            r_init,
            r_target,
            warmup_steps,
            decay_end_step,
            total_steps,
            n_weights,
        })
    }

    /// Warmup and decay end given as fractions of `total_steps`.
    pub fn from_fractions(
        r_init: usize,
        r_target: usize,
        total_steps: usize,
        warmup_frac: f64,
        decay_end_frac: f64,
        n_weights: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_frac) || !(0.0..=1.0).contains(&decay_end_frac) {
            return Err(Error::Config("budget fractions must lie in [0, 1]".into()));
        }
        let warmup = (warmup_frac * total_steps as f64).round() as usize;
        let decay_end = (decay_end_frac * total_steps as f64).round() as usize;
        Self::new(r_init, r_target, warmup, decay_end, total_steps, n_weights)
    }

    pub fn initial_budget(&self) -> usize {
        self.n_weights * self.r_init
    }

    pub fn target_budget(&self) -> usize {
        self.n_weights * self.r_target
    }

    /// Cubic decay from `N·r_init` to `N·r_target` between warmup and decay end.
    pub fn budget_at(&self, step: usize) -> Result<usize> {
        if step > self.total_steps {
            return Err(Error::Range {
                what: "step",
                value: step,
                min: 0,
                max: self.total_steps,
            });
        }
        let (hi, lo) = (self.initial_budget(), self.target_budget());
        if step < self.warmup_steps {
            return Ok(hi);
        }
        if step >= self.decay_end_step {
            return Ok(lo);
        }
        let span = (self.decay_end_step - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let b = lo as f64 + (hi - lo) as f64 * (1.0 - progress).powi(3);
        Ok(b.round() as usize)
    }
}

/// Masks all but the `budget` highest-scoring triplets across `adapters`.
/// Ties go to the lower (adapter, index) pair.
pub fn apply_budget_with_scores(
    adapters: &mut [&mut AdaLoraAdapter],
    scores: &[Vec<f64>],
    budget: usize,
) -> Result<()> {
    if scores.len() != adapters.len() {
        return Err(Error::State(format!(
            "{} score vectors for {} adapters",
            scores.len(),
            adapters.len()
        )));
    }
    let mut triplets = Vec::new();
    for (j, (ad, sc)) in adapters.iter().zip(scores).enumerate() {
        if sc.len() != ad.rank() {
            return Err(Error::State(format!(
                "adapter {j} has rank {} but {} scores",
                ad.rank(),
                sc.len()
            )));
        }
        triplets.extend(sc.iter().enumerate().map(|(k, s)| (*s, j, k)));
    }
    if budget > triplets.len() {
        return Err(Error::Range {
            what: "budget",
            value: budget,
            min: 0,
            max: triplets.len(),
        });
    }
    triplets.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    for ad in adapters.iter_mut() {
        ad.mask.iter_mut().for_each(|m| *m = false);
    }
    for &(_, j, k) in &triplets[..budget] {
        adapters[j].mask[k] = true;
    }
    for ad in adapters.iter_mut() {
        let mask = ad.mask.clone();
        for (k, keep) in mask.iter().enumerate() {
            if !keep {
                ad.lambda.value_mut().set(0, k, 0.0);
            }
        }
    }
    Ok(())
}

/// [`apply_budget_with_scores`] using the scores held by `state`.
pub fn apply_budget(
    adapters: &mut [&mut AdaLoraAdapter],
    state: &ImportanceState,
    budget: usize,
) -> Result<()> {
    let scores = if state.is_empty() {
        adapters.iter().map(|a| vec![0.0; a.rank()]).collect()
    } else {
        state.scores()
    };
    apply_budget_with_scores(adapters, &scores, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdaLoraAdapter;

    fn adapter(r: usize, seed: u64) -> AdaLoraAdapter {
        let mut a = AdaLoraAdapter::init(6, 5, r, seed).unwrap();
        a.lambda.value_mut().fill(1.0);
        a
    }

    #[test]
    fn zero_gradients_give_zero_scores() {
        let a = adapter(3, 0);
        let mut st = ImportanceState::new(0.85, 0.85).unwrap();
        st.update(&[&a]).unwrap();
        assert!(st.scores()[0].iter().all(|s| *s == 0.0));
    }

    #[test]
    fn no_smoothing_reproduces_raw_sensitivity() {
        let mut a = adapter(2, 1);
        a.lambda.grad_mut().set(0, 1, -3.0);
        a.lambda.value_mut().set(0, 1, 2.0);
        let mut st = ImportanceState::new(0.0, 0.0).unwrap();
        st.update(&[&a]).unwrap();
        assert_eq!(st.ema_sensitivity(0, Factor::Lambda, 1), 6.0);
    }

    #[test]
    fn ema_arithmetic() {
        let mut a = adapter(2, 1);
        a.lambda.value_mut().set(0, 0, 2.0);
        a.lambda.grad_mut().set(0, 0, 3.0);
        let mut st = ImportanceState::new(0.85, 0.85).unwrap();
        st.update(&[&a]).unwrap();
        assert!((st.ema_sensitivity(0, Factor::Lambda, 0) - 0.9).abs() < 1e-15);
        // |6 − 0.9| smoothed with β₂ = 0.85.
        assert!((st.ema_uncertainty(0, Factor::Lambda, 0) - 0.15 * 5.1).abs() < 1e-15);
    }

    #[test]
    fn update_rejects_frozen_or_changed_adapters() {
        let mut a = adapter(2, 0);
        let mut st = ImportanceState::new(0.85, 0.85).unwrap();
        st.update(&[&a]).unwrap();
        let b = adapter(2, 1);
        assert!(matches!(st.update(&[&a, &b]), Err(Error::State(_))));
        a.lambda.set_trainable(false);
        assert!(matches!(st.update(&[&a]), Err(Error::State(_))));
    }

    #[test]
    fn budget_schedule_examples() {
        let s = BudgetSchedule::new(12, 8, 100, 700, 1000, 6).unwrap();
        assert_eq!(s.budget_at(0).unwrap(), 72);
        assert_eq!(s.budget_at(99).unwrap(), 72);
        assert_eq!(s.budget_at(700).unwrap(), 48);
        assert_eq!(s.budget_at(1000).unwrap(), 48);
        assert_eq!(s.budget_at(400).unwrap(), 51);
        assert!(matches!(s.budget_at(1001), Err(Error::Range { .. })));
    }

    #[test]
    fn schedule_validation() {
        assert!(BudgetSchedule::new(8, 12, 0, 0, 10, 1).is_err());
        assert!(BudgetSchedule::new(12, 8, 5, 4, 10, 1).is_err());
        assert!(BudgetSchedule::new(12, 8, 0, 11, 10, 1).is_err());
        let s = BudgetSchedule::from_fractions(12, 8, 2000, 0.1, 0.7, 12).unwrap();
        assert_eq!((s.warmup_steps, s.decay_end_step), (200, 1400));
    }

    #[test]
    fn sort_oracle_two_by_two() {
        let mut a = adapter(2, 0);
        let mut b = adapter(2, 1);
        apply_budget_with_scores(&mut [&mut a, &mut b], &[vec![5.0, 1.0], vec![4.0, 3.0]], 2)
            .unwrap();
        assert_eq!(a.mask, vec![true, false]);
        assert_eq!(b.mask, vec![true, false]);
        assert_eq!(a.lambda.value().get(0, 1), 0.0);
        assert_eq!(a.lambda.value().get(0, 0), 1.0);
    }

    #[test]
    fn full_and_empty_budgets() {
        let mut a = adapter(3, 0);
        let mut b = adapter(3, 1);
        let scores = vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.0, 9.0]];
        apply_budget_with_scores(&mut [&mut a, &mut b], &scores, 6).unwrap();
        assert!(a.mask.iter().chain(&b.mask).all(|m| *m));
        apply_budget_with_scores(&mut [&mut a, &mut b], &scores, 0).unwrap();
        assert!(a.mask.iter().chain(&b.mask).all(|m| !*m));
        assert!(apply_budget_with_scores(&mut [&mut a, &mut b], &scores, 7).is_err());
    }

    #[test]
    fn ties_break_by_weight_then_index() {
        let mut a = adapter(2, 0);
        let mut b = adapter(2, 1);
        apply_budget_with_scores(&mut [&mut a, &mut b], &[vec![1.0, 1.0], vec![1.0, 1.0]], 3)
            .unwrap();
        assert_eq!(a.mask, vec![true, true]);
        assert_eq!(b.mask, vec![true, false]);
    }

    #[test]
    fn masked_triplet_can_reactivate_when_scores_reverse() {
        let mut a = adapter(2, 0);
        apply_budget_with_scores(&mut [&mut a], &[vec![2.0, 1.0]], 1).unwrap();
        assert_eq!(a.mask, vec![true, false]);
        apply_budget_with_scores(&mut [&mut a], &[vec![1.0, 2.0]], 1).unwrap();
        assert_eq!(a.mask, vec![false, true]);
    }
}
