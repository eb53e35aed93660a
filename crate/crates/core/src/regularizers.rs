//! Loss terms beyond the task loss.
//!
//! - cross-task orthogonality `‖A_prevᵀ·A_new‖²_F`, summed over every frozen
//!   adapter of every adapted weight;
//! - AdaLoRA orthonormality `‖AᵀA − I‖²_F + ‖BBᵀ − I‖²_F` on active adapters;
//! - the weighted sum `task + λ₁·orth + λ₂·orthonormality`.
//!
//! Frozen factors enter the tape as constants, so the orthogonality gradient
//! only ever reaches the active `A`.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterStack};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Task loss only.
    Lora,
    /// Task loss + λ₁·orthogonality.
    OLora,
    /// Task loss + λ₂·orthonormality.
    #[serde(rename = "adalora")]
    AdaLora,
    /// Task loss + λ₁·orthogonality + λ₂·orthonormality.
    #[serde(rename = "o_adalora")]
    OAdaLora,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::Lora,
        LossMode::OLora,
        LossMode::AdaLora,
        LossMode::OAdaLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Lora => "lora",
            LossMode::OLora => "o_lora",
            LossMode::AdaLora => "adalora",
            LossMode::OAdaLora => "o_adalora",
        }
    }

    pub fn uses_orth(self) -> bool {
        matches!(self, LossMode::OLora | LossMode::OAdaLora)
    }

    pub fn uses_adalora_reg(self) -> bool {
        matches!(self, LossMode::AdaLora | LossMode::OAdaLora)
    }

    pub fn adapter_kind(self) -> AdapterKind {
        if self.uses_adalora_reg() {
            AdapterKind::AdaLora
        } else {
            AdapterKind::Lora
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub orth_loss: f64,
    pub adalora_reg: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss mode `{s}` (expected lora, o_lora, adalora or o_adalora)"
                ))
            })
    }
}

/// `‖A_prevᵀ·A_new‖²_F` on the tape.
pub fn orth_loss(tape: &mut Tape, a_prev: Var, a_new: Var) -> Result<Var> {
    let (p, n) = (tape.value(a_prev).shape(), tape.value(a_new).shape());
    if p.0 != n.0 {
        return Err(Error::dim("orth_loss", p, n));
    }
    let pt = tape.transpose(a_prev);
    let overlap = tape.matmul(pt, a_new)?;
    Ok(tape.frobenius_sq(overlap))
}

/// Plain-value counterpart of [`orth_loss`].
pub fn orth_loss_value(a_prev: &Matrix, a_new: &Matrix) -> Result<f64> {
    if a_prev.rows() != a_new.rows() {
        return Err(Error::dim("orth_loss", a_prev.shape(), a_new.shape()));
    }
    Ok(a_prev.transpose().matmul(a_new)?.frobenius_sq())
}

/// Sum of [`orth_loss`] over every (frozen, active) pair in every stack.
/// Stacks without an active adapter contribute nothing.
pub fn total_orth_loss<'a>(
    tape: &mut Tape,
    stacks: impl IntoIterator<Item = &'a AdapterStack>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for stack in stacks {
        let Some(active) = stack.active() else {
            continue;
        };
        let a_new = tape.param(active.a());
        for frozen in stack.frozen() {
            let a_prev = tape.param(frozen.a());
            let term = orth_loss(tape, a_prev, a_new)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(total.unwrap_or_else(|| tape.constant(Matrix::zeros(1, 1))))
}

/// `‖AᵀA − I‖²_F + ‖BBᵀ − I‖²_F` on the tape.
pub fn adalora_reg(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa.1 != sb.0 {
        return Err(Error::dim("adalora_reg", sa, sb));
    }
    let eye = tape.constant(Matrix::identity(sa.1));
    let at = tape.transpose(a);
    let gram_a = tape.matmul(at, a)?;
    let da = tape.sub(gram_a, eye)?;
    let ra = tape.frobenius_sq(da);
    let bt = tape.transpose(b);
    let gram_b = tape.matmul(b, bt)?;
    let db = tape.sub(gram_b, eye)?;
    let rb = tape.frobenius_sq(db);
    tape.add(ra, rb)
}

/// Plain-value counterpart of [`adalora_reg`].
pub fn adalora_reg_value(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.rows() {
        return Err(Error::dim("adalora_reg", a.shape(), b.shape()));
    }
    let eye = Matrix::identity(a.cols());
    let ra = a.transpose().matmul(a)?.sub(&eye)?.frobenius_sq();
    let rb = b.matmul(&b.transpose())?.sub(&eye)?.frobenius_sq();
    Ok(ra + rb)
}

/// `‖AᵀA − I‖_F`, the unsquared deviation used for reporting.
pub fn gram_deviation(a: &Matrix) -> f64 {
    let gram = a.transpose().matmul(a).expect("AᵀA is always conformable");
    gram.sub(&Matrix::identity(a.cols()))
        .expect("square")
        .frobenius()
}

/// Builds `task + λ₁·orth + λ₂·reg` on the tape for the given mode.
///
/// Every stack's active adapter must match the mode's adapter kind. Terms a
/// mode does not use are reported as exactly zero and are not recorded.
pub fn combined_loss<'a, I>(
    tape: &mut Tape,
    task_loss: Var,
    stacks: I,
    lambda1: f64,
    lambda2: f64,
    mode: LossMode,
) -> Result<(Var, LossBreakdown)>
where
    I: IntoIterator<Item = &'a AdapterStack>,
    I::IntoIter: Clone,
{
    let stacks = stacks.into_iter();
    let want = mode.adapter_kind();
    for s in stacks.clone() {
        if let Some(active) = s.active() {
            if active.kind() != want {
                return Err(Error::Config(format!(
                    "loss mode {mode:?} expects {want:?} adapters, found {:?}",
                    active.kind()
                )));
            }
        }
    }

    let mut total = task_loss;
    let mut breakdown = LossBreakdown {
        task_loss: tape.scalar(task_loss),
        lambda1,
        lambda2,
        ..LossBreakdown::default()
    };

    if mode.uses_orth() {
        let orth = total_orth_loss(tape, stacks.clone())?;
        breakdown.orth_loss = tape.scalar(orth);
        let weighted = tape.scale(orth, lambda1);
        total = tape.add(total, weighted)?;
    }

    if mode.uses_adalora_reg() {
        let mut reg: Option<Var> = None;
        for s in stacks {
            let Some(active) = s.active() else { continue };
            let a = tape.param(active.a());
            let b = tape.param(active.b());
            let term = adalora_reg(tape, a, b)?;
            reg = Some(match reg {
                Some(r) => tape.add(r, term)?,
                None => term,
            });
        }
        let reg = reg.unwrap_or_else(|| tape.constant(Matrix::zeros(1, 1)));
        breakdown.adalora_reg = tape.scalar(reg);
        let weighted = tape.scale(reg, lambda2);
        total = tape.add(total, weighted)?;
    }

    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}
