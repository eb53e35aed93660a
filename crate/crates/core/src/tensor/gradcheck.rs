use serde::Serialize;

use super::{Matrix, OpKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Corrupt this op's backward rule while taking the analytic gradient.
    pub fault: Option<OpKind>,
    pub execution: Execution,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            fault: None,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// (parameter index in visiting order, flat coordinate) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

const CHUNK: usize = 64;

/// Compares tape gradients of `f` against central differences for every
/// coordinate of every trainable parameter of `model`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<M, F>(model: &M, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: ParamSet + Clone + Sync + Send,
    F: Fn(&M, &mut Tape) -> Result<Var> + Sync + Send,
{
    if opts.h.is_nan() || opts.h <= 0.0 {
        return Err(Error::Config(format!(
            "finite difference step must be > 0, got {}",
            opts.h
        )));
    }
    let mut tape = match opts.fault {
        Some(k) => Tape::with_fault(k),
        None => Tape::new(),
    };
    let loss = f(model, &mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let grads = tape.backward(loss)?;

    let mut analytic: Vec<Option<Matrix>> = Vec::new();
    model.visit_params(&mut |p| {
        analytic.push(p.is_trainable().then(|| {
            grads
                .of_param(p)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.shape().0, p.shape().1))
        }));
    });

    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|g| (i, g.len())))
        .flat_map(|(i, n)| (0..n).map(move |c| (i, c)))
        .collect();
    let chunks: Vec<Vec<(usize, usize)>> = coords.chunks(CHUNK).map(<[_]>::to_vec).collect();

    let h = opts.h;
    let numeric_chunks = exec::map(opts.execution, chunks, |chunk| -> Result<Vec<f64>> {
        let mut local = model.clone();
        let mut out = Vec::with_capacity(chunk.len());
        for (pi, ci) in chunk {
            let original = read_coord(&local, pi, ci);
            write_coord(&mut local, pi, ci, original + h);
            let plus = eval(&local, &f)?;
            write_coord(&mut local, pi, ci, original - h);
            let minus = eval(&local, &f)?;
            write_coord(&mut local, pi, ci, original);
            out.push((plus - minus) / (2.0 * h));
        }
        Ok(out)
    });

    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut idx = 0;
    for chunk in numeric_chunks {
        for numeric in chunk? {
            let (pi, ci) = coords[idx];
            idx += 1;
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[ci]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if worst.is_none() || rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((pi, ci));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        coordinates: coords.len(),
        worst,
    })
}

fn eval<M, F>(model: &M, f: &F) -> Result<f64>
where
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(model, &mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(
            "objective is not finite under perturbation".into(),
        ));
    }
    Ok(v)
}

fn read_coord<M: ParamSet>(model: &M, param: usize, coord: usize) -> f64 {
    let mut i = 0;
    let mut out = 0.0;
    model.visit_params(&mut |p| {
        if i == param {
            out = p.value().data()[coord];
        }
        i += 1;
    });
    out
}

fn write_coord<M: ParamSet>(model: &mut M, param: usize, coord: usize, value: f64) {
    let mut i = 0;
    model.visit_params_mut(&mut |p| {
        if i == param {
            p.value_mut().data_mut()[coord] = value;
        }
        i += 1;
    });
}
