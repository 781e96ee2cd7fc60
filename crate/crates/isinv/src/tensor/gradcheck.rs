//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::Result;

/// Outcome of a gradient check: the worst coordinate and its two values.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Full central-difference gradient of a scalar function, one evaluation pair
/// per coordinate. Independent of the tape; used as the oracle.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (fp - fm) / (2.0 * h);
    }
    out
}

/// Compare the tape gradient of `build`'s scalar output against central
/// differences at the listed coordinates (all coordinates when empty).
///
/// Relative error uses `|a - n| / max(|a|, |n|, 1e-6)` so near-zero gradients
/// do not divide by zero.
pub fn check_gradient<F>(build: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut leaf_x = x.clone();
    leaf_x.requires_grad = true;

    let mut tape = Tape::new();
    let v = tape.leaf(&leaf_x)?;
    let loss = build(&mut tape, v)?;
    let analytic = {
        let grads = tape.grad_of(loss, &[v])?;
        grads.into_iter().next().expect("one wrt").tensor
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut frozen = probe.clone();
        frozen.requires_grad = false;
        let mut t = Tape::new();
        let pv = t.leaf(&frozen)?;
        let l = build(&mut t, pv)?;
        Ok(t.scalar_value(l))
    };

    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..x.len()).collect();
        &all
    } else {
        coords
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
