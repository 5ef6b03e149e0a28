//! Central finite-difference gradient checker.
//!
//! Only forward evaluation is used for the numerical side, so the check is
//! independent of every backward rule it verifies.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of one check. `rel_error` is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`
/// over the concatenation of all input gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub rel_error: f64,
}

/// Compares `backward` against central differences with step `h` for every
/// input that requires a gradient. `f` must build a scalar on the tape from
/// the given leaves.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        analytic.push(grads.wrt(vars[k]));
        let mut num = vec![0.0; t.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let x0 = t.data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        numeric.push(num);
    }

    let flat = |v: &Vec<Vec<f64>>| v.iter().flatten().copied().collect::<Vec<_>>();
    let (a, n) = (flat(&analytic), flat(&numeric));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
    let rel_error = norm(&diff) / norm(&a).max(norm(&n)).max(1e-10);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error,
    })
}

/// Reduces a non-scalar output to `Σ out ⊙ weights` so it can be checked.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(tape.shape(out).to_vec(), weights.to_vec())?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}
