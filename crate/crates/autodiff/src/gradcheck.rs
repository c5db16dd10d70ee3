//! Central-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Deterministic contraction weights used to turn a non-scalar output into a
/// scalar probe. Irrational-ish spacing avoids accidental cancellation.
fn probe_weight(i: usize) -> f64 {
    let x = (i as f64 + 1.0) * 0.618_033_988_749_895;
    0.5 + (x - x.floor())
}

fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    let t = tape.value(out);
    if t.len() == 1 {
        return Ok(out);
    }
    let (r, c) = t.dims2();
    let w = Tensor::matrix(r, c, (0..r * c).map(probe_weight).collect());
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    let v = tape.value(s).item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check probe".into()));
    }
    Ok(v)
}

/// Builds `f` over `inputs`, differentiates it on the tape, and compares every
/// input coordinate against a central difference with step `eps`.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)`. Non-scalar
/// outputs are contracted with fixed weights first.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    if !tape.value(s).is_finite() {
        return Err(TensorError::NonFinite("grad_check forward".into()));
    }
    let grads = tape.backward(s)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = evaluate(&probe, &f)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = evaluate(&probe, &f)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
