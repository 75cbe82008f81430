//! Finite-difference validation of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Compare reverse-mode gradients of `f` against central differences at `x`
/// and return the worst relative error `|a - n| / max(1, |n|)`.
///
/// `f` must be a pure function of its `Var` argument: it is re-invoked on a
/// fresh tape for every perturbed coordinate, so any randomness must be
/// derived deterministically inside `f` (seeded draws, not entropy). A
/// baseline double evaluation guards this; disagreement is an error rather
/// than a silently wrong check.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = f(&tape, &v)?;
        if !out.value().is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: out.shape(),
            });
        }
        Ok(out.item())
    };

    let base = eval(x)?;
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let analytic = {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&tape, &v)?;
        out.backward()?.get(&v)
    };

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
