//! Central finite-difference gradient oracle.
//!
//! Independent of the tape's backward pass by construction: it only calls
//! the forward evaluation, perturbing one trainable scalar at a time.

use crate::error::{Error, Result};
use crate::numerics::params::ParameterSet;
use crate::numerics::tape::GradMap;

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// A forward evaluation producing a scalar loss and its analytic gradients.
pub struct LossEval {
    pub loss: f64,
    pub grads: GradMap,
}

/// Max over all trainable scalars of `|analytic − numeric| / max(1, |numeric|)`,
/// with the numeric side from central differences at `eps`.
///
/// `f` is evaluated twice at the unperturbed point first; if the two losses
/// differ the function is not deterministic and checking it is meaningless.
pub fn finite_diff_check<F>(f: F, params: &ParameterSet, eps: f64) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<LossEval>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let base = f(params)?;
    let repeat = f(params)?;
    if base.loss.to_bits() != repeat.loss.to_bits() {
        return Err(Error::NonDeterministic { first: base.loss, second: repeat.loss });
    }

    let mut worst: f64 = 0.0;
    let ids: Vec<String> = params.iter().filter(|p| p.trainable).map(|p| p.id.clone()).collect();
    for id in ids {
        let numel = params.get(&id)?.value.numel();
        for idx in 0..numel {
            let mut probe = params.clone();
            let original = probe.get(&id)?.value.data()[idx];

            probe.get_mut(&id)?.value.data_mut()[idx] = original + eps;
            let plus = f(&probe)?.loss;
            probe.get_mut(&id)?.value.data_mut()[idx] = original - eps;
            let minus = f(&probe)?.loss;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = base.grads.get(&id).map(|g| g.data()[idx]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
