//! Outcome and build-order losses, mean-reduced over unmasked steps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-7;

fn unmasked_weights<F: Scalar>(mask: &[bool]) -> Result<Vec<F>> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Data("every step is masked".into()));
    }
    let w = F::one() / F::from_usize(n).unwrap();
    Ok(mask.iter().map(|&m| if m { w } else { F::zero() }).collect())
}

/// Binary cross-entropy of `win_prob: [B, T]` against one result per replay.
pub fn loss_global<F: Scalar>(win_prob: &Tensor<F>, results: &[u8], mask: &[bool]) -> Result<F> {
    let s = win_prob.shape();
    if s.len() != 2 || s[0] != results.len() || mask.len() != win_prob.len() {
        return Err(Error::dim(
            "loss_global",
            format!("win_prob {s:?}, {} results, {} mask entries", results.len(), mask.len()),
        ));
    }
    let targets = (0..win_prob.len()).map(|i| F::from_u8(results[i / s[1]]).unwrap()).collect();
    let mut tape = Tape::new();
    let p = tape.constant(win_prob.clone());
    let l = tape.binary_cross_entropy(p, targets, unmasked_weights(mask)?, F::from_f64_lossy(PROB_CLAMP))?;
    Ok(tape.value(l).item())
}

/// Cross-entropy `-ln P(a_true)` of `action_dist: [B, T, A]`.
pub fn loss_build<F: Scalar>(action_dist: &Tensor<F>, actions: &[usize], mask: &[bool]) -> Result<F> {
    let s = action_dist.shape();
    if s.len() != 3 || actions.len() != s[0] * s[1] || mask.len() != actions.len() {
        return Err(Error::dim(
            "loss_build",
            format!("action_dist {s:?}, {} actions, {} mask entries", actions.len(), mask.len()),
        ));
    }
    let mut tape = Tape::new();
    let d = tape.constant(action_dist.reshape(&[s[0] * s[1], s[2]])?);
    let l = tape.neg_log_likelihood(d, actions.to_vec(), unmasked_weights(mask)?, F::from_f64_lossy(PROB_CLAMP))?;
    Ok(tape.value(l).item())
}

/// `w_global * lg + w_build * lb`.
pub fn loss_total<F: Scalar>(lg: F, lb: F, weights: [f64; 2]) -> F {
    F::from_f64_lossy(weights[0]) * lg + F::from_f64_lossy(weights[1]) * lb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let p = Tensor::<f64>::from_f64(&[1, 1], &[0.5]).unwrap();
        assert!((loss_global(&p, &[1], &[true]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let sure = Tensor::<f64>::from_f64(&[1, 1], &[1.0 - 1e-7]).unwrap();
        assert!(loss_global(&sure, &[1], &[true]).unwrap() < 1e-6);
        let uniform = Tensor::<f64>::full(&[1, 1, 75], 1.0 / 75.0);
        assert!((loss_build(&uniform, &[3], &[true]).unwrap() - 75f64.ln()).abs() < 1e-12);
        assert!((loss_total(0.25, 4.5, [1.0, 1.0]) - 4.75f64).abs() < 1e-9);
        assert_eq!(loss_total(0.0f64, 0.0, [1.0, 1.0]), 0.0);
    }

    #[test]
    fn masked_steps_contribute_nothing() {
        let p = Tensor::<f64>::from_f64(&[1, 3], &[0.9, 0.2, 0.123]).unwrap();
        let q = Tensor::<f64>::from_f64(&[1, 3], &[0.9, 0.2, 0.999]).unwrap();
        let mask = [true, true, false];
        assert_eq!(loss_global(&p, &[1], &mask).unwrap(), loss_global(&q, &[1], &mask).unwrap());
        assert!(matches!(loss_global(&p, &[1], &[false; 3]), Err(Error::Data(_))));
    }

    #[test]
    fn nan_and_bad_label() {
        let p = Tensor::<f64>::from_f64(&[1, 1], &[f64::NAN]).unwrap();
        assert!(matches!(loss_global(&p, &[1], &[true]), Err(Error::Numeric(_))));
        let d = Tensor::<f64>::full(&[1, 1, 4], 0.25);
        assert!(matches!(loss_build(&d, &[4], &[true]), Err(Error::Data(_))));
    }
}
