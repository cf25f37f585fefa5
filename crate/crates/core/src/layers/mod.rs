//! Parameterised building blocks recorded onto a [`Tape`](crate::tensor::Tape).

mod attention;
mod gru;
mod linear;
mod positional;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

pub use attention::{causal_mask, AttentionMask, MultiHeadAttention};
pub use gru::GruCell;
pub use linear::{Conv2d, FeedForward, LayerNorm, Linear};
pub use positional::PositionalEncoding;
pub use transformer::{DecoderLayer, DecoderStack, EncoderLayer, EncoderStack, NormOrder};

/// Train/eval switch plus the random stream consumed by dropout.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    /// Inference: dropout is the identity.
    pub fn eval() -> Self {
        ForwardCtx { rng: None }
    }

    /// Training with dropout masks drawn from a stream seeded by `seed`.
    pub fn train(seed: u64) -> Self {
        ForwardCtx { rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("dropout", format!("rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, rate: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    check_dropout_rate(rate)?;
    let Some(rng) = ctx.rng.as_mut() else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
    let mask = (0..tape.value(x).len()).map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect();
    tape.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![4], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let y = dropout(&mut tape, x, 0.5, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = dropout(&mut tape, x, 0.0, &mut ForwardCtx::train(1)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(matches!(dropout(&mut tape, x, 1.0, &mut ForwardCtx::eval()), Err(Error::Config { .. })));
    }

    #[test]
    fn dropout_statistics() {
        let n = 1_000_000;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[n]));
        let y = dropout(&mut tape, x, 0.5, &mut ForwardCtx::train(42)).unwrap();
        let d = tape.value(y).data();
        let survivors = d.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = d.iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() <= 0.002, "{survivors}");
        assert!((mean - 1.0).abs() <= 0.005, "{mean}");
    }
}
