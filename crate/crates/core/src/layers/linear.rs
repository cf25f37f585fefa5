use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::{dropout, ForwardCtx};

/// Affine map `x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.insert(format!("{prefix}.weight"), xavier_uniform(&[out_dim, in_dim], in_dim, out_dim, rng))?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    /// Accepts `[L, in]` or `[in]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(Error::dim("linear", format!("input {shape:?} for a {}->{} layer", self.in_dim, self.out_dim)));
        }
        let x2 = if shape.len() == 1 { tape.reshape(x, &[1, self.in_dim])? } else { x };
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul_bt(x2, w)?;
        let y = tape.add_row(y, b)?;
        if shape.len() == 1 {
            tape.reshape(y, &[self.out_dim])
        } else {
            Ok(y)
        }
    }
}

/// Layer normalisation over the trailing axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dim("layernorm", "normalised extent is zero"));
        }
        let gain = store.insert(format!("{prefix}.gain"), Tensor::ones(&[dim]))?;
        let offset = store.insert(format!("{prefix}.offset"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, offset, dim, eps: Self::EPS })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let o = tape.param(self.offset);
        tape.layer_norm(x, g, o, F::from_f64_lossy(self.eps))
    }
}

/// Position-wise `Linear(d -> hidden) -> ReLU -> Dropout -> Linear(hidden -> d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub project: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            expand: Linear::new(store, &format!("{prefix}.0"), d_model, hidden, rng)?,
            project: Linear::new(store, &format!("{prefix}.1"), hidden, d_model, rng)?,
            dropout,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.expand.forward(tape, x)?;
        let h = tape.relu(h);
        let h = dropout(tape, h, self.dropout, ctx)?;
        self.project.forward(tape, h)
    }
}

/// Convolution with bias, `[C_out, C_in, k, k]` kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k2 = kernel * kernel;
        let weight = store.insert(
            format!("{prefix}.weight"),
            xavier_uniform(&[out_channels, in_channels, kernel, kernel], in_channels * k2, out_channels * k2, rng),
        )?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}
