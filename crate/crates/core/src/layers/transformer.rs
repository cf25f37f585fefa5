use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Var};

use super::{causal_mask, FeedForward, ForwardCtx, LayerNorm, MultiHeadAttention};

/// Where layer normalisation sits relative to each residual branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// `x + f(LN(x))`
    #[default]
    PreNorm,
    /// `LN(x + f(x))`
    PostNorm,
}

fn residual<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    norm: &LayerNorm,
    order: NormOrder,
    f: impl FnOnce(&mut Tape<'_, F>, Var) -> Result<Var>,
) -> Result<Var> {
    match order {
        NormOrder::PreNorm => {
            let h = norm.forward(tape, x)?;
            let h = f(tape, h)?;
            tape.add(x, h)
        }
        NormOrder::PostNorm => {
            let h = f(tape, x)?;
            let s = tape.add(x, h)?;
            norm.forward(tape, s)
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub order: NormOrder,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        order: NormOrder,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm_attn: LayerNorm::new(store, &format!("{prefix}.norm1"), d_model)?,
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), d_model, heads, dropout, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.norm2"), d_model)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d_model, ffn_dim, dropout, rng)?,
            order,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        causal: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let len = tape.shape(x)[0];
        let mask = causal.then(|| causal_mask(len, len));
        let x = residual(tape, x, &self.norm_attn, self.order, |t, h| {
            self.self_attn.forward(t, h, h, h, mask.as_ref(), ctx)
        })?;
        residual(tape, x, &self.norm_ffn, self.order, |t, h| self.ffn.forward(t, h, ctx))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub order: NormOrder,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        order: NormOrder,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            norm_self: LayerNorm::new(store, &format!("{prefix}.norm1"), d_model)?,
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), d_model, heads, dropout, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{prefix}.norm2"), d_model)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{prefix}.cross_attn"), d_model, heads, dropout, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.norm3"), d_model)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d_model, ffn_dim, dropout, rng)?,
            order,
        })
    }

    /// With `causal`, query `t` sees neither later queries nor later memory rows.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        memory: Option<Var>,
        causal: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let memory = memory.ok_or_else(|| Error::Contract("decoder layer needs encoder memory".into()))?;
        let (len, mem_len) = (tape.shape(x)[0], tape.shape(memory)[0]);
        let self_mask = causal.then(|| causal_mask(len, len));
        let cross_mask = causal.then(|| causal_mask(len, mem_len));
        let x = residual(tape, x, &self.norm_self, self.order, |t, h| {
            self.self_attn.forward(t, h, h, h, self_mask.as_ref(), ctx)
        })?;
        let x = residual(tape, x, &self.norm_cross, self.order, |t, h| {
            self.cross_attn.forward(t, h, memory, memory, cross_mask.as_ref(), ctx)
        })?;
        residual(tape, x, &self.norm_ffn, self.order, |t, h| self.ffn.forward(t, h, ctx))
    }
}

/// Encoder layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        depth: usize,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        order: NormOrder,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                EncoderLayer::new(store, &format!("{prefix}.layers.{i}"), d_model, heads, ffn_dim, dropout, order, rng)
            })
            .collect::<Result<_>>()?;
        Ok(EncoderStack { layers, norm: LayerNorm::new(store, &format!("{prefix}.norm"), d_model)? })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        causal: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h, causal, ctx)?;
        }
        self.norm.forward(tape, h)
    }
}

/// Decoder layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
}

impl DecoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        depth: usize,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        order: NormOrder,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                DecoderLayer::new(store, &format!("{prefix}.layers.{i}"), d_model, heads, ffn_dim, dropout, order, rng)
            })
            .collect::<Result<_>>()?;
        Ok(DecoderStack { layers, norm: LayerNorm::new(store, &format!("{prefix}.norm"), d_model)? })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        memory: Var,
        causal: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h, Some(memory), causal, ctx)?;
        }
        self.norm.forward(tape, h)
    }
}
