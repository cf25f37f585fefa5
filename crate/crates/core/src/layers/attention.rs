use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

use super::{dropout, ForwardCtx};

/// `[L_q, L_k]` boolean mask, row-major; `true` hides a key from a query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub queries: usize,
    pub keys: usize,
    pub masked: Vec<bool>,
}

/// Hides every key after the query's own position.
pub fn causal_mask(queries: usize, keys: usize) -> AttentionMask {
    let masked = (0..queries).flat_map(|i| (0..keys).map(move |j| j > i)).collect();
    AttentionMask { queries, keys, masked }
}

/// Multi-head scaled dot-product attention with bias-free projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub d_model: usize,
    pub heads: usize,
    /// Applied to the attention weights during training.
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config("heads", format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        let mut proj = |name: &str| {
            store.insert(format!("{prefix}.{name}"), xavier_uniform(&[d_model, d_model], d_model, d_model, rng))
        };
        Ok(MultiHeadAttention {
            w_q: proj("w_q")?,
            w_k: proj("w_k")?,
            w_v: proj("w_v")?,
            w_o: proj("w_o")?,
            d_model,
            heads,
            dropout,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&AttentionMask>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, query, key, value, mask, ctx)?.0)
    }

    /// Also returns the per-head `[L_q, L_k]` attention weights (before dropout).
    pub fn forward_with_weights<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&AttentionMask>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Vec<Var>)> {
        let (lq, lk) = (tape.shape(query)[0], tape.shape(key)[0]);
        for (name, v) in [("query", query), ("key", key), ("value", value)] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.d_model {
                return Err(Error::dim("attention", format!("{name} {s:?}, expected [L, {}]", self.d_model)));
            }
        }
        if tape.shape(value)[0] != lk {
            return Err(Error::dim("attention", "key and value lengths differ"));
        }
        if let Some(m) = mask {
            if m.queries != lq || m.keys != lk || m.masked.len() != lq * lk {
                return Err(Error::dim(
                    "attention",
                    format!("mask {}x{} for {lq} queries and {lk} keys", m.queries, m.keys),
                ));
            }
            if let Some(row) = (0..lq).find(|&i| m.masked[i * lk..(i + 1) * lk].iter().all(|&b| b)) {
                return Err(Error::Contract(format!("attention mask hides every key from query {row}")));
            }
        }

        let wq = tape.param(self.w_q);
        let wk = tape.param(self.w_k);
        let wv = tape.param(self.w_v);
        let wo = tape.param(self.w_o);
        let q = tape.matmul_bt(query, wq)?;
        let k = tape.matmul_bt(key, wk)?;
        let v = tape.matmul_bt(value, wv)?;

        let hd = self.head_dim();
        let scale = F::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * hd, hd)?, tape.slice_cols(k, h * hd, hd)?, tape.slice_cols(v, h * hd, hd)?)
            };
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let scores = match mask {
                Some(m) => tape.mask_fill(scores, m.masked.clone())?,
                None => scores,
            };
            let attn = tape.softmax(scores, 1)?;
            weights.push(attn);
            let attn = dropout(tape, attn, self.dropout, ctx)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((tape.matmul_bt(cat, wo)?, weights))
    }
}
