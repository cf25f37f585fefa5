//! The dual-branch macromanagement network and its comparison variants.
//!
//! Every variant shares the two feature branches: an MLP over the per-step
//! global vector and a CNN over the per-step spatial volume, both producing
//! `d_model`-wide embeddings. What sits between those embeddings and the two
//! prediction heads is selected by [`Variant`]:
//!
//! * `full`: encoder stack over `mlp + cnn + pe`, decoder stack queried with
//!   `encoder_out + pe`, skip connections `mlp -> head_win`, `cnn -> head_build`.
//! * `no_skip`: as `full` without the skip connections.
//! * `no_decoder`: heads read the encoder output directly (skips kept).
//! * `self_attn_only`: one single-head self-attention per branch, no
//!   positional information, summed and fed through a one-hidden-layer trunk.
//! * `gru_baseline`: `mlp + cnn` through a GRU and a fully connected layer.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    check_dropout_rate, Conv2d, DecoderStack, EncoderStack, ForwardCtx, GruCell, Linear, MultiHeadAttention, NormOrder,
    PositionalEncoding,
};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Architecture selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSkip,
    NoDecoder,
    SelfAttnOnly,
    GruBaseline,
}

impl Variant {
    /// Reporting order used by ablation tables.
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::NoSkip, Variant::NoDecoder, Variant::SelfAttnOnly, Variant::GruBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSkip => "no_skip",
            Variant::NoDecoder => "no_decoder",
            Variant::SelfAttnOnly => "self_attn_only",
            Variant::GruBaseline => "gru_baseline",
        }
    }

    fn is_transformer(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSkip | Variant::NoDecoder)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }
}

/// Architecture hyperparameters. Defaults are the full-scale settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Depth of the encoder stack and of the decoder stack.
    pub layers: usize,
    pub dropout: f64,
    pub global_dim: usize,
    /// `[channels, height, width]` of the spatial input.
    pub spatial_shape: [usize; 3],
    pub action_count: usize,
    pub window_len: usize,
    /// Rows in the positional table; bounds the sequence length.
    pub max_len: usize,
    pub causal_mask: bool,
    /// Apply a channel softmax to the decoder output before the heads.
    pub decoder_softmax: bool,
    pub norm_order: NormOrder,
    pub cnn_channels: [usize; 3],
    pub cnn_strides: [usize; 3],
    pub head_hidden: usize,
    pub gru_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            d_model: 256,
            heads: 8,
            ffn_dim: 1024,
            layers: 6,
            dropout: 0.5,
            global_dim: 101,
            spatial_shape: [13, 64, 64],
            action_count: 75,
            window_len: 10,
            max_len: 512,
            causal_mask: true,
            decoder_softmax: true,
            norm_order: NormOrder::PreNorm,
            cnn_channels: [16, 32, 16],
            cnn_strides: [2, 2, 2],
            head_hidden: 128,
            gru_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// Small configuration for finite-difference checks: `d_model = 8`, two
    /// heads, two layers, `2x8x8` spatial input and a 6-wide global vector.
    pub fn toy(variant: Variant) -> Self {
        ModelConfig {
            variant,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            layers: 2,
            dropout: 0.0,
            global_dim: 6,
            spatial_shape: [2, 8, 8],
            action_count: 5,
            window_len: 5,
            max_len: 16,
            cnn_channels: [4, 4, 2],
            cnn_strides: [2, 1, 1],
            head_hidden: 6,
            gru_hidden: 6,
            ..Default::default()
        }
    }

    /// Desk-scale configuration used by the planted-signal experiments: the
    /// full-scale optimiser/dropout settings on a narrower, shallower network
    /// over a `13x8x8` spatial grid. The decoder output softmax is off: it
    /// squashes the trunk output to `~1/d_model` and stalls learning at this
    /// scale.
    pub fn desk(variant: Variant, action_count: usize) -> Self {
        ModelConfig {
            variant,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            layers: 2,
            spatial_shape: [13, 8, 8],
            action_count,
            max_len: 64,
            decoder_softmax: false,
            cnn_channels: [8, 16, 16],
            cnn_strides: [2, 1, 1],
            head_hidden: 64,
            gru_hidden: 64,
            ..Default::default()
        }
    }

    /// Spatial extent after each convolution and after pooling.
    fn cnn_extents(&self) -> Option<Vec<(usize, usize)>> {
        let [_, mut h, mut w] = self.spatial_shape;
        let mut out = Vec::new();
        for &s in &self.cnn_strides {
            if s == 0 || h == 0 || w == 0 {
                return None;
            }
            // kernel 3, pad 1
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
            out.push((h, w));
        }
        if h < 2 || w < 2 {
            return None;
        }
        out.push(((h - 2) / 2 + 1, (w - 2) / 2 + 1));
        Some(out)
    }

    /// Width of the flattened CNN output.
    pub fn cnn_flat_width(&self) -> Option<usize> {
        let ext = self.cnn_extents()?;
        let (h, w) = *ext.last()?;
        Some(self.cnn_channels[2] * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::config("d_model", format!("must be even and positive, got {}", self.d_model)));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config("heads", format!("d_model {} not divisible by {}", self.d_model, self.heads)));
        }
        if self.action_count == 0 {
            return Err(Error::config("action_count", "must be at least 1"));
        }
        if self.window_len == 0 {
            return Err(Error::config("window_len", "must be at least 1"));
        }
        if self.window_len > self.max_len {
            return Err(Error::config("window_len", format!("{} exceeds max_len {}", self.window_len, self.max_len)));
        }
        if self.global_dim == 0 {
            return Err(Error::config("global_dim", "must be at least 1"));
        }
        if self.spatial_shape.contains(&0) {
            return Err(Error::config("spatial_shape", format!("{:?} has a zero extent", self.spatial_shape)));
        }
        if self.variant.is_transformer() && (self.layers == 0 || self.ffn_dim == 0) {
            return Err(Error::config("layers", "transformer variants need at least one layer and ffn_dim > 0"));
        }
        if self.head_hidden == 0 || self.gru_hidden == 0 || self.cnn_channels.contains(&0) {
            return Err(Error::config("head_hidden", "hidden widths must be positive"));
        }
        check_dropout_rate(self.dropout)?;
        match self.cnn_flat_width() {
            Some(w) if w == self.d_model => Ok(()),
            Some(w) => Err(Error::config(
                "cnn_channels",
                format!("CNN flattens to {w} values but d_model is {}", self.d_model),
            )),
            None => Err(Error::config(
                "cnn_strides",
                format!("strides {:?} shrink {:?} below the 2x2 pooling window", self.cnn_strides, self.spatial_shape),
            )),
        }
    }
}

/// One window of consecutive steps fed to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInput<F: Scalar = f32> {
    /// `[T, global_dim]`
    pub global: Tensor<F>,
    /// `[T, C, H, W]`
    pub spatial: Tensor<F>,
    /// Replay id and first step, for error messages.
    pub origin: Option<(String, usize)>,
}

impl<F: Scalar> WindowInput<F> {
    pub fn new(global: Tensor<F>, spatial: Tensor<F>) -> Self {
        WindowInput { global, spatial, origin: None }
    }

    pub fn len(&self) -> usize {
        self.global.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rejects values outside `[0, 1]` beyond a `1e-6` tolerance.
    pub fn validate_range(&self) -> Result<()> {
        let tol = F::from_f64_lossy(1e-6);
        let (lo, hi) = (-tol, F::one() + tol);
        let t_len = self.len();
        for (name, t) in [("global", &self.global), ("spatial", &self.spatial)] {
            let per_step = t.len() / t_len;
            if let Some(i) = t.data().iter().position(|&v| !(v >= lo && v <= hi)) {
                let step = i / per_step;
                let at = match &self.origin {
                    Some((id, start)) => format!("replay {id} step {}", start + step),
                    None => format!("window step {step}"),
                };
                return Err(Error::Data(format!(
                    "{name} feature {} = {:?} outside [0, 1] at {at}",
                    i % per_step,
                    t.data()[i]
                )));
            }
        }
        Ok(())
    }
}

/// Per-step predictions for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput<F: Scalar = f32> {
    /// `[T]`, probability of a win.
    pub win_prob: Tensor<F>,
    /// `[T, action_count]`, rows sum to one.
    pub action_dist: Tensor<F>,
}

/// Tape handles of the intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub mlp_out: Var,
    pub cnn_out: Var,
    pub stack_out: Option<Var>,
    pub head_win_input: Var,
    pub head_build_input: Var,
    pub win_prob: Var,
    pub action_dist: Var,
}

/// Optional overrides for a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Route the encoder output straight to the heads even if a decoder exists.
    pub bypass_decoder: bool,
}

#[derive(Clone, Debug)]
struct Head {
    hidden: Linear,
    out: Linear,
}

impl Head {
    fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Transformer {
        encoder: EncoderStack,
        decoder: Option<DecoderStack>,
        head_win: Head,
        head_build: Head,
    },
    SelfAttention {
        global_attn: MultiHeadAttention,
        spatial_attn: MultiHeadAttention,
        trunk: Linear,
        head_win: Linear,
        head_build: Linear,
    },
    Recurrent {
        gru: GruCell,
        fc: Linear,
        head_win: Linear,
        head_build: Linear,
    },
}

/// An assembled network: configuration, parameters and wiring.
#[derive(Clone, Debug)]
pub struct MacroModel<F: Scalar = f32> {
    cfg: ModelConfig,
    params: ParamStore<F>,
    pe: PositionalEncoding<F>,
    mlp: [Linear; 3],
    cnn: [Conv2d; 3],
    body: Body,
}

/// Builds a model with every parameter drawn from `seed`.
pub fn build_model<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<MacroModel<F>> {
    MacroModel::new(cfg, seed)
}

impl<F: Scalar> MacroModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;

        let mlp = [
            Linear::new(&mut store, "mlp_encoder.0", cfg.global_dim, d, &mut rng)?,
            Linear::new(&mut store, "mlp_encoder.1", d, d, &mut rng)?,
            Linear::new(&mut store, "mlp_encoder.2", d, d, &mut rng)?,
        ];
        let [c_in, _, _] = cfg.spatial_shape;
        let ch = cfg.cnn_channels;
        let st = cfg.cnn_strides;
        let cnn = [
            Conv2d::new(&mut store, "cnn_encoder.0", c_in, ch[0], 3, st[0], 1, &mut rng)?,
            Conv2d::new(&mut store, "cnn_encoder.1", ch[0], ch[1], 3, st[1], 1, &mut rng)?,
            Conv2d::new(&mut store, "cnn_encoder.2", ch[1], ch[2], 3, st[2], 1, &mut rng)?,
        ];

        let body = match cfg.variant {
            Variant::Full | Variant::NoSkip | Variant::NoDecoder => {
                let encoder = EncoderStack::new(
                    &mut store,
                    "encoder_stack",
                    cfg.layers,
                    d,
                    cfg.heads,
                    cfg.ffn_dim,
                    cfg.dropout,
                    cfg.norm_order,
                    &mut rng,
                )?;
                let decoder = if cfg.variant == Variant::NoDecoder {
                    None
                } else {
                    Some(DecoderStack::new(
                        &mut store,
                        "decoder_stack",
                        cfg.layers,
                        d,
                        cfg.heads,
                        cfg.ffn_dim,
                        cfg.dropout,
                        cfg.norm_order,
                        &mut rng,
                    )?)
                };
                let (head_win, head_build) = Self::transformer_heads(&mut store, cfg, &mut rng)?;
                Body::Transformer { encoder, decoder, head_win, head_build }
            }
            Variant::SelfAttnOnly => Body::SelfAttention {
                global_attn: MultiHeadAttention::new(&mut store, "global_attn", d, 1, cfg.dropout, &mut rng)?,
                spatial_attn: MultiHeadAttention::new(&mut store, "spatial_attn", d, 1, cfg.dropout, &mut rng)?,
                trunk: Linear::new(&mut store, "trunk.0", d, cfg.head_hidden, &mut rng)?,
                head_win: Linear::new(&mut store, "head_win.0", cfg.head_hidden, 1, &mut rng)?,
                head_build: Linear::new(&mut store, "head_build.0", cfg.head_hidden, cfg.action_count, &mut rng)?,
            },
            Variant::GruBaseline => {
                let gh = cfg.gru_hidden;
                Body::Recurrent {
                    gru: GruCell::new(&mut store, "gru", d, gh, &mut rng)?,
                    fc: Linear::new(&mut store, "fc.0", gh, gh, &mut rng)?,
                    head_win: Linear::new(&mut store, "head_win.0", gh, 1, &mut rng)?,
                    head_build: Linear::new(&mut store, "head_build.0", gh, cfg.action_count, &mut rng)?,
                }
            }
        };
        Ok(MacroModel { cfg: cfg.clone(), params: store, pe: PositionalEncoding::new(cfg.max_len, d)?, mlp, cnn, body })
    }

    fn transformer_heads(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Head, Head)> {
        let (d, hh) = (cfg.d_model, cfg.head_hidden);
        let head_win = Head {
            hidden: Linear::new(store, "head_win.0", d, hh, rng)?,
            out: Linear::new(store, "head_win.1", hh, 1, rng)?,
        };
        let head_build = Head {
            hidden: Linear::new(store, "head_build.0", d, hh, rng)?,
            out: Linear::new(store, "head_build.1", hh, cfg.action_count, rng)?,
        };
        Ok((head_win, head_build))
    }

    /// Wraps externally supplied parameters (e.g. from a checkpoint). Every
    /// parameter of the architecture must be present with the right shape.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::config(
                "checkpoint",
                format!("{} tensors given, architecture has {}", params.len(), model.params.len()),
            ));
        }
        for (_, p) in params.iter() {
            model.params.set(&p.name, p.value.clone())?;
            let id = model.params.id(&p.name).expect("set succeeded");
            model.params.get_mut(id).frozen = p.frozen;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn positional_encoding(&self) -> &PositionalEncoding<F> {
        &self.pe
    }

    fn check_input(&self, input: &WindowInput<F>) -> Result<()> {
        let t = input.len();
        let [c, h, w] = self.cfg.spatial_shape;
        if input.global.shape() != [t, self.cfg.global_dim] {
            return Err(Error::dim(
                "forward",
                format!("global {:?}, expected [T, {}]", input.global.shape(), self.cfg.global_dim),
            ));
        }
        if input.spatial.shape() != [t, c, h, w] {
            return Err(Error::dim(
                "forward",
                format!("spatial {:?}, expected [{t}, {c}, {h}, {w}]", input.spatial.shape()),
            ));
        }
        if t > self.pe.max_len() {
            return Err(Error::config("max_len", format!("window of {t} steps exceeds max_len {}", self.pe.max_len())));
        }
        input.validate_range()
    }

    /// Branch embeddings `([T, d], [T, d])` for every step of the window.
    pub fn encode(&self, tape: &mut Tape<'_, F>, input: &WindowInput<F>) -> Result<(Var, Var)> {
        self.check_input(input)?;
        let g = tape.constant(input.global.clone());
        let mut h = g;
        for layer in &self.mlp {
            h = layer.forward(tape, h)?;
            h = tape.relu(h);
        }
        let s = tape.constant(input.spatial.clone());
        let mut x = s;
        for conv in &self.cnn {
            x = conv.forward(tape, x)?;
            x = tape.relu(x);
        }
        let x = tape.maxpool2d(x, 2, 2)?;
        let cnn = tape.reshape(x, &[input.len(), self.cfg.d_model])?;
        Ok((h, cnn))
    }

    /// Records a full forward pass on `tape`.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p, F>,
        input: &WindowInput<F>,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardTrace> {
        self.forward_with(tape, input, ctx, ForwardOptions::default())
    }

    pub fn forward_with<'p>(
        &self,
        tape: &mut Tape<'p, F>,
        input: &WindowInput<F>,
        ctx: &mut ForwardCtx,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        let t = input.len();
        let (mlp_out, cnn_out) = self.encode(tape, input)?;
        let causal = self.cfg.causal_mask;
        let (stack_out, win_logit, build_logits, win_in, build_in) = match &self.body {
            Body::Transformer { encoder, decoder, head_win, head_build } => {
                let pe = tape.constant(self.pe.rows(t)?);
                let tokens = tape.add(mlp_out, cnn_out)?;
                let tokens = tape.add(tokens, pe)?;
                let enc = encoder.forward(tape, tokens, causal, ctx)?;
                let stack = match decoder {
                    Some(dec) if !opts.bypass_decoder => {
                        let q = tape.add(enc, pe)?;
                        let out = dec.forward(tape, q, enc, causal, ctx)?;
                        if self.cfg.decoder_softmax {
                            tape.softmax(out, 1)?
                        } else {
                            out
                        }
                    }
                    _ => enc,
                };
                let (win_in, build_in) = if self.cfg.variant == Variant::NoSkip {
                    (stack, stack)
                } else {
                    (tape.add(stack, mlp_out)?, tape.add(stack, cnn_out)?)
                };
                let w = head_win.forward(tape, win_in)?;
                let b = head_build.forward(tape, build_in)?;
                (Some(stack), w, b, win_in, build_in)
            }
            Body::SelfAttention { global_attn, spatial_attn, trunk, head_win, head_build } => {
                let ga = global_attn.forward(tape, mlp_out, mlp_out, mlp_out, None, ctx)?;
                let sa = spatial_attn.forward(tape, cnn_out, cnn_out, cnn_out, None, ctx)?;
                let agg = tape.add(ga, sa)?;
                let h = trunk.forward(tape, agg)?;
                let h = tape.relu(h);
                let w = head_win.forward(tape, h)?;
                let b = head_build.forward(tape, h)?;
                (Some(agg), w, b, h, h)
            }
            Body::Recurrent { gru, fc, head_win, head_build } => {
                let fused = tape.add(mlp_out, cnn_out)?;
                let h0 = tape.constant(Tensor::zeros(&[self.cfg.gru_hidden]));
                let hs = gru.forward(tape, fused, h0)?;
                let h = fc.forward(tape, hs)?;
                let h = tape.relu(h);
                let w = head_win.forward(tape, h)?;
                let b = head_build.forward(tape, h)?;
                (Some(hs), w, b, h, h)
            }
        };
        let win = tape.sigmoid(win_logit);
        let win_prob = tape.reshape(win, &[t])?;
        let action_dist = tape.softmax(build_logits, 1)?;
        Ok(ForwardTrace {
            mlp_out,
            cnn_out,
            stack_out,
            head_win_input: win_in,
            head_build_input: build_in,
            win_prob,
            action_dist,
        })
    }

    /// Inference-mode prediction (dropout off).
    pub fn predict(&self, input: &WindowInput<F>) -> Result<PredictionOutput<F>> {
        let mut tape = Tape::with_params(&self.params);
        let trace = self.forward(&mut tape, input, &mut ForwardCtx::eval())?;
        Ok(PredictionOutput {
            win_prob: tape.value(trace.win_prob).clone(),
            action_dist: tape.value(trace.action_dist).clone(),
        })
    }

    /// Branch embeddings of a single step: `global [global_dim]`,
    /// `spatial [C, H, W]` to two `[d_model]` vectors.
    pub fn encode_step(&self, global: &Tensor<F>, spatial: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut gs = vec![1];
        gs.extend_from_slice(global.shape());
        let mut ss = vec![1];
        ss.extend_from_slice(spatial.shape());
        let input = WindowInput::new(global.reshape(&gs)?, spatial.reshape(&ss)?);
        let mut tape = Tape::with_params(&self.params);
        let (m, c) = self.encode(&mut tape, &input)?;
        let d = [self.cfg.d_model];
        Ok((tape.value(m).reshape(&d)?, tape.value(c).reshape(&d)?))
    }
}
