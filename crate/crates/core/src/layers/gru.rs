use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * h + z * n
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: [ParamId; 3],
    pub input_bias: [ParamId; 3],
    pub hidden: [ParamId; 3],
    pub hidden_bias: [ParamId; 3],
    pub input_dim: usize,
    pub hidden_dim: usize,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl GruCell {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut reg = |kind: &str, shape: &[usize], fan_in: usize| -> Result<[ParamId; 3]> {
            let mut ids = [ParamId(0); 3];
            for (slot, g) in ids.iter_mut().zip(GATES) {
                let value = if shape.len() == 2 {
                    xavier_uniform(shape, fan_in, hidden_dim, rng)
                } else {
                    Tensor::zeros(shape)
                };
                *slot = store.insert(format!("{prefix}.{kind}_{g}"), value)?;
            }
            Ok(ids)
        };
        Ok(GruCell {
            input: reg("w_i", &[hidden_dim, input_dim], input_dim)?,
            input_bias: reg("b_i", &[hidden_dim], 0)?,
            hidden: reg("w_h", &[hidden_dim, hidden_dim], hidden_dim)?,
            hidden_bias: reg("b_h", &[hidden_dim], 0)?,
            input_dim,
            hidden_dim,
        })
    }

    /// Runs over `xs: [L, input_dim]` from `h0: [hidden_dim]`; returns `[L, hidden_dim]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, xs: Var, h0: Var) -> Result<Var> {
        let s = tape.shape(xs).to_vec();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::dim("gru", format!("input {s:?}, expected [L, {}]", self.input_dim)));
        }
        if tape.shape(h0) != [self.hidden_dim] {
            return Err(Error::dim("gru", format!("h0 {:?}, expected [{}]", tape.shape(h0), self.hidden_dim)));
        }
        // Input projections for every step at once.
        let mut proj = Vec::with_capacity(3);
        for g in 0..3 {
            let w = tape.param(self.input[g]);
            let b = tape.param(self.input_bias[g]);
            let p = tape.matmul_bt(xs, w)?;
            proj.push(tape.add_row(p, b)?);
        }
        let wh: Vec<Var> = self.hidden.iter().map(|&id| tape.param(id)).collect();
        let bh: Vec<Var> = self.hidden_bias.iter().map(|&id| tape.param(id)).collect();

        let mut h = tape.reshape(h0, &[1, self.hidden_dim])?;
        let mut states = Vec::with_capacity(s[0]);
        for t in 0..s[0] {
            let hidden_term = |tape: &mut Tape<'_, F>, g: usize| -> Result<Var> {
                let m = tape.matmul_bt(h, wh[g])?;
                tape.add_row(m, bh[g])
            };
            let hz = hidden_term(tape, 0)?;
            let hr = hidden_term(tape, 1)?;
            let hn = hidden_term(tape, 2)?;
            let xz = tape.slice_rows(proj[0], t, 1)?;
            let xr = tape.slice_rows(proj[1], t, 1)?;
            let xn = tape.slice_rows(proj[2], t, 1)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let rn = tape.mul(r, hn)?;
            let n = tape.add(xn, rn)?;
            let n = tape.tanh(n);
            // h + z * (n - h)
            let diff = tape.sub(n, h)?;
            let step = tape.mul(z, diff)?;
            h = tape.add(h, step)?;
            states.push(h);
        }
        tape.concat_rows(&states)
    }
}
