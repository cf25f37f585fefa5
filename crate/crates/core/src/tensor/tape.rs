use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name of a recorded operation; used in reports and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddRow,
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Scale,
    Softmax,
    LayerNorm,
    Conv2d,
    MaxPool2d,
    Reshape,
    Transpose,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    MaskFill,
    MulConst,
    Sum,
    BinaryCrossEntropy,
    NegLogLikelihood,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddRow => "add_row",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::MaskFill => "mask_fill",
            OpKind::MulConst => "mul_const",
            OpKind::Sum => "sum",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
            OpKind::NegLogLikelihood => "neg_log_likelihood",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

/// Every operation kind, in declaration order.
pub const ALL_OPS: [OpKind; 25] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::AddRow,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::Scale,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::Conv2d,
    OpKind::MaxPool2d,
    OpKind::Reshape,
    OpKind::Transpose,
    OpKind::SliceCols,
    OpKind::ConcatCols,
    OpKind::SliceRows,
    OpKind::ConcatRows,
    OpKind::MaskFill,
    OpKind::MulConst,
    OpKind::Sum,
    OpKind::BinaryCrossEntropy,
    OpKind::NegLogLikelihood,
];

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

enum Op<F: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddRow { x: Var, bias: Var },
    Binary { kind: Binary, a: Var, b: Var, broadcast: bool },
    Unary { kind: Unary, x: Var },
    Scale { x: Var, c: F },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, offset: Var, xhat: Vec<F>, rstd: Vec<F> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, batch: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Transpose { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    MaskFill { x: Var, mask: Vec<bool> },
    MulConst { x: Var, factor: Vec<F> },
    Sum { x: Var },
    Bce { p: Var, targets: Vec<F>, weights: Vec<F>, eps: F },
    Nll { dist: Var, labels: Vec<usize>, weights: Vec<F>, eps: F },
}

impl<F: Scalar> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Binary { kind: Binary::Add, .. } => OpKind::Add,
            Op::Binary { kind: Binary::Sub, .. } => OpKind::Sub,
            Op::Binary { kind: Binary::Mul, .. } => OpKind::Mul,
            Op::Unary { kind: Unary::Relu, .. } => OpKind::Relu,
            Op::Unary { kind: Unary::Sigmoid, .. } => OpKind::Sigmoid,
            Op::Unary { kind: Unary::Tanh, .. } => OpKind::Tanh,
            Op::Scale { .. } => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool2d,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::MaskFill { .. } => OpKind::MaskFill,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::Sum { .. } => OpKind::Sum,
            Op::Bce { .. } => OpKind::BinaryCrossEntropy,
            Op::Nll { .. } => OpKind::NegLogLikelihood,
        }
    }
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation and replays it in reverse.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied; frozen
/// parameters enter the tape as constants. Leaf gradients accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
pub struct Tape<'p, F: Scalar = f32> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<'p, F>>,
    leaf_grads: Vec<Option<Tensor<F>>>,
    pass_grads: Vec<Option<Tensor<F>>>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl<'p, F: Scalar> Default for Tape<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            pass_grads: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_params(store: &'p ParamStore<F>) -> Self {
        Tape { store: Some(store), ..Self::new() }
    }

    /// Scales the backward rule of `kind` by 1.5. Test fixture for checking
    /// that the gradient checker notices a broken rule.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'p, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape was created without a parameter store");
        let p = store.get(id);
        let v = self.push_cow(Cow::Borrowed(&p.value), Op::Leaf, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`; the layout of `nn.Linear` weights.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("expected rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            let rhs = if trans_b { format!("{sb:?}^T") } else { format!("{sb:?}") };
            return Err(Error::dim("matmul", format!("inner extents differ: {sa:?} x {rhs}")));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Adds a `[n]` vector to every trailing row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} does not match trailing extent of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(vec![c, r], out)?, Op::Transpose { x }, rg))
    }

    // ---- element-wise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sa.len() == sb.len()
            && !sa.is_empty()
            && sb.last() == Some(&1)
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
        {
            true
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(name, format!("cannot broadcast {sb:?} onto {sa:?}")));
        };
        let w = self.value(a).last_dim();
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let bv = if broadcast { bd[i / w] } else { bd[i] };
            *o = match kind {
                Binary::Add => *o + bv,
                Binary::Sub => *o - bv,
                Binary::Mul => *o * bv,
            };
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary { kind, a, b, broadcast }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out = self.value(x).map(|v| match kind {
            Unary::Relu => v.max(F::zero()),
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary { kind, x }, rg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Multiplies by a fixed tensor of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<F>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", format!("factor of {} for {:?}", factor.len(), self.shape(x))));
        }
        let mut out = self.value(x).clone();
        for (o, &f) in out.data_mut().iter_mut().zip(&factor) {
            *o = *o * f;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst { x, factor }, rg))
    }

    /// Sets positions where `mask` is true to negative infinity.
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("mask_fill", format!("mask of {} for {:?}", mask.len(), self.shape(x))));
        }
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            if m {
                *o = F::neg_infinity();
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskFill { x, mask }, rg))
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut out = vec![F::zero(); self.value(x).len()];
        kernels::softmax_axis(&shape, axis, self.value(x).data(), &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalisation over the trailing axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: F) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(offset) != [d] {
            return Err(Error::dim(
                "layernorm",
                format!("gain {:?} / offset {:?} vs input {:?}", self.shape(gain), self.shape(offset), self.shape(x)),
            ));
        }
        let xs = self.value(x).data();
        let (g, o) = (self.value(gain).data(), self.value(offset).data());
        let dn = F::from_usize(d).unwrap();
        let rows = xs.len() / d;
        let mut out = vec![F::zero(); xs.len()];
        let mut xhat = vec![F::zero(); xs.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + o[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, offset]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::LayerNorm { x, gain, offset, xhat, rstd }, rg))
    }

    // ---- spatial --------------------------------------------------------

    /// Cross-correlation of `[C,H,W]` or `[N,C,H,W]` input with
    /// `[C_out,C_in,kh,kw]` kernels and an optional `[C_out]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c, h, wd, batched) = match *xs.as_slice() {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(Error::dim("conv2d", format!("input must be [C,H,W] or [N,C,H,W], got {xs:?}"))),
        };
        if ws.len() != 4 || ws[1] != c {
            return Err(Error::dim("conv2d", format!("kernels {ws:?} incompatible with input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {} output channels", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            out_channels: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        if stride == 0 || !geom.fits() {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {}x{} stride {stride} does not fit padded input {h}x{wd} (pad {pad})", ws[2], ws[3]),
            ));
        }
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let out_img = geom.out_channels * oh * ow;
        let mut out = vec![F::zero(); batch * out_img];
        let mut cols = vec![F::zero(); geom.patch_len() * oh * ow];
        let in_img = c * h * wd;
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let bdat = b.map(|b| self.value(b).data());
            for n in 0..batch {
                kernels::conv2d_image(
                    &geom,
                    &xd[n * in_img..(n + 1) * in_img],
                    wdat,
                    bdat,
                    &mut cols,
                    &mut out[n * out_img..(n + 1) * out_img],
                );
            }
        }
        let shape = if batched { vec![batch, geom.out_channels, oh, ow] } else { vec![geom.out_channels, oh, ow] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    /// Max pooling over `[C,H,W]` or `[N,C,H,W]` with a square window.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (lead, c, h, w) = match *xs.as_slice() {
            [c, h, w] => (vec![], c, h, w),
            [n, c, h, w] => (vec![n], c, h, w),
            _ => return Err(Error::dim("maxpool2d", format!("input must be [C,H,W] or [N,C,H,W], got {xs:?}"))),
        };
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(Error::dim("maxpool2d", format!("window {k} stride {stride} does not fit {h}x{w}")));
        }
        let batch = lead.first().copied().unwrap_or(1);
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let (in_img, out_img) = (c * h * w, c * oh * ow);
        let mut out = vec![F::zero(); batch * out_img];
        let mut argmax = vec![0usize; batch * out_img];
        let xd = self.value(x).data();
        for n in 0..batch {
            kernels::maxpool_image(
                c,
                h,
                w,
                k,
                stride,
                &xd[n * in_img..(n + 1) * in_img],
                &mut out[n * out_img..(n + 1) * out_img],
                &mut argmax[n * out_img..(n + 1) * out_img],
            );
            for a in &mut argmax[n * out_img..(n + 1) * out_img] {
                *a += n * in_img;
            }
        }
        let mut shape = lead;
        shape.extend([c, oh, ow]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MaxPool { x, argmax }, rg))
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of {s:?}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&src[r * s[1] + start..r * s[1] + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(vec![s[0], len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[0],
            _ => return Err(Error::dim("concat_cols", "need at least one rank-2 part")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", format!("part {s:?} has wrong row count (want {rows})")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec(vec![rows, total], out)?, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {s:?}", start + len)));
        }
        let stride: usize = s[1..].iter().product();
        let out = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::SliceRows { x, start }, rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat_rows", format!("part {s:?} does not match trailing {tail:?}")));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    /// `sum_i w_i * -(r_i ln p_i + (1 - r_i) ln(1 - p_i))` with `p` clamped
    /// to `[eps, 1 - eps]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: Vec<F>, weights: Vec<F>, eps: F) -> Result<Var> {
        let n = self.value(p).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("{} probabilities, {} targets, {} weights", n, targets.len(), weights.len()),
            ));
        }
        let pd = self.value(p).data();
        if pd.iter().chain(&targets).chain(&weights).any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in binary cross-entropy inputs".into()));
        }
        let mut total = F::zero();
        for i in 0..n {
            let q = clamp(pd[i], eps);
            let r = targets[i];
            total = total - weights[i] * (r * q.ln() + (F::one() - r) * (F::one() - q).ln());
        }
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(total), Op::Bce { p, targets, weights, eps }, rg))
    }

    /// `sum_t w_t * -ln dist[t, label_t]` over a `[T, A]` distribution,
    /// probabilities clamped to `[eps, 1 - eps]`.
    pub fn neg_log_likelihood(&mut self, dist: Var, labels: Vec<usize>, weights: Vec<F>, eps: F) -> Result<Var> {
        let s = self.shape(dist).to_vec();
        if s.len() != 2 || labels.len() != s[0] || weights.len() != s[0] {
            return Err(Error::dim(
                "neg_log_likelihood",
                format!("distribution {s:?}, {} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Data(format!("action id {bad} outside vocabulary of {}", s[1])));
        }
        let d = self.value(dist).data();
        if d.iter().chain(&weights).any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in cross-entropy inputs".into()));
        }
        let mut total = F::zero();
        for (t, &l) in labels.iter().enumerate() {
            total = total - weights[t] * clamp(d[t * s[1] + l], eps).ln();
        }
        let rg = self.rg(&[dist]);
        Ok(self.push(Tensor::scalar(total), Op::Nll { dist, labels, weights, eps }, rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = self.node_backward(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                let k = F::from_f64_lossy(1.5);
                for (_, t) in &mut contribs {
                    *t = t.map(|v| v * k);
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[i].op, g) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        self.pass_grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass (accumulated, for leaves).
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        if matches!(self.nodes[v.0].op, Op::Leaf) {
            self.leaf_grads[v.0].as_ref()
        } else {
            self.pass_grads.get(v.0).and_then(|g| g.as_ref())
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
        self.pass_grads.clear();
    }

    /// Accumulated gradients of every trainable parameter touched.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<F>)> {
        let mut out: Vec<_> =
            self.param_vars.iter().filter_map(|(&id, v)| self.leaf_grads[v.0].as_ref().map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn node_backward(&self, i: usize, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = out.shape()[1];
                let mut res = Vec::new();
                if self.requires_grad(*a) {
                    // dA = dC * op(B)^T
                    let mut da = vec![F::zero(); m * k];
                    kernels::gemm(m, n, k, gd, false, self.value(*b).data(), !trans_b, &mut da, false);
                    res.push((*a, Tensor::from_vec(sa.to_vec(), da).unwrap()));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![F::zero(); k * n];
                    if *trans_b {
                        // B is [n,k]: dB = dC^T * A
                        kernels::gemm(n, m, k, gd, true, self.value(*a).data(), false, &mut db, false);
                    } else {
                        kernels::gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                    }
                    res.push((*b, Tensor::from_vec(sb.to_vec(), db).unwrap()));
                }
                res
            }
            Op::AddRow { x, bias } => {
                let n = self.value(*bias).len();
                let mut db = vec![F::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![(*x, g.clone()), (*bias, Tensor::from_vec(vec![n], db).unwrap())]
            }
            Op::Binary { kind, a, b, broadcast } => {
                let w = out.last_dim();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let bidx = |i: usize| if *broadcast { i / w } else { i };
                let mut ga = g.clone();
                let mut gb = vec![F::zero(); bd.len()];
                for (i, gv) in ga.data_mut().iter_mut().enumerate() {
                    let up = *gv;
                    let j = bidx(i);
                    match kind {
                        Binary::Add => gb[j] = gb[j] + up,
                        Binary::Sub => gb[j] = gb[j] - up,
                        Binary::Mul => {
                            *gv = up * bd[j];
                            gb[j] = gb[j] + up * ad[i];
                        }
                    }
                }
                let gb = Tensor::from_vec(self.shape(*b).to_vec(), gb).unwrap();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                let od = out.data();
                let data = (0..gd.len())
                    .map(|i| match kind {
                        Unary::Relu => {
                            if xd[i] > F::zero() {
                                gd[i]
                            } else {
                                F::zero()
                            }
                        }
                        Unary::Sigmoid => gd[i] * od[i] * (F::one() - od[i]),
                        Unary::Tanh => gd[i] * (F::one() - od[i] * od[i]),
                    })
                    .collect();
                vec![(*x, Tensor::from_vec(out.shape().to_vec(), data).unwrap())]
            }
            Op::Scale { x, c } => vec![(*x, g.map(|v| v * *c))],
            Op::MulConst { x, factor } => {
                let data = gd.iter().zip(factor).map(|(&a, &b)| a * b).collect();
                vec![(*x, Tensor::from_vec(out.shape().to_vec(), data).unwrap())]
            }
            Op::MaskFill { x, mask } => {
                let data = gd.iter().zip(mask).map(|(&v, &m)| if m { F::zero() } else { v }).collect();
                vec![(*x, Tensor::from_vec(out.shape().to_vec(), data).unwrap())]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: F = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::from_vec(out.shape().to_vec(), dx).unwrap())]
            }
            Op::LayerNorm { x, gain, offset, xhat, rstd } => {
                let d = out.last_dim();
                let dn = F::from_usize(d).unwrap();
                let gn = self.value(*gain).data();
                let mut dx = vec![F::zero(); gd.len()];
                let mut dg = vec![F::zero(); d];
                let mut doff = vec![F::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = F::zero();
                    let mut sum_dh_h = F::zero();
                    for j in 0..d {
                        let dh = gr[j] * gn[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                        dg[j] = dg[j] + gr[j] * hr[j];
                        doff[j] = doff[j] + gr[j];
                    }
                    let (mean_dh, mean_dh_h) = (sum_dh / dn, sum_dh_h / dn);
                    for j in 0..d {
                        let dh = gr[j] * gn[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::from_vec(out.shape().to_vec(), dx).unwrap()),
                    (*gain, Tensor::from_vec(vec![d], dg).unwrap()),
                    (*offset, Tensor::from_vec(vec![d], doff).unwrap()),
                ]
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let plane = geom.out_height() * geom.out_width();
                let plen = geom.patch_len();
                let in_img = geom.in_channels * geom.height * geom.width;
                let out_img = geom.out_channels * plane;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let need_x = self.requires_grad(*x);
                let mut dx = vec![F::zero(); if need_x { xd.len() } else { 0 }];
                let mut dw = vec![F::zero(); wd.len()];
                let mut cols = vec![F::zero(); plen * plane];
                let mut dcols = vec![F::zero(); plen * plane];
                for n in 0..*batch {
                    let go = &gd[n * out_img..(n + 1) * out_img];
                    kernels::im2col(geom, &xd[n * in_img..(n + 1) * in_img], &mut cols);
                    // dW[co, p] += sum_s dY[co, s] * cols[p, s]
                    kernels::gemm(geom.out_channels, plane, plen, go, false, &cols, true, &mut dw, true);
                    if need_x {
                        kernels::gemm(plen, geom.out_channels, plane, wd, true, go, false, &mut dcols, false);
                        kernels::col2im(geom, &dcols, &mut dx[n * in_img..(n + 1) * in_img]);
                    }
                }
                let mut res = vec![(*w, Tensor::from_vec(self.shape(*w).to_vec(), dw).unwrap())];
                if need_x {
                    res.push((*x, Tensor::from_vec(self.shape(*x).to_vec(), dx).unwrap()));
                }
                if let Some(b) = b {
                    let mut db = vec![F::zero(); geom.out_channels];
                    for n in 0..*batch {
                        for (co, d) in db.iter_mut().enumerate() {
                            let s = n * out_img + co * plane;
                            *d = *d + gd[s..s + plane].iter().copied().sum::<F>();
                        }
                    }
                    res.push((*b, Tensor::from_vec(vec![geom.out_channels], db).unwrap()));
                }
                res
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] = dx[src] + gd[o];
                }
                vec![(*x, Tensor::from_vec(self.shape(*x).to_vec(), dx).unwrap())]
            }
            Op::Reshape { x } => vec![(*x, g.reshape(self.shape(*x)).unwrap())],
            Op::Transpose { x } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = gd[i * c + j];
                    }
                }
                vec![(*x, Tensor::from_vec(vec![c, r], dx).unwrap())]
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let len = out.shape()[1];
                let mut dx = vec![F::zero(); s[0] * s[1]];
                for r in 0..s[0] {
                    dx[r * s[1] + start..r * s[1] + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                vec![(*x, Tensor::from_vec(s.to_vec(), dx).unwrap())]
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = self.shape(p)[1];
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        (p, Tensor::from_vec(vec![rows, w], d).unwrap())
                    })
                    .collect()
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let stride: usize = s[1..].iter().product();
                let mut dx = vec![F::zero(); self.value(*x).len()];
                dx[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                vec![(*x, Tensor::from_vec(s.to_vec(), dx).unwrap())]
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let d = gd[offset..offset + n].to_vec();
                        offset += n;
                        (p, Tensor::from_vec(self.shape(p).to_vec(), d).unwrap())
                    })
                    .collect()
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Bce { p, targets, weights, eps } => {
                let pd = self.value(*p).data();
                let data = (0..pd.len())
                    .map(|i| {
                        let q = pd[i];
                        if q < *eps || q > F::one() - *eps {
                            F::zero()
                        } else {
                            let r = targets[i];
                            gd[0] * weights[i] * ((F::one() - r) / (F::one() - q) - r / q)
                        }
                    })
                    .collect();
                vec![(*p, Tensor::from_vec(self.shape(*p).to_vec(), data).unwrap())]
            }
            Op::Nll { dist, labels, weights, eps } => {
                let s = self.shape(*dist);
                let d = self.value(*dist).data();
                let mut dd = vec![F::zero(); d.len()];
                for (t, &l) in labels.iter().enumerate() {
                    let q = d[t * s[1] + l];
                    if q >= *eps && q <= F::one() - *eps {
                        dd[t * s[1] + l] = -gd[0] * weights[t] / q;
                    }
                }
                vec![(*dist, Tensor::from_vec(s.to_vec(), dd).unwrap())]
            }
        }
    }
}

pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn clamp<F: Scalar>(p: F, eps: F) -> F {
    p.max(eps).min(F::one() - eps)
}
