//! Raw slice kernels shared by the tape ops.
//!
//! Convolution and pooling forward passes accumulate in the same order as a
//! direct nested-loop evaluation, so they agree with naive references bit
//! for bit. Backward passes are free to use blocked GEMM.

use super::Scalar;

/// `c (+)= op(a) * op(b)` for row-major operands, where `op(a)` is `[m,k]`
/// and `op(b)` is `[k,n]`. With `trans_a` the buffer `a` holds `[k,m]`;
/// with `trans_b` the buffer `b` holds `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs extent");
    assert_eq!(b.len(), k * n, "gemm: rhs extent");
    assert_eq!(c.len(), m * n, "gemm: out extent");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    F::gemm(m, k, n, F::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Geometry of a 2-D convolution over one `[C_in, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix: `C_in * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn fits(&self) -> bool {
        self.stride >= 1 && self.height + 2 * self.pad >= self.kernel_h && self.width + 2 * self.pad >= self.kernel_w
    }
}

/// Unfolds one image into a `[patch_len, H'*W']` column matrix.
pub fn im2col<F: Scalar>(g: &ConvGeometry, image: &[F], cols: &mut [F]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && (iy as usize) < g.height && ix >= 0 && (ix as usize) < g.width
                        {
                            chan[iy as usize * g.width + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix back onto an image, summing overlapping patches.
pub fn col2im<F: Scalar>(g: &ConvGeometry, cols: &[F], image: &mut [F]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let dst = &mut chan[iy as usize * g.width + ix as usize];
                        *dst = *dst + src[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of one image. `out` is `[C_out, H', W']`; `cols` is
/// scratch of `patch_len * H' * W'`.
pub fn conv2d_image<F: Scalar>(
    g: &ConvGeometry,
    image: &[F],
    kernels: &[F],
    bias: Option<&[F]>,
    cols: &mut [F],
    out: &mut [F],
) {
    im2col(g, image, cols);
    let plane = g.out_height() * g.out_width();
    let plen = g.patch_len();
    for co in 0..g.out_channels {
        let w = &kernels[co * plen..(co + 1) * plen];
        let dst = &mut out[co * plane..(co + 1) * plane];
        for (p, d) in dst.iter_mut().enumerate() {
            // Sequential (ci, ky, kx) accumulation, matching a direct loop.
            let mut acc = F::zero();
            for (r, &wv) in w.iter().enumerate() {
                acc = acc + cols[r * plane + p] * wv;
            }
            *d = match bias {
                Some(b) => acc + b[co],
                None => acc,
            };
        }
    }
}

/// Windowed max over one `[C, H, W]` image. Records the flat input index of
/// the first maximum (row-major scan) for every output element.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_image<F: Scalar>(
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    image: &[F],
    out: &mut [F],
    argmax: &mut [usize],
) {
    let oh = (height - k) / stride + 1;
    let ow = (width - k) / stride + 1;
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * width + ox * stride;
                let mut best = image[best_idx];
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * width + ox * stride + kx;
                        if image[idx] > best {
                            best = image[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = c * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along one axis.
pub fn softmax_axis<F: Scalar>(shape: &[usize], axis: usize, x: &[F], out: &mut [F]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut total = F::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
}
