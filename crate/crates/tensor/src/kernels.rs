//! Convolution kernels built on im2col and a BLAS-style `dgemm`.

use crate::Tensor;

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths were checked above and the strides describe
    // dense row-major (or transposed) matrices within those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        // contiguous run with zero borders
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && (ix as usize) < g.in_w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && (ix as usize) < g.in_w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn geom_of(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (usize, ConvGeom) {
    let (n, in_c, in_h, in_w) = x.dims4();
    let (out_c, wc, kh, kw) = w.dims4();
    assert_eq!(wc, in_c, "conv2d: input has {} channels, kernel expects {}", in_c, wc);
    assert_eq!(kh, kw, "conv2d: only square kernels are supported");
    assert!(
        in_h + 2 * pad >= kh && in_w + 2 * pad >= kw,
        "conv2d: kernel larger than padded input"
    );
    (
        n,
        ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            k: kh,
            stride,
            pad,
        },
    )
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, g) = geom_of(x, w, stride, pad);
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let rows = g.col_rows();
    let mut out = Tensor::zeros(&[n, g.out_c, oh, ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ohw] };
    for s in 0..n {
        let xs = x.slab(s);
        let b: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[s * g.out_c * ohw..(s + 1) * g.out_c * ohw];
        gemm(g.out_c, rows, ohw, w.data(), false, b, false, 0.0, dst);
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[co * ohw..(co + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, kernel and bias.
/// Each requested gradient is accumulated into the provided buffer.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    grad_x: Option<&mut Tensor>,
    grad_w: Option<&mut Tensor>,
    grad_b: Option<&mut Tensor>,
) {
    let (n, g) = geom_of(x, w, stride, pad);
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let rows = g.col_rows();
    let out_c = g.out_c;
    assert_eq!(grad_out.shape(), &[n, out_c, oh, ow], "conv2d_backward: bad grad shape");

    if let Some(gb) = grad_b {
        let gbd = gb.data_mut();
        for s in 0..n {
            let go = grad_out.slab(s);
            for (co, acc) in gbd.iter_mut().enumerate() {
                *acc += go[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
            }
        }
    }

    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ohw] };
    if let Some(gw) = grad_w {
        for s in 0..n {
            let xs = x.slab(s);
            let b: &[f64] = if pointwise {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            // dW (out_c x rows) += dY (out_c x ohw) * cols^T (ohw x rows)
            gemm(out_c, ohw, rows, grad_out.slab(s), false, b, true, 1.0, gw.data_mut());
        }
    }

    if let Some(gx) = grad_x {
        let in_size = g.in_c * g.in_h * g.in_w;
        for s in 0..n {
            let go = grad_out.slab(s);
            let dst = &mut gx.data_mut()[s * in_size..(s + 1) * in_size];
            if pointwise {
                // dX (rows x ohw) += W^T (rows x out_c) * dY (out_c x ohw)
                gemm(rows, out_c, ohw, w.data(), true, go, false, 1.0, dst);
            } else {
                gemm(rows, out_c, ohw, w.data(), true, go, false, 0.0, &mut cols);
                col2im(&cols, &g, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for s in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let fast = conv2d_forward(&x, &w, None, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
