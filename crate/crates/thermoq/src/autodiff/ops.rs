//! Forward and backward kernels for the structured tensor ops.
//!
//! Convolution goes through im2col and a GEMM so the hot loop runs inside
//! `matrixmultiply`; everything else is direct loops, which is plenty at the
//! map sizes this crate trains on.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView4, Axis};

use super::{FlipKind, Scalar, Tensor4};

/// Lay out every k×k patch of `x` (zero-padded to keep spatial size) as a
/// column: result is (C_in·k·k, H·W) for one batch element.
fn im2col<S: Scalar>(x: &ArrayView4<'_, S>, b: usize, k: usize, col: &mut Array2<S>) {
    let (_, c_in, h, w) = x.dim();
    let pad = k / 2;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for y in 0..h {
                    let sy = y + ky;
                    let in_y = sy >= pad && sy - pad < h;
                    for xcol in 0..w {
                        let sx = xcol + kx;
                        let v = if in_y && sx >= pad && sx - pad < w {
                            x[[b, ci, sy - pad, sx - pad]]
                        } else {
                            S::zero()
                        };
                        col[[row, y * w + xcol]] = v;
                    }
                }
            }
        }
    }
}

/// Scatter-add of columns back to image space: adjoint of [`im2col`].
fn col2im<S: Scalar>(col: &Array2<S>, k: usize, dx: &mut Tensor4<S>, b: usize) {
    let (_, c_in, h, w) = dx.dim();
    let pad = k / 2;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for y in 0..h {
                    let sy = y + ky;
                    if !(sy >= pad && sy - pad < h) {
                        continue;
                    }
                    for xcol in 0..w {
                        let sx = xcol + kx;
                        if sx >= pad && sx - pad < w {
                            dx[[b, ci, sy - pad, sx - pad]] =
                                dx[[b, ci, sy - pad, sx - pad]] + col[[row, y * w + xcol]];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward<S: Scalar>(x: &Tensor4<S>, kernel: &Tensor4<S>) -> Tensor4<S> {
    let (bsz, c_in, h, w) = x.dim();
    let (c_out, kc_in, k, k2) = kernel.dim();
    assert_eq!(c_in, kc_in, "conv2d: kernel input channels mismatch");
    assert_eq!(k, k2, "conv2d: kernel must be square");
    assert_eq!(k % 2, 1, "conv2d: kernel size must be odd for same padding");

    let kmat = kernel.to_shape((c_out, c_in * k * k)).expect("kernel is contiguous");
    let mut col = Array2::zeros((c_in * k * k, h * w));
    let mut out_mat = Array2::zeros((c_out, h * w));
    let mut out = Tensor4::zeros((bsz, c_out, h, w));
    for b in 0..bsz {
        im2col(&x.view(), b, k, &mut col);
        general_mat_mul(S::one(), &kmat, &col, S::zero(), &mut out_mat);
        out.index_axis_mut(Axis(0), b)
            .assign(&out_mat.to_shape((c_out, h, w)).expect("contiguous"));
    }
    out
}

pub(super) fn conv2d_backward<S: Scalar>(
    x: ArrayView4<'_, S>,
    kernel: ArrayView4<'_, S>,
    dout: ArrayView4<'_, S>,
) -> (Tensor4<S>, Tensor4<S>) {
    let (bsz, c_in, h, w) = x.dim();
    let (c_out, _, k, _) = kernel.dim();
    let kmat = kernel.to_shape((c_out, c_in * k * k)).expect("contiguous");

    let mut dx = Tensor4::zeros((bsz, c_in, h, w));
    let mut dkmat = Array2::zeros((c_out, c_in * k * k));
    let mut col = Array2::zeros((c_in * k * k, h * w));
    let mut dcol = Array2::zeros((c_in * k * k, h * w));
    for b in 0..bsz {
        let dout_mat = dout
            .index_axis(Axis(0), b)
            .to_shape((c_out, h * w))
            .expect("contiguous")
            .into_owned();
        im2col(&x, b, k, &mut col);
        // dK += dOut · colᵀ ; dCol = Kᵀ · dOut
        general_mat_mul(S::one(), &dout_mat, &col.t(), S::one(), &mut dkmat);
        general_mat_mul(S::one(), &kmat.t(), &dout_mat, S::zero(), &mut dcol);
        col2im(&dcol, k, &mut dx, b);
    }
    let dkernel = dkmat
        .to_shape((c_out, c_in, k, k))
        .expect("contiguous")
        .into_owned();
    (dx, dkernel)
}

pub(super) fn maxpool_forward<S: Scalar>(x: &Tensor4<S>) -> (Tensor4<S>, Vec<u8>) {
    let (bsz, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x2 requires even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros((bsz, c, oh, ow));
    let mut argmax = vec![0u8; bsz * c * oh * ow];
    let mut flat = 0usize;
    for b in 0..bsz {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x[[b, ci, 2 * oy, 2 * ox]];
                    let mut best_idx = 0u8;
                    for (idx, (dy, dx_)) in
                        [(0usize, 1usize), (1, 0), (1, 1)].into_iter().enumerate()
                    {
                        let v = x[[b, ci, 2 * oy + dy, 2 * ox + dx_]];
                        if v > best {
                            best = v;
                            best_idx = idx as u8 + 1;
                        }
                    }
                    out[[b, ci, oy, ox]] = best;
                    argmax[flat] = best_idx;
                    flat += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub(super) fn maxpool_backward<S: Scalar>(
    in_dim: (usize, usize, usize, usize),
    argmax: &[u8],
    dout: ArrayView4<'_, S>,
) -> Tensor4<S> {
    let (bsz, c, _, _) = in_dim;
    let (_, _, oh, ow) = dout.dim();
    let mut dx = Tensor4::zeros(in_dim);
    let offsets = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)];
    let mut flat = 0usize;
    for b in 0..bsz {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (dy, dx_) = offsets[argmax[flat] as usize];
                    dx[[b, ci, 2 * oy + dy, 2 * ox + dx_]] = dout[[b, ci, oy, ox]];
                    flat += 1;
                }
            }
        }
    }
    dx
}

pub(super) fn upsample_forward<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let (bsz, c, h, w) = x.dim();
    let mut out = Tensor4::zeros((bsz, c, 2 * h, 2 * w));
    for b in 0..bsz {
        for ci in 0..c {
            for y in 0..2 * h {
                for xcol in 0..2 * w {
                    out[[b, ci, y, xcol]] = x[[b, ci, y / 2, xcol / 2]];
                }
            }
        }
    }
    out
}

pub(super) fn upsample_backward<S: Scalar>(dout: ArrayView4<'_, S>) -> Tensor4<S> {
    let (bsz, c, h2, w2) = dout.dim();
    let mut dx = Tensor4::zeros((bsz, c, h2 / 2, w2 / 2));
    for b in 0..bsz {
        for ci in 0..c {
            for y in 0..h2 {
                for xcol in 0..w2 {
                    dx[[b, ci, y / 2, xcol / 2]] =
                        dx[[b, ci, y / 2, xcol / 2]] + dout[[b, ci, y, xcol]];
                }
            }
        }
    }
    dx
}

pub(super) fn conv_transpose_forward<S: Scalar>(x: &Tensor4<S>, kernel: &Tensor4<S>) -> Tensor4<S> {
    let (bsz, c_in, h, w) = x.dim();
    let (kc_in, c_out, kh, kw) = kernel.dim();
    assert_eq!(c_in, kc_in, "conv_transpose: kernel input channels mismatch");
    assert_eq!((kh, kw), (2, 2), "conv_transpose kernel must be 2x2");
    let mut out = Tensor4::zeros((bsz, c_out, 2 * h, 2 * w));
    for b in 0..bsz {
        for co in 0..c_out {
            for ci in 0..c_in {
                for y in 0..h {
                    for xcol in 0..w {
                        let v = x[[b, ci, y, xcol]];
                        for ky in 0..2 {
                            for kx in 0..2 {
                                out[[b, co, 2 * y + ky, 2 * xcol + kx]] = out
                                    [[b, co, 2 * y + ky, 2 * xcol + kx]]
                                    + v * kernel[[ci, co, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv_transpose_backward<S: Scalar>(
    x: ArrayView4<'_, S>,
    kernel: ArrayView4<'_, S>,
    dout: ArrayView4<'_, S>,
) -> (Tensor4<S>, Tensor4<S>) {
    let (bsz, c_in, h, w) = x.dim();
    let (_, c_out, _, _) = kernel.dim();
    let mut dx = Tensor4::zeros((bsz, c_in, h, w));
    let mut dker = Tensor4::zeros(kernel.raw_dim());
    for b in 0..bsz {
        for co in 0..c_out {
            for ci in 0..c_in {
                for y in 0..h {
                    for xcol in 0..w {
                        let xv = x[[b, ci, y, xcol]];
                        let mut acc = S::zero();
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let g = dout[[b, co, 2 * y + ky, 2 * xcol + kx]];
                                acc = acc + g * kernel[[ci, co, ky, kx]];
                                dker[[ci, co, ky, kx]] = dker[[ci, co, ky, kx]] + g * xv;
                            }
                        }
                        dx[[b, ci, y, xcol]] = dx[[b, ci, y, xcol]] + acc;
                    }
                }
            }
        }
    }
    (dx, dker)
}

pub(super) fn diag_flip_forward<S: Scalar>(x: &Tensor4<S>, kind: FlipKind) -> Tensor4<S> {
    let (bsz, c, h, w) = x.dim();
    assert_eq!(h, w, "diagonal flip requires square spatial maps");
    let mut out = Tensor4::zeros((bsz, c, w, h));
    for b in 0..bsz {
        for ci in 0..c {
            for y in 0..h {
                for xcol in 0..w {
                    let v = x[[b, ci, y, xcol]];
                    match kind {
                        FlipKind::Transpose => out[[b, ci, xcol, y]] = v,
                        FlipKind::AntiTranspose => out[[b, ci, w - 1 - xcol, h - 1 - y]] = v,
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub(super) fn batch_norm_forward<S: Scalar>(
    x: &Tensor4<S>,
    gamma: &Tensor4<S>,
    beta: &Tensor4<S>,
    eps: f64,
) -> (Tensor4<S>, Tensor4<S>, Vec<S>) {
    let (bsz, c, h, w) = x.dim();
    assert_eq!(gamma.dim(), (1, c, 1, 1), "gamma must be (1,C,1,1)");
    assert_eq!(beta.dim(), (1, c, 1, 1), "beta must be (1,C,1,1)");
    let n = S::from_f64((bsz * h * w) as f64);
    let mut xhat = Tensor4::zeros(x.raw_dim());
    let mut inv_std = Vec::with_capacity(c);
    let mut out = Tensor4::zeros(x.raw_dim());
    for ci in 0..c {
        let mut mean = S::zero();
        for b in 0..bsz {
            for y in 0..h {
                for xcol in 0..w {
                    mean = mean + x[[b, ci, y, xcol]];
                }
            }
        }
        mean = mean / n;
        let mut var = S::zero();
        for b in 0..bsz {
            for y in 0..h {
                for xcol in 0..w {
                    let d = x[[b, ci, y, xcol]] - mean;
                    var = var + d * d;
                }
            }
        }
        var = var / n;
        let istd = S::one() / (var + S::from_f64(eps)).sqrt();
        inv_std.push(istd);
        let g = gamma[[0, ci, 0, 0]];
        let be = beta[[0, ci, 0, 0]];
        for b in 0..bsz {
            for y in 0..h {
                for xcol in 0..w {
                    let xh = (x[[b, ci, y, xcol]] - mean) * istd;
                    xhat[[b, ci, y, xcol]] = xh;
                    out[[b, ci, y, xcol]] = g * xh + be;
                }
            }
        }
    }
    (out, xhat, inv_std)
}

pub(super) fn batch_norm_backward<S: Scalar>(
    gamma: ArrayView4<'_, S>,
    xhat: &Tensor4<S>,
    inv_std: &[S],
    dout: ArrayView4<'_, S>,
) -> (Tensor4<S>, Tensor4<S>, Tensor4<S>) {
    let (bsz, c, h, w) = xhat.dim();
    let n = S::from_f64((bsz * h * w) as f64);
    let mut dx = Tensor4::zeros(xhat.raw_dim());
    let mut dgamma = Tensor4::zeros((1, c, 1, 1));
    let mut dbeta = Tensor4::zeros((1, c, 1, 1));
    for ci in 0..c {
        let mut sum_dy = S::zero();
        let mut sum_dy_xhat = S::zero();
        for b in 0..bsz {
            for y in 0..h {
                for xcol in 0..w {
                    let dy = dout[[b, ci, y, xcol]];
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = sum_dy_xhat + dy * xhat[[b, ci, y, xcol]];
                }
            }
        }
        dbeta[[0, ci, 0, 0]] = sum_dy;
        dgamma[[0, ci, 0, 0]] = sum_dy_xhat;
        let g = gamma[[0, ci, 0, 0]];
        let istd = inv_std[ci];
        for b in 0..bsz {
            for y in 0..h {
                for xcol in 0..w {
                    let dy = dout[[b, ci, y, xcol]];
                    let xh = xhat[[b, ci, y, xcol]];
                    dx[[b, ci, y, xcol]] =
                        g * istd * (dy - (sum_dy + xh * sum_dy_xhat) / n);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
