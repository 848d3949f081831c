//! 2-D convolution via per-image im2col and GEMM.

use crate::float::matmul_into;
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.cols_rows() * self.ho * self.wo
    }

    /// Pointwise conv with no resampling needs no column buffer.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    // ox * s + kx >= p
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // ox * s + kx - p <= w - 1
    let hi = if g.w + p > kx {
        ((g.w + p - kx - 1) / s + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<F: Float>(g: &ConvGeom, img: &[F], cols: &mut [F]) {
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(F::zero());
                    line[hi..].fill(F::zero());
                    if lo < hi {
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, d) in line[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(g: &ConvGeom, cols: &[F], img: &mut [F]) {
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    for (j, &v) in s.iter().enumerate() {
                        let d = &mut line[ix0 + j * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

impl<F: Float> Tensor<F> {
    /// Cross-correlation of NCHW input with `(O, C, k, k)` weights, zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<F> {
        assert_eq!(
            self.rank(),
            4,
            "conv2d input must be NCHW, got {:?}",
            self.shape()
        );
        assert_eq!(weight.rank(), 4, "conv2d weight must be OCkk");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (o, wc, k, k2) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(wc, c, "conv2d channel mismatch: input {c}, weight {wc}");
        assert_eq!(k, k2, "conv2d needs square kernels");
        assert!(
            stride >= 1 && h + 2 * pad >= k && w + 2 * pad >= k,
            "conv2d geometry"
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let g = ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (in_len, out_len) = (c * h * w, o * ho * wo);
        let ckk = g.cols_rows();

        let mut out = vec![F::zero(); n * out_len];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![F::zero(); g.cols_len()]
        };
        for i in 0..n {
            let img = &self.data()[i * in_len..(i + 1) * in_len];
            let b: &[F] = if g.is_pointwise() {
                img
            } else {
                im2col(&g, img, &mut cols);
                &cols
            };
            matmul_into(
                false,
                false,
                o,
                ckk,
                ho * wo,
                weight.data(),
                b,
                F::zero(),
                &mut out[i * out_len..(i + 1) * out_len],
            );
        }
        let mut result_parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            assert_eq!(bias.numel(), o, "conv2d bias length");
            let bd = bias.data();
            for img in out.chunks_mut(out_len) {
                for (ch, plane) in img.chunks_mut(ho * wo).enumerate() {
                    let bv = bd[ch];
                    for v in plane.iter_mut() {
                        *v = *v + bv;
                    }
                }
            }
            result_parents.push(bias.clone());
        }

        let (x, wt) = (self.clone(), weight.clone());
        let (nx, nw) = (self.requires_grad(), weight.requires_grad());
        let nb = bias.is_some_and(|b| b.requires_grad());
        let has_bias = bias.is_some();
        let w_len = weight.numel();
        Tensor::from_op(vec![n, o, ho, wo], out, result_parents, move |grad, _| {
            let mut gx = nx.then(|| vec![F::zero(); n * in_len]);
            let mut gw = nw.then(|| vec![F::zero(); w_len]);
            let mut cols = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![F::zero(); g.cols_len()]
            };
            let mut dcols = if g.is_pointwise() || !nx {
                Vec::new()
            } else {
                vec![F::zero(); g.cols_len()]
            };
            for i in 0..n {
                let gout = &grad[i * out_len..(i + 1) * out_len];
                if let Some(gw) = gw.as_mut() {
                    let img = &x.data()[i * in_len..(i + 1) * in_len];
                    let b: &[F] = if g.is_pointwise() {
                        img
                    } else {
                        im2col(&g, img, &mut cols);
                        &cols
                    };
                    // dW += gout (o x hw) * cols^T (hw x ckk)
                    matmul_into(false, true, o, ho * wo, ckk, gout, b, F::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[i * in_len..(i + 1) * in_len];
                    if g.is_pointwise() {
                        matmul_into(true, false, ckk, o, ho * wo, wt.data(), gout, F::one(), dst);
                    } else {
                        matmul_into(
                            true,
                            false,
                            ckk,
                            o,
                            ho * wo,
                            wt.data(),
                            gout,
                            F::zero(),
                            &mut dcols,
                        );
                        col2im(&g, &dcols, dst);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(nb.then(|| {
                    let mut gb = vec![F::zero(); o];
                    for img in grad.chunks(out_len) {
                        for (ch, plane) in img.chunks(ho * wo).enumerate() {
                            gb[ch] = gb[ch] + plane.iter().copied().sum::<F>();
                        }
                    }
                    gb
                }));
            }
            res
        })
    }
}
