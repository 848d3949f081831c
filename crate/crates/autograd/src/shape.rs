//! Layout ops: permutation, slicing, concatenation and 2x resampling.

use crate::{Float, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with shape `shape`) into a new buffer laid out as `shape` permuted by `axes`.
fn permute_data<F: Float>(src: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the source for each output axis
    let src_step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_step = src_step[last];
    loop {
        for j in 0..inner {
            out.push(src[offset + j * inner_step]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<F: Float> Tensor<F> {
    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Tensor<F> {
        let rank = self.rank();
        assert_eq!(axes.len(), rank, "permute: need one entry per axis");
        let mut seen = vec![false; rank];
        for &a in axes {
            assert!(a < rank && !seen[a], "permute: invalid axes {axes:?}");
            seen[a] = true;
        }
        let shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.data(), &shape, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_c = out_shape.clone();
        Tensor::from_op(out_shape, data, vec![self.clone()], move |g, _| {
            vec![Some(permute_data(g, &out_shape_c, &inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Tensor<F> {
        let r = self.rank();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<F> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let n_in = self.numel();
        Tensor::from_op(out_shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![F::zero(); n_in];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn cat(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "cat: rank mismatch");
            for (i, (&a, &b)) in p.shape().iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "cat: dim {i} mismatch");
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Tensor::from_op(out_shape, data, parts.to_vec(), move |g, _| {
            let mut grads: Vec<Option<Vec<F>>> = needs
                .iter()
                .zip(&lens)
                .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        })
    }

    /// Nearest-neighbour 2x upsampling of an `(N, C, H, W)` tensor.
    pub fn upsample2x(&self) -> Tensor<F> {
        assert_eq!(self.rank(), 4, "upsample2x expects NCHW");
        let (nc, h, w) = (self.dim(0) * self.dim(1), self.dim(2), self.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.data();
        let mut data = vec![F::zero(); nc * h2 * w2];
        for p in 0..nc {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    d[y * w2 + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let shape = vec![self.dim(0), self.dim(1), h2, w2];
        Tensor::from_op(shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![F::zero(); nc * h * w];
            for p in 0..nc {
                let gs = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let d = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for x in 0..w2 {
                        let i = (y / 2) * w + x / 2;
                        d[i] = d[i] + gs[y * w2 + x];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// 2x2 average pooling of an `(N, C, H, W)` tensor with even H, W.
    pub fn avg_pool2x(&self) -> Tensor<F> {
        assert_eq!(self.rank(), 4, "avg_pool2x expects NCHW");
        let (nc, h, w) = (self.dim(0) * self.dim(1), self.dim(2), self.dim(3));
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2x needs even spatial dims"
        );
        let (h2, w2) = (h / 2, w / 2);
        let q = F::c(0.25);
        let src = self.data();
        let mut data = vec![F::zero(); nc * h2 * w2];
        for p in 0..nc {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    let (y0, x0) = (2 * y, 2 * x);
                    d[y * w2 + x] = q
                        * (s[y0 * w + x0]
                            + s[y0 * w + x0 + 1]
                            + s[(y0 + 1) * w + x0]
                            + s[(y0 + 1) * w + x0 + 1]);
                }
            }
        }
        let shape = vec![self.dim(0), self.dim(1), h2, w2];
        Tensor::from_op(shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![F::zero(); nc * h * w];
            for p in 0..nc {
                let gs = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let d = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        d[y * w + x] = q * gs[(y / 2) * w2 + x / 2];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Mean over the trailing spatial axes of an `(N, C, ...)` tensor, giving `(N, C)`.
    pub fn global_avg_pool(&self) -> Tensor<F> {
        let (n, c) = (self.dim(0), self.dim(1));
        let inner = self.numel() / (n * c).max(1);
        let inv = F::one() / F::from_usize(inner.max(1)).unwrap();
        let data = self
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<F>() * inv)
            .collect();
        Tensor::from_op(vec![n, c], data, vec![self.clone()], move |g, _| {
            vec![Some(
                g.iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, inner))
                    .collect(),
            )]
        })
    }
}
