//! Matrix products.

use crate::float::matmul_into;
use crate::{Float, Tensor};

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
}

fn dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> MatDims {
    let (m, ka) = if ta { (a[1], a[0]) } else { (a[0], a[1]) };
    let (kb, n) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
    assert_eq!(
        ka, kb,
        "matmul inner dims differ: {a:?} x {b:?} (ta={ta}, tb={tb})"
    );
    MatDims { m, k: ka, n }
}

/// Gradients of `C = op(A) op(B)` for one matrix pair.
#[allow(clippy::too_many_arguments)]
fn grads_into<F: Float>(
    d: &MatDims,
    ta: bool,
    tb: bool,
    a: &[F],
    b: &[F],
    g: &[F],
    ga: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    let MatDims { m, k, n } = *d;
    if let Some(ga) = ga {
        if ta {
            matmul_into(tb, true, k, n, m, b, g, F::one(), ga);
        } else {
            matmul_into(false, !tb, m, n, k, g, b, F::one(), ga);
        }
    }
    if let Some(gb) = gb {
        if tb {
            matmul_into(true, ta, n, m, k, g, a, F::one(), gb);
        } else {
            matmul_into(!ta, false, k, m, n, a, g, F::one(), gb);
        }
    }
}

impl<F: Float> Tensor<F> {
    /// 2-D product `op(self) * op(other)` where `op` optionally transposes.
    pub fn mm(&self, other: &Tensor<F>, ta: bool, tb: bool) -> Tensor<F> {
        assert!(self.rank() == 2 && other.rank() == 2, "mm expects matrices");
        let d = dims(self.shape(), other.shape(), ta, tb);
        let mut out = vec![F::zero(); d.m * d.n];
        matmul_into(
            ta,
            tb,
            d.m,
            d.k,
            d.n,
            self.data(),
            other.data(),
            F::zero(),
            &mut out,
        );
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        let (la, lb) = (self.numel(), other.numel());
        Tensor::from_op(
            vec![d.m, d.n],
            out,
            vec![self.clone(), other.clone()],
            move |g, _| {
                let mut ga = na.then(|| vec![F::zero(); la]);
                let mut gb = nb.then(|| vec![F::zero(); lb]);
                grads_into(
                    &d,
                    ta,
                    tb,
                    a.data(),
                    b.data(),
                    g,
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                vec![ga, gb]
            },
        )
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn bmm(&self, other: &Tensor<F>, ta: bool, tb: bool) -> Tensor<F> {
        assert!(
            self.rank() == 3 && other.rank() == 3,
            "bmm expects rank-3 tensors"
        );
        let batch = self.dim(0);
        assert_eq!(batch, other.dim(0), "bmm batch mismatch");
        let d = dims(&self.shape()[1..], &other.shape()[1..], ta, tb);
        let (sa, sb, sc) = (self.numel() / batch, other.numel() / batch, d.m * d.n);
        let mut out = vec![F::zero(); batch * sc];
        for i in 0..batch {
            matmul_into(
                ta,
                tb,
                d.m,
                d.k,
                d.n,
                &self.data()[i * sa..(i + 1) * sa],
                &other.data()[i * sb..(i + 1) * sb],
                F::zero(),
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        Tensor::from_op(
            vec![batch, d.m, d.n],
            out,
            vec![self.clone(), other.clone()],
            move |g, _| {
                let mut ga = na.then(|| vec![F::zero(); batch * sa]);
                let mut gb = nb.then(|| vec![F::zero(); batch * sb]);
                for i in 0..batch {
                    grads_into(
                        &d,
                        ta,
                        tb,
                        &a.data()[i * sa..(i + 1) * sa],
                        &b.data()[i * sb..(i + 1) * sb],
                        &g[i * sc..(i + 1) * sc],
                        ga.as_mut().map(|v| &mut v[i * sa..(i + 1) * sa]),
                        gb.as_mut().map(|v| &mut v[i * sb..(i + 1) * sb]),
                    );
                }
                vec![ga, gb]
            },
        )
    }

    /// `self @ weight^T (+ bias)` over the last axis; `weight` is `(out, in)`.
    pub fn linear(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Tensor<F> {
        let k = *self.shape().last().expect("linear on scalar");
        let rows = self.numel() / k.max(1);
        let o = weight.dim(0);
        let y = self.reshape(vec![rows, k]).mm(weight, false, true);
        let y = match bias {
            Some(b) => y.add_bias(b, 1),
            None => y,
        };
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        y.reshape(shape)
    }
}
