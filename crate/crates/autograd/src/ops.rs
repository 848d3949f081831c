//! Elementwise arithmetic, activations and reductions.

use crate::{Float, Tensor};

fn same_shape<F: Float>(a: &Tensor<F>, b: &Tensor<F>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn need(t: &Tensor<impl Float>) -> bool {
    t.requires_grad()
}

impl<F: Float> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        same_shape(self, other, "add");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let (na, nb) = (need(self), need(other));
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, _| vec![na.then(|| g.to_vec()), nb.then(|| g.to_vec())],
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        same_shape(self, other, "sub");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let (na, nb) = (need(self), need(other));
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, _| {
                vec![
                    na.then(|| g.to_vec()),
                    nb.then(|| g.iter().map(|&v| -v).collect()),
                ]
            },
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        same_shape(self, other, "mul");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (need(self), need(other));
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, _| {
                vec![
                    na.then(|| g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect()),
                    nb.then(|| g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect()),
                ]
            },
        )
    }

    pub fn scale(&self, s: F) -> Tensor<F> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())],
        )
    }

    pub fn add_scalar(&self, s: F) -> Tensor<F> {
        let data = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-F::one())
    }

    pub fn sqr(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&v| v * v).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, _| {
                let two = F::c(2.0);
                vec![Some(
                    g.iter().zip(x.data()).map(|(&g, &x)| two * g * x).collect(),
                )]
            },
        )
    }

    /// Adds `bias` (length `shape[axis]`) broadcast over every other axis.
    pub fn add_bias(&self, bias: &Tensor<F>, axis: usize) -> Tensor<F> {
        let c = self.dim(axis);
        assert_eq!(
            bias.numel(),
            c,
            "add_bias: bias length must equal dim {axis}"
        );
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut data = self.to_vec();
        let b = bias.data();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + b[(i / inner) % c];
        }
        let (nx, nb) = (need(self), need(bias));
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move |g, _| {
                let gb = nb.then(|| {
                    let mut gb = vec![F::zero(); c];
                    for (i, &v) in g.iter().enumerate() {
                        let k = (i / inner) % c;
                        gb[k] = gb[k] + v;
                    }
                    gb
                });
                vec![nx.then(|| g.to_vec()), gb]
            },
        )
    }

    fn unary(
        &self,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + Send + Sync + 'static,
    ) -> Tensor<F> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, out| {
                // df(x, y) is dy/dx evaluated at input x with output y
                vec![Some(
                    g.iter()
                        .zip(x.data().iter().zip(out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            },
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            |v| if v > F::zero() { v } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: F) -> Tensor<F> {
        self.unary(
            move |v| if v > F::zero() { v } else { v * slope },
            move |x, _| if x > F::zero() { F::one() } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary(|v| sigmoid(v), |_, y| y * (F::one() - y))
    }

    pub fn silu(&self) -> Tensor<F> {
        self.unary(
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (F::one() + x * (F::one() - s))
            },
        )
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = F::from_usize(self.numel().max(1)).unwrap();
        self.sum_all().scale(F::one() / n)
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&self, target: &Tensor<F>) -> Tensor<F> {
        same_shape(self, target, "mse");
        let n = self.numel().max(1);
        let inv = F::one() / F::from_usize(n).unwrap();
        let s: F = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let (a, b) = (self.clone(), target.clone());
        let (na, nb) = (need(self), need(target));
        Tensor::from_op(
            vec![],
            vec![s * inv],
            vec![self.clone(), target.clone()],
            move |g, _| {
                let k = F::c(2.0) * inv * g[0];
                let diff: Vec<F> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&a, &b)| k * (a - b))
                    .collect();
                let gb = nb.then(|| diff.iter().map(|&v| -v).collect());
                vec![na.then_some(diff), gb]
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<F> {
        let n = *self.shape().last().expect("softmax on scalar");
        let mut data = self.to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, y| {
                let mut gx = vec![F::zero(); g.len()];
                for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in xr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under a row softmax of `(N, K)` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Tensor<F> {
        assert_eq!(self.rank(), 2, "cross_entropy expects (N, K) logits");
        let (n, k) = (self.dim(0), self.dim(1));
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        assert!(
            targets.iter().all(|&t| t < k),
            "cross_entropy: target out of range"
        );
        let mut probs = self.to_vec();
        let mut loss = F::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
            loss = loss + lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let inv = F::one() / F::from_usize(n.max(1)).unwrap();
        let targets = targets.to_vec();
        Tensor::from_op(vec![], vec![loss * inv], vec![self.clone()], move |g, _| {
            let s = g[0] * inv;
            let mut gx: Vec<F> = probs.iter().map(|&p| p * s).collect();
            for (i, &t) in targets.iter().enumerate() {
                gx[i * k + t] = gx[i * k + t] - s;
            }
            vec![Some(gx)]
        })
    }

    /// Scales each row over the last axis to unit Euclidean norm.
    pub fn l2_normalize_last(&self, eps: F) -> Tensor<F> {
        let n = *self.shape().last().expect("normalize on scalar");
        let mut data = self.to_vec();
        let mut inv_norms = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let inv = F::one() / (row.iter().map(|&v| v * v).sum::<F>().sqrt() + eps);
            inv_norms.push(inv);
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, y| {
                let mut gx = vec![F::zero(); g.len()];
                for (((gr, yr), xr), &inv) in g
                    .chunks(n)
                    .zip(y.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .zip(&inv_norms)
                {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    let norm_y: F = yr.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let c = if norm_y > F::zero() {
                        dot / norm_y
                    } else {
                        F::zero()
                    };
                    for ((o, &gv), &yv) in xr.iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gv - c * yv);
                    }
                }
                vec![Some(gx)]
            },
        )
    }
}

#[inline]
fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}
