use crate::{Float, Tensor};

impl<F: Float> Tensor<F> {
    /// Group normalization of an `(N, C, ...)` tensor with per-channel affine.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: F,
    ) -> Tensor<F> {
        let (n, c) = (self.dim(0), self.dim(1));
        assert!(
            groups > 0 && c % groups == 0,
            "group_norm: {c} channels not divisible by {groups}"
        );
        assert!(
            gamma.numel() == c && beta.numel() == c,
            "group_norm affine length"
        );
        let inner = self.numel() / (n * c);
        let cpg = c / groups;
        let glen = cpg * inner;
        let cnt = F::from_usize(glen).unwrap();
        let x = self.data();
        let mut xhat = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); n * groups];
        for (gi, (xs, hs)) in x.chunks(glen).zip(xhat.chunks_mut(glen)).enumerate() {
            let mean = xs.iter().copied().sum::<F>() / cnt;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cnt;
            let is = F::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for (h, &v) in hs.iter_mut().zip(xs) {
                *h = (v - mean) * is;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out: Vec<F> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ch = (i / inner) % c;
                h * gd[ch] + bd[ch]
            })
            .collect();
        let gamma_c = gamma.clone();
        let (nx, ng, nb) = (
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        );
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _| {
                let gd = gamma_c.data();
                let mut dgamma = ng.then(|| vec![F::zero(); c]);
                let mut dbeta = nb.then(|| vec![F::zero(); c]);
                if ng || nb {
                    for (i, (&gv, &h)) in g.iter().zip(&xhat).enumerate() {
                        let ch = (i / inner) % c;
                        if let Some(dg) = dgamma.as_mut() {
                            dg[ch] = dg[ch] + gv * h;
                        }
                        if let Some(db) = dbeta.as_mut() {
                            db[ch] = db[ch] + gv;
                        }
                    }
                }
                let dx = nx.then(|| {
                    let mut dx = vec![F::zero(); g.len()];
                    for gi in 0..n * groups {
                        let off = gi * glen;
                        let mut sum_d = F::zero();
                        let mut sum_dh = F::zero();
                        for j in 0..glen {
                            let ch = ((off + j) / inner) % c;
                            let d = g[off + j] * gd[ch];
                            sum_d = sum_d + d;
                            sum_dh = sum_dh + d * xhat[off + j];
                        }
                        let (md, mdh) = (sum_d / cnt, sum_dh / cnt);
                        let is = inv_std[gi];
                        for j in 0..glen {
                            let ch = ((off + j) / inner) % c;
                            let d = g[off + j] * gd[ch];
                            dx[off + j] = is * (d - md - xhat[off + j] * mdh);
                        }
                    }
                    dx
                });
                vec![dx, dgamma, dbeta]
            },
        )
    }
}
