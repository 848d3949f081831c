use autograd::nn::{join, Linear};
use autograd::{Float, Module, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Low-rank delta `scale * up @ down` for a `(out, in)` weight.
#[derive(Clone, Debug)]
pub struct LoraAdapter<F: Float = f32> {
    /// `(rank, in)`
    pub down: Tensor<F>,
    /// `(out, rank)`, zero at creation.
    pub up: Tensor<F>,
    pub scale: f64,
}

impl<F: Float> LoraAdapter<F> {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize, rank: usize, scale: f64) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let down = (0..rank * din).map(|_| F::c(dist.sample(rng))).collect();
        LoraAdapter {
            down: Tensor::param(vec![rank, din], down),
            up: Tensor::param(vec![dout, rank], vec![F::zero(); dout * rank]),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.dim(0)
    }

    /// Dense `(out, in)` delta.
    pub fn delta(&self) -> Vec<F> {
        let (out, r, din) = (self.up.dim(0), self.rank(), self.down.dim(1));
        let (u, d) = (self.up.data(), self.down.data());
        let s = F::c(self.scale);
        let mut w = vec![F::zero(); out * din];
        for o in 0..out {
            for k in 0..r {
                let ukv = u[o * r + k] * s;
                for i in 0..din {
                    w[o * din + i] = w[o * din + i] + ukv * d[k * din + i];
                }
            }
        }
        w
    }
}

impl<F: Float> Module<F> for LoraAdapter<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(join(prefix, "down"), &self.down);
        f(join(prefix, "up"), &self.up);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "down"), &mut self.down);
        f(join(prefix, "up"), &mut self.up);
    }
}

/// A linear layer with an optional adapter kept separate from its weight.
#[derive(Clone, Debug)]
pub struct LoraLinear<F: Float = f32> {
    pub base: Linear<F>,
    pub adapter: Option<LoraAdapter<F>>,
}

impl<F: Float> LoraLinear<F> {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize) -> Self {
        LoraLinear {
            base: Linear::new(rng, din, dout),
            adapter: None,
        }
    }

    pub fn attach(&mut self, rng: &mut impl Rng, rank: usize, scale: f64) -> Result<()> {
        let (dout, din) = (self.base.weight.dim(0), self.base.weight.dim(1));
        if rank == 0 || rank > din.min(dout) {
            return Err(Error::validation(format!(
                "LoRA rank {rank} incompatible with a {dout}x{din} weight"
            )));
        }
        self.adapter = Some(LoraAdapter::new(rng, din, dout, rank, scale));
        Ok(())
    }

    /// Folds the adapter into the base weight and drops it.
    pub fn merge(&mut self) -> Result<()> {
        let Some(a) = self.adapter.take() else {
            return Ok(());
        };
        let w = &self.base.weight;
        if a.up.dim(0) != w.dim(0) || a.down.dim(1) != w.dim(1) {
            return Err(Error::validation(
                "LoRA adapter shape does not match its base weight",
            ));
        }
        let merged: Vec<F> = w
            .data()
            .iter()
            .zip(a.delta())
            .map(|(&x, d)| x + d)
            .collect();
        let fresh = Tensor::constant(w.shape().to_vec(), merged);
        self.base.weight = if w.requires_grad() {
            fresh.to_param()
        } else {
            fresh
        };
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let y = self.base.forward(x);
        match &self.adapter {
            None => y,
            Some(a) => y.add(
                &x.linear(&a.down, None)
                    .linear(&a.up, None)
                    .scale(F::c(a.scale)),
            ),
        }
    }
}

impl<F: Float> Module<F> for LoraLinear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.base.visit(prefix, f);
        if let Some(a) = &self.adapter {
            a.visit(&join(prefix, "lora"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.base.visit_mut(prefix, f);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&join(prefix, "lora"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_up_is_transparent_and_merge_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = LoraLinear::<f32>::new(&mut rng, 6, 5);
        let x = Tensor::constant(vec![3, 6], (0..18).map(|i| i as f32 * 0.1).collect());
        let before = l.forward(&x).to_vec();
        let w0 = l.base.weight.to_vec();
        l.attach(&mut rng, 4, 1.0).unwrap();
        assert_eq!(l.forward(&x).to_vec(), before);
        l.merge().unwrap();
        assert_eq!(l.base.weight.to_vec(), w0);
    }

    #[test]
    fn merge_matches_adapted_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = LoraLinear::<f32>::new(&mut rng, 8, 8);
        l.attach(&mut rng, 4, 0.5).unwrap();
        let a = l.adapter.as_mut().unwrap();
        a.up = Tensor::param(
            vec![8, 4],
            (0..32).map(|i| (i as f32 * 0.37).sin()).collect(),
        );
        let x = Tensor::constant(vec![2, 8], (0..16).map(|i| (i as f32).cos()).collect());
        let adapted = l.forward(&x).to_vec();
        l.merge().unwrap();
        assert!(l.adapter.is_none());
        let merged = l.forward(&x).to_vec();
        let err = adapted
            .iter()
            .zip(&merged)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn rejects_oversized_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = LoraLinear::<f32>::new(&mut rng, 3, 3);
        assert!(l.attach(&mut rng, 4, 1.0).is_err());
    }
}
