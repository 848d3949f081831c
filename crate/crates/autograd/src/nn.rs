//! Parameterized layers and the parameter visitor they share.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::{Float, Tensor};

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named tensors.
pub trait Module<F: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>));

    fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if t.requires_grad() {
                n += t.numel()
            }
        });
        n
    }

    /// Turns every tensor into an untracked constant.
    fn freeze(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach());
    }

    fn unfreeze(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.to_param());
    }

    /// Replaces values by name, keeping each tensor's trainable flag.
    fn load_named(&mut self, values: &BTreeMap<String, Tensor<F>>) -> Result<(), String> {
        let mut err = None;
        let mut seen = 0usize;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match values.get(&name) {
                None => err = Some(format!("missing tensor `{name}`")),
                Some(v) if v.shape() != t.shape() => {
                    err = Some(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    ))
                }
                Some(v) => {
                    seen += 1;
                    let fresh = Tensor::constant(v.shape().to_vec(), v.to_vec());
                    *t = if t.requires_grad() {
                        fresh.to_param()
                    } else {
                        fresh
                    };
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != values.len() {
            return Err(format!(
                "{} unexpected tensors in state",
                values.len() - seen
            ));
        }
        Ok(())
    }
}

fn uniform_init<F: Float>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<F> {
    let n = crate::numel(&shape);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| F::c(dist.sample(rng))).collect();
    Tensor::param(shape, data)
}

#[derive(Clone, Debug)]
pub struct Conv2d<F: Float = f32> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Float> Conv2d<F> {
    pub fn new(
        rng: &mut impl Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Conv2d {
            weight: uniform_init(rng, vec![cout, cin, k, k], bound),
            bias: Some(uniform_init(rng, vec![cout], bound)),
            stride,
            pad,
        }
    }

    /// 3x3, stride `stride`, same padding.
    pub fn k3(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> Self {
        Self::new(rng, cin, cout, 3, stride, 1)
    }

    pub fn zero_init(mut self) -> Self {
        self.weight = Tensor::param(
            self.weight.shape().to_vec(),
            vec![F::zero(); self.weight.numel()],
        );
        if let Some(b) = &mut self.bias {
            *b = Tensor::param(b.shape().to_vec(), vec![F::zero(); b.numel()]);
        }
        self
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

impl<F: Float> Module<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<F: Float = f32> {
    /// `(out, in)`
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

impl<F: Float> Linear<F> {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Linear {
            weight: uniform_init(rng, vec![dout, din], bound),
            bias: Some(uniform_init(rng, vec![dout], bound)),
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

impl<F: Float> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm<F: Float = f32> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub groups: usize,
    pub eps: f64,
}

impl<F: Float> GroupNorm<F> {
    pub fn new(groups: usize, channels: usize) -> Self {
        GroupNorm {
            gamma: Tensor::param(vec![channels], vec![F::one(); channels]),
            beta: Tensor::param(vec![channels], vec![F::zero(); channels]),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.group_norm(self.groups, &self.gamma, &self.beta, F::c(self.eps))
    }
}

impl<F: Float> Module<F> for GroupNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

impl<F: Float, M: Module<F>> Module<F> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
