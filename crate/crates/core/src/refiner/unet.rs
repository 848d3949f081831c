use autograd::nn::{join, Conv2d, GroupNorm, Linear};
use autograd::{Float, Module, Tensor};
use rand::Rng;

use super::lora::LoraLinear;
use super::{
    reshape_for_attention, reshape_for_resblock, unreshape_from_attention, unreshape_from_resblock,
};
use crate::error::{Error, Result};

const TIME_FEATURES: usize = 32;

/// Sinusoidal features of a scalar timestep, `[sin.., cos..]`.
pub fn timestep_features(t: u32, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp());
    let (s, c): (Vec<f64>, Vec<f64>) = freqs
        .map(|f| ((t as f64 * f).sin(), (t as f64 * f).cos()))
        .unzip();
    s.into_iter().chain(c).collect()
}

#[derive(Clone, Debug)]
pub struct ResBlock<F: Float = f32> {
    norm1: GroupNorm<F>,
    conv1: Conv2d<F>,
    time: Linear<F>,
    norm2: GroupNorm<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
}

impl<F: Float> ResBlock<F> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, temb: usize, groups: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(groups, cin),
            conv1: Conv2d::k3(rng, cin, cout, 1),
            time: Linear::new(rng, temb, cout),
            norm2: GroupNorm::new(groups, cout),
            conv2: Conv2d::k3(rng, cout, cout, 1),
            skip: (cin != cout).then(|| Conv2d::new(rng, cin, cout, 1, 1, 0)),
        }
    }

    /// `x` is `(N, C, H, W)`; `temb` is `(1, T)`.
    pub fn forward(&self, x: &Tensor<F>, temb: &Tensor<F>) -> Tensor<F> {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let bias = self.time.forward(temb);
        let h = h.add_bias(&bias.reshape(vec![bias.numel()]), 1);
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        h.add(&skip)
    }
}

impl<F: Float> Module<F> for ResBlock<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.norm1.visit(&join(p, "norm1"), f);
        self.conv1.visit(&join(p, "conv1"), f);
        self.time.visit(&join(p, "time"), f);
        self.norm2.visit(&join(p, "norm2"), f);
        self.conv2.visit(&join(p, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(p, "skip"), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.norm1.visit_mut(&join(p, "norm1"), f);
        self.conv1.visit_mut(&join(p, "conv1"), f);
        self.time.visit_mut(&join(p, "time"), f);
        self.norm2.visit_mut(&join(p, "norm2"), f);
        self.conv2.visit_mut(&join(p, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(p, "skip"), f);
        }
    }
}

/// Multi-head self-attention over a `(B, C, T)` token layout, channels as embedding.
#[derive(Clone, Debug)]
pub struct Attention<F: Float = f32> {
    norm: GroupNorm<F>,
    pub q: LoraLinear<F>,
    pub k: LoraLinear<F>,
    pub v: LoraLinear<F>,
    pub out: LoraLinear<F>,
    heads: usize,
}

impl<F: Float> Attention<F> {
    pub fn new(rng: &mut impl Rng, channels: usize, heads: usize, groups: usize) -> Self {
        assert_eq!(
            channels % heads,
            0,
            "attention width {channels} not divisible by {heads} heads"
        );
        Attention {
            norm: GroupNorm::new(groups, channels),
            q: LoraLinear::new(rng, channels, channels),
            k: LoraLinear::new(rng, channels, channels),
            v: LoraLinear::new(rng, channels, channels),
            out: LoraLinear::new(rng, channels, channels),
            heads,
        }
    }

    pub fn projections_mut(&mut self) -> [&mut LoraLinear<F>; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.out]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        let (h, d) = (self.heads, c / self.heads);
        let tokens = self.norm.forward(x).transpose_last();
        let split = |y: Tensor<F>| {
            y.reshape(vec![b, t, h, d])
                .permute(&[0, 2, 1, 3])
                .reshape(vec![b * h, t, d])
        };
        let q = split(self.q.forward(&tokens));
        let k = split(self.k.forward(&tokens));
        let v = split(self.v.forward(&tokens));
        let attn = q
            .bmm(&k, false, true)
            .scale(F::c(1.0 / (d as f64).sqrt()))
            .softmax_last();
        let mixed = attn
            .bmm(&v, false, false)
            .reshape(vec![b, h, t, d])
            .permute(&[0, 2, 1, 3])
            .reshape(vec![b, t, c]);
        x.add(&self.out.forward(&mixed).transpose_last())
    }
}

impl<F: Float> Module<F> for Attention<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.norm.visit(&join(p, "norm"), f);
        self.q.visit(&join(p, "q"), f);
        self.k.visit(&join(p, "k"), f);
        self.v.visit(&join(p, "v"), f);
        self.out.visit(&join(p, "out"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.norm.visit_mut(&join(p, "norm"), f);
        self.q.visit_mut(&join(p, "q"), f);
        self.k.visit_mut(&join(p, "k"), f);
        self.v.visit_mut(&join(p, "v"), f);
        self.out.visit_mut(&join(p, "out"), f);
    }
}

/// Two-level U-Net with a global residual; attention at the 1/2 and 1/4 levels.
#[derive(Clone, Debug)]
pub struct UNet<F: Float = f32> {
    conv_in: Conv2d<F>,
    time1: Linear<F>,
    time2: Linear<F>,
    down0: ResBlock<F>,
    pool0: Conv2d<F>,
    down1: ResBlock<F>,
    attn1: Attention<F>,
    pool1: Conv2d<F>,
    mid: ResBlock<F>,
    attn_mid: Attention<F>,
    up1: ResBlock<F>,
    attn_up1: Attention<F>,
    up0: ResBlock<F>,
    norm_out: GroupNorm<F>,
    conv_out: Conv2d<F>,
    timestep: u32,
    temb_dim: usize,
}

impl<F: Float> UNet<F> {
    pub fn new(
        rng: &mut impl Rng,
        latent: usize,
        widths: [usize; 3],
        heads: usize,
        groups: usize,
        timestep: u32,
    ) -> Self {
        let [w0, w1, w2] = widths;
        let te = 4 * w0;
        UNet {
            conv_in: Conv2d::k3(rng, latent, w0, 1),
            time1: Linear::new(rng, TIME_FEATURES, te),
            time2: Linear::new(rng, te, te),
            down0: ResBlock::new(rng, w0, w0, te, groups),
            pool0: Conv2d::k3(rng, w0, w0, 2),
            down1: ResBlock::new(rng, w0, w1, te, groups),
            attn1: Attention::new(rng, w1, heads, groups),
            pool1: Conv2d::k3(rng, w1, w1, 2),
            mid: ResBlock::new(rng, w1, w2, te, groups),
            attn_mid: Attention::new(rng, w2, heads, groups),
            up1: ResBlock::new(rng, w2 + w1, w1, te, groups),
            attn_up1: Attention::new(rng, w1, heads, groups),
            up0: ResBlock::new(rng, w1 + w0, w0, te, groups),
            norm_out: GroupNorm::new(groups, w0),
            conv_out: Conv2d::k3(rng, w0, latent, 1).zero_init(),
            timestep,
            temb_dim: te,
        }
    }

    pub fn attention_layers_mut(&mut self) -> [&mut Attention<F>; 3] {
        [&mut self.attn1, &mut self.attn_mid, &mut self.attn_up1]
    }

    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    fn time_embedding(&self) -> Tensor<F> {
        let feats = timestep_features(self.timestep, TIME_FEATURES)
            .into_iter()
            .map(F::c)
            .collect();
        let t = Tensor::constant(vec![1, TIME_FEATURES], feats);
        let e = self.time2.forward(&self.time1.forward(&t).silu());
        debug_assert_eq!(e.dim(1), self.temb_dim);
        e
    }

    /// Attention over all slots of each subject on the folded `(B (V+1), C, H, W)` layout.
    fn joint_attention(&self, attn: &Attention<F>, x: &Tensor<F>, batch: usize) -> Tensor<F> {
        let (h, w) = (x.dim(2), x.dim(3));
        let slots = x.dim(0) / batch;
        let tokens = reshape_for_attention(&unreshape_from_resblock(x, batch));
        reshape_for_resblock(&unreshape_from_attention(
            &attn.forward(&tokens),
            slots,
            h,
            w,
        ))
    }

    /// `(B, V + 1, C, H, W)` in, same shape out.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.rank() != 5 || x.dim(2) != self.conv_in.weight.dim(1) {
            return Err(Error::validation(format!(
                "U-Net input {:?} does not match the model",
                x.shape()
            )));
        }
        if !x.dim(3).is_multiple_of(4) || !x.dim(4).is_multiple_of(4) {
            return Err(Error::validation(
                "latent height and width must be divisible by 4",
            ));
        }
        let batch = x.dim(0);
        let temb = self.time_embedding();
        let folded = reshape_for_resblock(x);
        let h0 = self.down0.forward(&self.conv_in.forward(&folded), &temb);
        let h1 = self.down1.forward(&self.pool0.forward(&h0), &temb);
        let h1 = self.joint_attention(&self.attn1, &h1, batch);
        let m = self.mid.forward(&self.pool1.forward(&h1), &temb);
        let m = self.joint_attention(&self.attn_mid, &m, batch);
        let u1 = Tensor::cat(&[m.upsample2x(), h1], 1);
        let u1 = self.up1.forward(&u1, &temb);
        let u1 = self.joint_attention(&self.attn_up1, &u1, batch);
        let u0 = self
            .up0
            .forward(&Tensor::cat(&[u1.upsample2x(), h0], 1), &temb);
        let delta = self.conv_out.forward(&self.norm_out.forward(&u0).silu());
        Ok(unreshape_from_resblock(&folded.add(&delta), batch))
    }
}

impl<F: Float> Module<F> for UNet<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.conv_in.visit(&join(p, "conv_in"), f);
        self.time1.visit(&join(p, "time1"), f);
        self.time2.visit(&join(p, "time2"), f);
        self.down0.visit(&join(p, "down0"), f);
        self.pool0.visit(&join(p, "pool0"), f);
        self.down1.visit(&join(p, "down1"), f);
        self.attn1.visit(&join(p, "attn1"), f);
        self.pool1.visit(&join(p, "pool1"), f);
        self.mid.visit(&join(p, "mid"), f);
        self.attn_mid.visit(&join(p, "attn_mid"), f);
        self.up1.visit(&join(p, "up1"), f);
        self.attn_up1.visit(&join(p, "attn_up1"), f);
        self.up0.visit(&join(p, "up0"), f);
        self.norm_out.visit(&join(p, "norm_out"), f);
        self.conv_out.visit(&join(p, "conv_out"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.conv_in.visit_mut(&join(p, "conv_in"), f);
        self.time1.visit_mut(&join(p, "time1"), f);
        self.time2.visit_mut(&join(p, "time2"), f);
        self.down0.visit_mut(&join(p, "down0"), f);
        self.pool0.visit_mut(&join(p, "pool0"), f);
        self.down1.visit_mut(&join(p, "down1"), f);
        self.attn1.visit_mut(&join(p, "attn1"), f);
        self.pool1.visit_mut(&join(p, "pool1"), f);
        self.mid.visit_mut(&join(p, "mid"), f);
        self.attn_mid.visit_mut(&join(p, "attn_mid"), f);
        self.up1.visit_mut(&join(p, "up1"), f);
        self.attn_up1.visit_mut(&join(p, "attn_up1"), f);
        self.up0.visit_mut(&join(p, "up0"), f);
        self.norm_out.visit_mut(&join(p, "norm_out"), f);
        self.conv_out.visit_mut(&join(p, "conv_out"), f);
    }
}
