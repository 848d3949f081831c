use std::collections::BTreeMap;
use std::path::Path;

use autograd::nn::{join, Conv2d, Linear};
use autograd::optim::{Adam, AdamConfig};
use autograd::{no_grad, Module, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::latent_codec::tensors_hash;

const WEIGHTS_FILE: &str = "embedder.safetensors";
const META_FILE: &str = "embedder.json";
/// Logit scale of the cosine classifier.
const COSINE_SCALE: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            embed_dim: 64,
            classes: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            steps: 1500,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderMeta {
    pub config: EmbedderConfig,
    pub steps: u64,
    pub heldout_accuracy: f64,
    pub weights_hash: String,
}

/// Small CNN trained to classify synthetic identities; its unit-norm
/// penultimate features serve as the identity descriptor.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    proj: Linear,
    classifier: Tensor,
    pub meta: Option<EmbedderMeta>,
}

impl Module<f32> for IdentityEmbedder {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.c1.visit(&join(p, "c1"), f);
        self.c2.visit(&join(p, "c2"), f);
        self.c3.visit(&join(p, "c3"), f);
        self.proj.visit(&join(p, "proj"), f);
        f(join(p, "classifier"), &self.classifier);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.c1.visit_mut(&join(p, "c1"), f);
        self.c2.visit_mut(&join(p, "c2"), f);
        self.c3.visit_mut(&join(p, "c3"), f);
        self.proj.visit_mut(&join(p, "proj"), f);
        f(join(p, "classifier"), &mut self.classifier);
    }
}

impl IdentityEmbedder {
    pub fn new(seed: u64, config: EmbedderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls = Linear::<f32>::new(&mut rng, config.embed_dim, config.classes).weight;
        IdentityEmbedder {
            c1: Conv2d::k3(&mut rng, 3, 16, 2),
            c2: Conv2d::k3(&mut rng, 16, 32, 2),
            c3: Conv2d::k3(&mut rng, 32, 64, 2),
            proj: Linear::new(&mut rng, 64, config.embed_dim),
            classifier: cls,
            meta: None,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.meta.is_some()
    }

    /// `(N, 3, H, W)` to unit-norm `(N, D)`.
    pub fn embed_tensor(&self, x: &Tensor) -> Tensor {
        let h = self.c1.forward(&x.scale(2.0).add_scalar(-1.0)).silu();
        let h = self.c2.forward(&h).silu();
        let h = self.c3.forward(&h).silu();
        self.proj
            .forward(&h.global_avg_pool())
            .l2_normalize_last(1e-6)
    }

    fn logits(&self, x: &Tensor) -> Tensor {
        let w = self.classifier.l2_normalize_last(1e-6);
        self.embed_tensor(x)
            .linear(&w, None)
            .scale(COSINE_SCALE as f32)
    }

    /// Unit-norm embeddings of `images`.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if !self.is_trained() {
            return Err(Error::Config(
                "identity embedder has not been trained".into(),
            ));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let e = no_grad(|| self.embed_tensor(&stack(chunk)));
            let d = e.dim(1);
            out.extend(
                e.data()
                    .chunks(d)
                    .map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()),
            );
        }
        Ok(out)
    }

    fn accuracy(&self, samples: &[(Image, usize)]) -> f64 {
        let mut correct = 0usize;
        for chunk in samples.chunks(64) {
            let refs: Vec<&Image> = chunk.iter().map(|(i, _)| i).collect();
            let l = no_grad(|| self.logits(&stack(&refs)));
            let k = l.dim(1);
            for (row, (_, label)) in l.data().chunks(k).zip(chunk) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                correct += usize::from(arg == *label);
            }
        }
        correct as f64 / samples.len().max(1) as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| Error::Config("cannot save an untrained embedder".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        autograd::io::save(&dir.join(WEIGHTS_FILE), &self.named_tensors())?;
        let path = dir.join(META_FILE);
        std::fs::write(
            &path,
            serde_json::to_string_pretty(meta).expect("meta serializes"),
        )
        .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no identity embedder at {}",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: EmbedderMeta = serde_json::from_str(&text)
            .map_err(|e| Error::integrity(format!("corrupt embedder metadata: {e}")))?;
        let mut emb = IdentityEmbedder::new(0, meta.config);
        let values: BTreeMap<String, Tensor> = autograd::io::load(&dir.join(WEIGHTS_FILE))?;
        emb.load_named(&values).map_err(Error::Integrity)?;
        emb.freeze();
        if tensors_hash(&emb) != meta.weights_hash {
            return Err(Error::integrity(
                "identity embedder weights fail their hash check",
            ));
        }
        emb.meta = Some(meta);
        Ok(emb)
    }
}

/// Trains the cosine-softmax identity classifier on `(image, identity index)` pairs.
pub fn train_embedder(
    train: &[(Image, usize)],
    heldout: &[(Image, usize)],
    model_seed: u64,
    config: EmbedderConfig,
    tc: &EmbedderTrainConfig,
) -> Result<IdentityEmbedder> {
    if train.is_empty() {
        return Err(Error::validation("embedder training set is empty"));
    }
    if let Some((_, l)) = train
        .iter()
        .chain(heldout)
        .find(|(_, l)| *l >= config.classes)
    {
        return Err(Error::validation(format!(
            "label {l} exceeds {} classes",
            config.classes
        )));
    }
    let mut emb = IdentityEmbedder::new(model_seed, config);
    let mut opt = Adam::new(AdamConfig::with_lr(tc.lr));
    let batch = tc.batch_size.min(train.len()).max(1);
    for step in 0..tc.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ step.wrapping_mul(0xA076_1D64_78BD_642F));
        let idx = sample(&mut rng, train.len(), batch);
        let refs: Vec<&Image> = idx.iter().map(|i| &train[i].0).collect();
        let labels: Vec<usize> = idx.iter().map(|i| train[i].1).collect();
        let loss = emb.logits(&stack(&refs)).cross_entropy(&labels);
        if !loss.item().is_finite() {
            return Err(Error::Numerical {
                step,
                msg: "identity classifier loss is not finite".into(),
            });
        }
        let grads = loss.backward();
        opt.step(&mut emb, &grads);
    }
    emb.freeze();
    let heldout_accuracy = if heldout.is_empty() {
        f64::NAN
    } else {
        emb.accuracy(heldout)
    };
    emb.meta = Some(EmbedderMeta {
        config,
        steps: tc.steps,
        heldout_accuracy,
        weights_hash: tensors_hash(&emb),
    });
    Ok(emb)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of identity embeddings.
pub fn id_consistency(a: &Image, b: &Image, embedder: &IdentityEmbedder) -> Result<f64> {
    let e = embedder.embed(&[a, b])?;
    Ok(cosine(&e[0], &e[1]))
}
