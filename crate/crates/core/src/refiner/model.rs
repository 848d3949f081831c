use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use autograd::{no_grad, Float, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::unet::UNet;
use super::{add_noise, NoiseLevel, ViewLatentBatch, FIXED_TIMESTEP};
use crate::coarse_synth::CoarseView;
use crate::error::{Error, Result};
use crate::image::{stack, unstack, Image};
use crate::latent_codec::{tensors_hash, Codec};

/// Seed of the noise draw used by [`refine`].
pub const INFERENCE_SEED: u64 = 0x5EED_0F1E;

const BASE_FILE: &str = "base.safetensors";
const ADAPTER_DIR: &str = "adapters";
const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub latent_channels: usize,
    pub widths: [usize; 3],
    pub heads: usize,
    pub groups: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub timestep: u32,
    pub view_count: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            latent_channels: 8,
            widths: [32, 64, 128],
            heads: 4,
            groups: 8,
            lora_rank: 4,
            lora_scale: 1.0,
            timestep: FIXED_TIMESTEP,
            view_count: 2,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.view_count == 0 || self.view_count > crate::synthdata::MAX_VIEWS {
            return Err(Error::Config(format!(
                "view_count {} outside 1..=16",
                self.view_count
            )));
        }
        if self.timestep != FIXED_TIMESTEP {
            return Err(Error::Config(format!(
                "timestep is fixed at {FIXED_TIMESTEP}"
            )));
        }
        let [a, b, c] = self.widths;
        let divisible = [a, b, c, a + b, b + c]
            .iter()
            .all(|w| w % self.groups.max(1) == 0);
        if self.groups == 0
            || !divisible
            || self.heads == 0
            || b % self.heads != 0
            || c % self.heads != 0
        {
            return Err(Error::Config(format!(
                "inconsistent refiner widths/groups/heads {self:?}"
            )));
        }
        Ok(())
    }
}

fn is_adapter(name: &str) -> bool {
    name.contains(".lora.")
}

/// U-Net plus adapter bookkeeping and a forward-pass counter.
#[derive(Debug)]
pub struct RefinerModel<F: Float = f32> {
    pub config: RefinerConfig,
    pub unet: UNet<F>,
    forwards: AtomicU64,
}

impl<F: Float> Clone for RefinerModel<F> {
    fn clone(&self) -> Self {
        RefinerModel {
            config: self.config,
            unet: self.unet.clone(),
            forwards: AtomicU64::new(0),
        }
    }
}

impl<F: Float> Module<F> for RefinerModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.unet.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.unet.visit_mut(prefix, f);
    }
}

impl<F: Float> RefinerModel<F> {
    pub fn new(seed: u64, config: RefinerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = UNet::new(
            &mut rng,
            config.latent_channels,
            config.widths,
            config.heads,
            config.groups,
            config.timestep,
        );
        Ok(RefinerModel {
            config,
            unet,
            forwards: AtomicU64::new(0),
        })
    }

    /// One U-Net pass over every slot; counted.
    pub fn unet_forward(&self, batch: &ViewLatentBatch<F>) -> Result<ViewLatentBatch<F>> {
        if batch.views() != self.config.view_count {
            return Err(Error::validation(format!(
                "batch has {} novel views, model expects {}",
                batch.views(),
                self.config.view_count
            )));
        }
        self.forwards.fetch_add(1, Ordering::Relaxed);
        ViewLatentBatch::new(self.unet.forward(batch.tensor())?)
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    pub fn has_adapters(&self) -> bool {
        self.named_tensors().iter().any(|(n, _)| is_adapter(n))
    }

    /// Freezes the base and attaches fresh adapters to every attention projection.
    pub fn apply_lora(&mut self, seed: u64) -> Result<()> {
        self.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rank, scale) = (self.config.lora_rank, self.config.lora_scale);
        for attn in self.unet.attention_layers_mut() {
            for proj in attn.projections_mut() {
                proj.attach(&mut rng, rank, scale)?;
            }
        }
        Ok(())
    }

    /// Folds every adapter into its base weight.
    pub fn merge_lora(&mut self) -> Result<()> {
        for attn in self.unet.attention_layers_mut() {
            for proj in attn.projections_mut() {
                proj.merge()?;
            }
        }
        Ok(())
    }

    fn partition(&self) -> (Vec<(String, Tensor<F>)>, Vec<(String, Tensor<F>)>) {
        self.named_tensors()
            .into_iter()
            .partition(|(n, _)| !is_adapter(n))
    }

    pub fn base_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.partition().0
    }

    pub fn adapter_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.partition().1
    }

    pub fn num_base_params(&self) -> usize {
        self.base_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn base_hash(&self) -> String {
        hash_named(&self.base_tensors())
    }

    pub fn adapter_hash(&self) -> String {
        hash_named(&self.adapter_tensors())
    }

    pub fn weights_hash(&self) -> String {
        tensors_hash(self)
    }

    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (n, t) in self.base_tensors() {
            h.update(format!("{n}:{:?};", t.shape()));
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn hash_named<F: Float>(tensors: &[(String, Tensor<F>)]) -> String {
    let mut h = Sha256::new();
    for (n, t) in tensors {
        h.update(n.as_bytes());
        h.update(F::to_le_bytes_vec(t.data()));
    }
    hex::encode(h.finalize())
}

impl RefinerModel<f32> {
    /// Encodes `(reference, views..)` groups into a `(B, V + 1, C, H', W')` batch.
    pub fn encode_groups(&self, codec: &Codec, groups: &[Vec<&Image>]) -> Result<ViewLatentBatch> {
        let slots = self.config.view_count + 1;
        if groups.iter().any(|g| g.len() != slots) {
            return Err(Error::validation(format!(
                "each group needs 1 reference and {} views",
                slots - 1
            )));
        }
        let flat: Vec<&Image> = groups.iter().flatten().copied().collect();
        let z = no_grad(|| codec.encode_tensor(&stack(&flat)));
        let (c, h, w) = (z.dim(1), z.dim(2), z.dim(3));
        ViewLatentBatch::new(z.reshape(vec![groups.len(), slots, c, h, w]))
    }

    /// Refines many subjects with a single U-Net pass. Returns the `V` refined
    /// views of each group.
    pub fn refine_groups(
        &self,
        codec: &Codec,
        groups: &[Vec<&Image>],
        r: NoiseLevel,
        seed: u64,
    ) -> Result<Vec<Vec<Image>>> {
        let batch = self.encode_groups(codec, groups)?;
        let noisy = add_noise(&batch, r, seed);
        let out = no_grad(|| self.unet_forward(&noisy))?;
        let images = unstack(&no_grad(|| codec.decode_tensor(&out.novel_views())));
        let v = self.config.view_count;
        Ok(images.chunks(v).map(|c| c.to_vec()).collect())
    }
}

/// Encode, perturb with the fixed inference draw, one U-Net pass, drop the
/// reference slot, decode.
pub fn refine(
    model: &RefinerModel,
    codec: &Codec,
    reference: &Image,
    coarse_views: &[CoarseView],
    r: NoiseLevel,
) -> Result<Vec<Image>> {
    if coarse_views.len() != model.config.view_count {
        return Err(Error::validation(format!(
            "got {} coarse views, model expects {}",
            coarse_views.len(),
            model.config.view_count
        )));
    }
    if coarse_views.iter().any(|c| !c.image.same_shape(reference)) {
        return Err(Error::validation(
            "coarse views and reference differ in shape",
        ));
    }
    let group: Vec<&Image> = std::iter::once(reference)
        .chain(coarse_views.iter().map(|c| &c.image))
        .collect();
    Ok(model
        .refine_groups(codec, &[group], r, INFERENCE_SEED)?
        .remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerMeta {
    pub config: RefinerConfig,
    pub architecture_hash: String,
    pub base_hash: String,
    /// Adapter file name to its content hash.
    pub adapters: BTreeMap<String, String>,
}

pub struct RefinerCheckpoint;

impl RefinerCheckpoint {
    pub fn save(model: &RefinerModel, dir: &Path) -> Result<RefinerMeta> {
        std::fs::create_dir_all(dir.join(ADAPTER_DIR)).map_err(|e| Error::io(dir, e))?;
        autograd::io::save(&dir.join(BASE_FILE), &model.base_tensors())?;
        let mut groups: BTreeMap<String, Vec<(String, Tensor)>> = BTreeMap::new();
        for (name, t) in model.adapter_tensors() {
            let target = name
                .split(".lora.")
                .next()
                .expect("adapter name")
                .to_string();
            groups.entry(target).or_default().push((name, t));
        }
        let mut adapters = BTreeMap::new();
        for (target, tensors) in groups {
            let file = format!("{target}.safetensors");
            let bytes = autograd::io::save(&dir.join(ADAPTER_DIR).join(&file), &tensors)?;
            adapters.insert(file, hex::encode(Sha256::digest(&bytes)));
        }
        let meta = RefinerMeta {
            config: model.config,
            architecture_hash: model.architecture_hash(),
            base_hash: model.base_hash(),
            adapters,
        };
        let path = dir.join(META_FILE);
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(|e| Error::io(&path, e))?;
        Ok(meta)
    }

    /// Loads a model with a frozen base; adapters, if any, are trainable.
    pub fn load(dir: &Path) -> Result<RefinerModel> {
        let path = dir.join(META_FILE);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no refiner checkpoint at {}",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: RefinerMeta = serde_json::from_str(&text)
            .map_err(|e| Error::integrity(format!("corrupt refiner metadata: {e}")))?;
        let mut model = RefinerModel::new(0, meta.config)?;
        if model.architecture_hash() != meta.architecture_hash {
            return Err(Error::integrity("refiner architecture hash mismatch"));
        }
        let mut values: BTreeMap<String, Tensor> = autograd::io::load(&dir.join(BASE_FILE))?;
        if !meta.adapters.is_empty() {
            model.apply_lora(0)?;
        } else {
            model.freeze();
        }
        for (file, expected) in &meta.adapters {
            let p = dir.join(ADAPTER_DIR).join(file);
            let bytes = std::fs::read(&p)
                .map_err(|_| Error::integrity(format!("missing adapter file {file}")))?;
            if hex::encode(Sha256::digest(&bytes)) != *expected {
                return Err(Error::integrity(format!(
                    "adapter file {file} fails its hash check"
                )));
            }
            values.extend(autograd::io::from_bytes::<f32>(
                &bytes,
                &p.display().to_string(),
            )?);
        }
        model.load_named(&values).map_err(Error::Integrity)?;
        if model.base_hash() != meta.base_hash {
            return Err(Error::integrity(
                "refiner base weights fail their hash check",
            ));
        }
        Ok(model)
    }
}
