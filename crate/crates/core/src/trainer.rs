//! Staged training: codec, identity embedder, base U-Net, LoRA pretraining on
//! the broad synthetic regime and LoRA fine-tuning on the narrow one.
//!
//! Every step draws its data from an RNG seeded by `(seed, step)` alone, so a
//! run resumed from a checkpoint consumes exactly the stream an uninterrupted
//! run would.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use autograd::optim::{Adam, AdamConfig};
use autograd::{no_grad, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{
    discriminator_loss, generator_loss, Discriminator, LossReport, LossWeights,
};
use crate::coarse_synth::{coarsen_bundle, degrade, DegradationConfig};
use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::latent_codec::{train_codec, Codec, CodecCheckpoint, CodecConfig, CodecTrainConfig};
use crate::metrics::{
    evaluate, train_embedder, EmbedderConfig, EmbedderTrainConfig, EvalSet, IdentityEmbedder,
};
use crate::refiner::{
    add_noise, sample_noise_level, NoiseLevel, RefinerCheckpoint, RefinerConfig, RefinerModel,
    INFERENCE_NOISE, TRAIN_NOISE_LEVELS,
};
use crate::synthdata::{
    make_bundle, render_view, sample_identity_in, sample_pose, IdentityRegime, Manifest,
    SceneBundle, SUPPORTED_RESOLUTIONS,
};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const REFINER_SUBDIR: &str = "refiner";
const DISC_FILE: &str = "discriminator.safetensors";
const OPT_G_FILE: &str = "optimizer_g.safetensors";
const OPT_D_FILE: &str = "optimizer_d.safetensors";

const SALT_TRAIN_IDS: u64 = 0x7261_696E;
const SALT_EVAL_IDS: u64 = 0x6576_616C;
const SALT_STEP: u64 = 0x7374_6570;
const SALT_MODEL: u64 = 0x6D6F_6465;
const SALT_DISC: u64 = 0x6469_7363;
const SALT_LORA: u64 = 0x6C6F_7261;
const SALT_EVAL_POSES: u64 = 0x706F_7365;

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn step_rng(seed: u64, salt: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, salt), step))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Codec,
    Embedder,
    /// Full U-Net training on latent targets; stands in for the pretrained diffusion weights.
    Base,
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Embedder => "embedder",
            Stage::Base => "base",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn is_lora(self) -> bool {
        matches!(self, Stage::Pretrain | Stage::Finetune)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "codec" => Stage::Codec,
            "embedder" => Stage::Embedder,
            "base" => Stage::Base,
            "pretrain" => Stage::Pretrain,
            "finetune" => Stage::Finetune,
            _ => return Err(Error::Config(format!("unknown stage `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Full-network rate of the base stage.
    pub lr_base: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_generator: 1e-4,
            lr_discriminator: 2e-4,
            lr_base: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_identities: usize,
    pub eval_identities: usize,
    /// Identity distribution; defaults to narrow for fine-tuning, broad otherwise.
    pub regime: Option<IdentityRegime>,
    /// Dataset directory whose manifest supplies the training identity seeds.
    pub train_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_identities: 512,
            eval_identities: 32,
            regime: None,
            train_manifest: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecStageConfig {
    pub images: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CodecStageConfig {
    fn default() -> Self {
        let t = CodecTrainConfig::default();
        CodecStageConfig {
            images: 768,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderStageConfig {
    pub embed_dim: usize,
    pub identities: usize,
    pub views_per_identity: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EmbedderStageConfig {
    fn default() -> Self {
        let t = EmbedderTrainConfig::default();
        EmbedderStageConfig {
            embed_dim: EmbedderConfig::default().embed_dim,
            identities: 96,
            views_per_identity: 12,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub view_count: usize,
    pub resolution: usize,
    /// Largest |yaw| of sampled training poses, degrees.
    pub max_yaw: f32,
    pub noise_levels: Vec<f32>,
    /// Held-out snapshot period in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Checkpoint period in steps; 0 checkpoints only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub degradation: DegradationConfig,
    pub data: DataConfig,
    pub refiner: RefinerConfig,
    pub codec: CodecConfig,
    pub codec_stage: CodecStageConfig,
    pub embedder_stage: EmbedderStageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 20_000,
            batch_size: 4,
            view_count: 2,
            resolution: 64,
            max_yaw: 90.0,
            noise_levels: TRAIN_NOISE_LEVELS.to_vec(),
            eval_every: 1000,
            checkpoint_every: 1000,
            seed: 0,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            degradation: DegradationConfig::default(),
            data: DataConfig::default(),
            refiner: RefinerConfig::default(),
            codec: CodecConfig::default(),
            codec_stage: CodecStageConfig::default(),
            embedder_stage: EmbedderStageConfig::default(),
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl TrainConfig {
    /// Parses a TOML document, then applies `key=value` overrides (dotted keys
    /// address nested tables). Unknown keys are rejected.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.resolved()
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Fills stage-dependent defaults and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.data.regime.is_none() {
            self.data.regime = Some(match self.stage {
                Stage::Finetune => IdentityRegime::NARROW_DETAILED,
                _ => IdentityRegime::BROAD,
            });
        }
        self.refiner.view_count = self.view_count;
        self.validate()?;
        Ok(self)
    }

    pub fn regime(&self) -> IdentityRegime {
        self.data.regime.unwrap_or(IdentityRegime::BROAD)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.view_count == 0 || self.view_count > crate::synthdata::MAX_VIEWS {
            return bad(format!("view_count {} outside 1..=16", self.view_count));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let o = &self.optim;
        if ![
            o.lr_generator,
            o.lr_discriminator,
            o.lr_base,
            self.codec_stage.lr,
            self.embedder_stage.lr,
        ]
        .iter()
        .all(|lr| lr.is_finite() && *lr > 0.0)
        {
            return bad("learning rates must be positive".into());
        }
        if self.noise_levels.is_empty() {
            return bad("noise_levels is empty".into());
        }
        for &r in &self.noise_levels {
            NoiseLevel::new(r).map_err(|e| Error::Config(e.to_string()))?;
        }
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return bad(format!(
                "resolution {} not in {SUPPORTED_RESOLUTIONS:?}",
                self.resolution
            ));
        }
        if !(self.max_yaw > 0.0 && self.max_yaw <= 90.0) {
            return bad(format!("max_yaw {} outside (0, 90]", self.max_yaw));
        }
        if self.data.train_identities == 0 || self.data.eval_identities == 0 {
            return bad("identity pools must be non-empty".into());
        }
        if self.codec.latent_channels != self.refiner.latent_channels {
            return bad("codec and refiner latent channel counts differ".into());
        }
        self.degradation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.regime()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.refiner.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of everything that shapes training except the step budget.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        hex::encode(Sha256::digest(
            serde_json::to_vec(&c).expect("config serializes"),
        ))
    }

    pub fn noise_levels(&self) -> Vec<NoiseLevel> {
        self.noise_levels
            .iter()
            .map(|&r| NoiseLevel::new(r).expect("validated"))
            .collect()
    }

    pub fn model_seed(&self) -> u64 {
        mix(self.seed, SALT_MODEL)
    }
}

/// Training and held-out identity seeds; disjoint by construction and checked.
pub fn identity_pools(cfg: &TrainConfig) -> Result<(Vec<u64>, Vec<u64>)> {
    let train = match &cfg.data.train_manifest {
        Some(dir) => Manifest::load(dir)?.seeds(),
        None => (0..cfg.data.train_identities as u64)
            .map(|i| mix(mix(cfg.seed, SALT_TRAIN_IDS), i))
            .collect(),
    };
    let eval: Vec<u64> = (0..cfg.data.eval_identities as u64)
        .map(|i| mix(mix(cfg.seed, SALT_EVAL_IDS), i))
        .collect();
    let set: std::collections::HashSet<u64> = train.iter().copied().collect();
    if let Some(s) = eval.iter().find(|s| set.contains(s)) {
        return Err(Error::validation(format!(
            "identity {s} is in both the training and held-out pools"
        )));
    }
    Ok((train, eval))
}

/// Held-out subjects with seeded random poses, degraded once.
pub fn heldout_set(cfg: &TrainConfig, regime: &IdentityRegime, count: usize) -> Result<EvalSet> {
    let (_, eval) = identity_pools(cfg)?;
    let mut rng = step_rng(cfg.seed, SALT_EVAL_POSES, 0);
    let bundles = eval
        .iter()
        .cycle()
        .take(count)
        .map(|&s| {
            let poses: Vec<_> = (0..cfg.view_count)
                .map(|_| sample_pose(&mut rng, cfg.max_yaw))
                .collect();
            make_bundle(&sample_identity_in(s, regime), &poses, cfg.resolution)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalSet::from_bundles(&bundles, &cfg.degradation, mix(cfg.seed, SALT_EVAL_POSES))
}

/// Renders the codec corpus: random poses over both regimes, half of the
/// images degraded so the encoder also sees coarse inputs.
fn codec_images(cfg: &TrainConfig, pool: &[u64], count: usize, salt: u64) -> Result<Vec<Image>> {
    let mut rng = step_rng(cfg.seed, salt, 0);
    (0..count)
        .map(|i| {
            let s = pool[rng.random_range(0..pool.len())];
            let regime = if i % 2 == 0 {
                IdentityRegime::BROAD
            } else {
                IdentityRegime::NARROW_DETAILED
            };
            let pose = sample_pose(&mut rng, 90.0);
            let img = render_view(&sample_identity_in(s, &regime), &pose, cfg.resolution)?;
            if i % 4 < 2 {
                Ok(img)
            } else {
                degrade(&img, &pose, &cfg.degradation, rng.random())
            }
        })
        .collect()
}

pub fn train_codec_stage(cfg: &TrainConfig, out: &Path) -> Result<CodecCheckpoint> {
    let (train, eval) = identity_pools(cfg)?;
    let images = codec_images(cfg, &train, cfg.codec_stage.images, 1)?;
    let heldout = codec_images(cfg, &eval, 64, 2)?;
    let cs = &cfg.codec_stage;
    let tc = CodecTrainConfig {
        steps: cs.steps,
        batch_size: cs.batch_size,
        lr: cs.lr,
        seed: cfg.seed,
    };
    let ckpt = train_codec(&images, &heldout, cfg.model_seed(), &cfg.codec, &tc)?;
    ckpt.save(out)?;
    Ok(ckpt)
}

/// Labelled identity images over the full yaw range, a third of them degraded.
pub fn embedder_samples(
    cfg: &TrainConfig,
    seeds: &[u64],
    per_identity: usize,
    salt: u64,
) -> Result<Vec<(Image, usize)>> {
    let mut out = Vec::with_capacity(seeds.len() * per_identity);
    for (label, &s) in seeds.iter().enumerate() {
        let mut rng = step_rng(cfg.seed ^ salt, s, 0);
        let regime = if label % 2 == 0 {
            IdentityRegime::BROAD
        } else {
            IdentityRegime::NARROW_DETAILED
        };
        let id = sample_identity_in(s, &regime);
        for k in 0..per_identity {
            let pose = sample_pose(&mut rng, 90.0);
            let img = render_view(&id, &pose, cfg.resolution)?;
            let img = if k % 3 == 2 {
                degrade(&img, &pose, &cfg.degradation, rng.random())?
            } else {
                img
            };
            out.push((img, label));
        }
    }
    Ok(out)
}

pub fn train_embedder_stage(cfg: &TrainConfig, out: &Path) -> Result<IdentityEmbedder> {
    let (train, _) = identity_pools(cfg)?;
    let es = &cfg.embedder_stage;
    let ids: Vec<u64> = train.iter().copied().take(es.identities).collect();
    let samples = embedder_samples(cfg, &ids, es.views_per_identity, 11)?;
    let heldout = embedder_samples(cfg, &ids, 2, 12)?;
    let config = EmbedderConfig {
        embed_dim: es.embed_dim,
        classes: ids.len(),
    };
    let tc = EmbedderTrainConfig {
        steps: es.steps,
        batch_size: es.batch_size,
        lr: es.lr,
        seed: cfg.seed,
    };
    let emb = train_embedder(&samples, &heldout, cfg.model_seed(), config, &tc)?;
    emb.save(out)?;
    Ok(emb)
}

/// One training step's data.
struct StepBatch {
    /// `(reference, coarse views..)` per subject.
    groups: Vec<Vec<Image>>,
    truth: Vec<Image>,
    r: NoiseLevel,
    noise_seed: u64,
}

fn sample_step(
    cfg: &TrainConfig,
    pool: &[u64],
    regime: &IdentityRegime,
    step: u64,
) -> Result<StepBatch> {
    let mut rng = step_rng(cfg.seed, SALT_STEP, step);
    let mut groups = Vec::with_capacity(cfg.batch_size);
    let mut truth = Vec::with_capacity(cfg.batch_size * cfg.view_count);
    for _ in 0..cfg.batch_size {
        let s = pool[rng.random_range(0..pool.len())];
        let poses: Vec<_> = (0..cfg.view_count)
            .map(|_| sample_pose(&mut rng, cfg.max_yaw))
            .collect();
        let bundle = make_bundle(&sample_identity_in(s, regime), &poses, cfg.resolution)?;
        let coarse = coarsen_bundle(&bundle, &cfg.degradation, rng.random())?;
        let SceneBundle {
            reference, targets, ..
        } = bundle;
        groups.push(
            std::iter::once(reference)
                .chain(coarse.into_iter().map(|c| c.image))
                .collect(),
        );
        truth.extend(targets.into_iter().map(|t| t.image));
    }
    let r = sample_noise_level(&mut rng, &cfg.noise_levels());
    Ok(StepBatch {
        groups,
        truth,
        r,
        noise_seed: rng.random(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: u64,
    pub r: Option<f32>,
    /// Base stage objective.
    pub latent_l2: Option<f64>,
    pub losses: Option<LossReport>,
    pub eval: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: Stage,
    pub step: u64,
    pub config_hash: String,
    pub codec_hash: String,
    pub base_hash: String,
    pub metrics: BTreeMap<String, f64>,
    /// Path relative to the checkpoint directory to hex SHA-256.
    pub files: BTreeMap<String, String>,
    pub optimizer_steps: [u64; 2],
    pub train_identities: Vec<u64>,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != CHECKPOINT_MANIFEST) {
            let rel = p
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, file_hash(&p)?);
        }
    }
    Ok(())
}

impl CheckpointManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no training checkpoint at {}",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::integrity(format!("corrupt checkpoint manifest: {e}")))
    }

    /// Checks every listed file against its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (rel, expected) in &self.files {
            let p = dir.join(rel);
            if !p.exists() {
                return Err(Error::integrity(format!(
                    "checkpoint file {rel} is missing"
                )));
            }
            if file_hash(&p)? != *expected {
                return Err(Error::integrity(format!(
                    "checkpoint file {rel} fails its hash check"
                )));
            }
        }
        Ok(())
    }
}

/// Refiner plus its discriminator and optimizer state.
#[derive(Debug)]
pub struct TrainState {
    pub model: RefinerModel,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

/// A verified checkpoint with its training state.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, TrainState)> {
    let manifest = CheckpointManifest::load(dir)?;
    manifest.verify(dir)?;
    let mut model = RefinerCheckpoint::load(&dir.join(REFINER_SUBDIR))?;
    if manifest.stage == Stage::Base {
        model.unfreeze();
    }
    if model.base_hash() != manifest.base_hash {
        return Err(Error::integrity(
            "checkpoint base weights differ from the manifest",
        ));
    }
    let mut disc = Discriminator::new(0);
    disc.load_named(&autograd::io::load(&dir.join(DISC_FILE))?)
        .map_err(Error::Integrity)?;
    let mut opt_g = Adam::new(AdamConfig::with_lr(1.0));
    let mut opt_d = Adam::new(AdamConfig::with_lr(1.0));
    opt_g
        .load_state(
            manifest.optimizer_steps[0],
            &autograd::io::load(&dir.join(OPT_G_FILE))?,
        )
        .map_err(Error::Integrity)?;
    opt_d
        .load_state(
            manifest.optimizer_steps[1],
            &autograd::io::load(&dir.join(OPT_D_FILE))?,
        )
        .map_err(Error::Integrity)?;
    let step = manifest.step;
    Ok((
        manifest,
        TrainState {
            model,
            disc,
            opt_g,
            opt_d,
            step,
        },
    ))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub manifest: CheckpointManifest,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub checkpoint_dir: PathBuf,
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    codec: &'a Codec,
    pool: Vec<u64>,
    regime: IdentityRegime,
    eval: EvalSet,
    out: &'a Path,
    codec_hash: String,
    base_hash: String,
    last_good: Option<u64>,
    metrics: BTreeMap<String, f64>,
}

impl Run<'_> {
    fn abort(&self, step: u64, what: &str) -> Error {
        let last = match self.last_good {
            Some(s) => format!(
                "last good checkpoint: {} (step {s})",
                self.out.join(CHECKPOINT_DIR).display()
            ),
            None => "no checkpoint written yet".into(),
        };
        Error::Numerical {
            step,
            msg: format!("{what} is not finite; {last}"),
        }
    }

    fn snapshot(&mut self, model: &RefinerModel) -> Result<BTreeMap<String, f64>> {
        let report = evaluate(
            model,
            self.codec,
            None,
            &self.eval,
            NoiseLevel::new(INFERENCE_NOISE)?,
            "",
        )?;
        let (r, c) = (report.refined.expect("set"), report.coarse.expect("set"));
        let m = BTreeMap::from([
            ("refined_psnr".to_string(), r.psnr),
            ("refined_ssim".to_string(), r.ssim),
            ("coarse_psnr".to_string(), c.psnr),
            ("coarse_ssim".to_string(), c.ssim),
        ]);
        self.metrics.extend(m.clone());
        Ok(m)
    }

    fn save(&mut self, st: &TrainState) -> Result<CheckpointManifest> {
        let final_dir = self.out.join(CHECKPOINT_DIR);
        let tmp = self.out.join(format!("{CHECKPOINT_DIR}.partial"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        RefinerCheckpoint::save(&st.model, &tmp.join(REFINER_SUBDIR))?;
        autograd::io::save(&tmp.join(DISC_FILE), &st.disc.named_tensors())?;
        let (sg, tg) = st.opt_g.state();
        let (sd, td) = st.opt_d.state();
        autograd::io::save(&tmp.join(OPT_G_FILE), &tg)?;
        autograd::io::save(&tmp.join(OPT_D_FILE), &td)?;
        let mut files = BTreeMap::new();
        collect_files(&tmp, &tmp, &mut files)?;
        let manifest = CheckpointManifest {
            stage: self.cfg.stage,
            step: st.step,
            config_hash: self.cfg.config_hash(),
            codec_hash: self.codec_hash.clone(),
            base_hash: st.model.base_hash(),
            metrics: self.metrics.clone(),
            files,
            optimizer_steps: [sg, sd],
            train_identities: self.pool.clone(),
        };
        let mp = tmp.join(CHECKPOINT_MANIFEST);
        std::fs::write(
            &mp,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(&mp, e))?;
        if final_dir.exists() {
            std::fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
        }
        std::fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
        self.last_good = Some(st.step);
        Ok(manifest)
    }

    fn base_step(&self, st: &mut TrainState, b: &StepBatch) -> Result<LogRecord> {
        let refs: Vec<Vec<&Image>> = b.groups.iter().map(|g| g.iter().collect()).collect();
        let z = st.model.encode_groups(self.codec, &refs)?;
        let truth: Vec<&Image> = b.truth.iter().collect();
        let target = no_grad(|| self.codec.encode_tensor(&stack(&truth)));
        let out = st.model.unet_forward(&add_noise(&z, b.r, b.noise_seed))?;
        let loss = out.novel_views().mse(&target);
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(self.abort(st.step, "latent loss"));
        }
        let grads = loss.backward();
        st.opt_g.step(&mut st.model, &grads);
        Ok(LogRecord {
            stage: Stage::Base,
            step: st.step,
            r: Some(b.r.value()),
            latent_l2: Some(value),
            losses: None,
            eval: None,
        })
    }

    fn adversarial_step(&self, st: &mut TrainState, b: &StepBatch) -> Result<LogRecord> {
        let refs: Vec<Vec<&Image>> = b.groups.iter().map(|g| g.iter().collect()).collect();
        let z = st.model.encode_groups(self.codec, &refs)?;
        let out = st.model.unet_forward(&add_noise(&z, b.r, b.noise_seed))?;
        let refined = self.codec.decode_tensor(&out.novel_views());
        let truth = stack::<f32>(&b.truth.iter().collect::<Vec<_>>());
        let mut critic = st.disc.clone();
        critic.freeze();
        let (loss, mut report) =
            generator_loss(&refined, &truth, &critic, self.codec, &self.cfg.loss)?;
        if !report.total_g.is_finite() {
            return Err(self.abort(st.step, "generator loss"));
        }
        let grads = loss.backward();
        st.opt_g.step(&mut st.model, &grads);

        let d_loss = discriminator_loss(&refined.detach(), &truth, &st.disc);
        let d = d_loss.item() as f64;
        if !d.is_finite() {
            return Err(self.abort(st.step, "discriminator loss"));
        }
        let grads = d_loss.backward();
        st.opt_d.step(&mut st.disc, &grads);
        report.gan_d = d;
        Ok(LogRecord {
            stage: self.cfg.stage,
            step: st.step,
            r: Some(b.r.value()),
            latent_l2: None,
            losses: Some(report),
            eval: None,
        })
    }

    fn run(mut self, mut st: TrainState, log_file: File) -> Result<TrainOutcome> {
        let mut writer = BufWriter::new(log_file);
        let mut log = Vec::new();
        let out = self.out.to_path_buf();
        let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(writer, "{line}").map_err(|e| Error::io(&out, e))?;
            log.push(rec);
            Ok(())
        };
        let eval_record = |step, m| LogRecord {
            stage: self.cfg.stage,
            step,
            r: None,
            latent_l2: None,
            losses: None,
            eval: Some(m),
        };
        if st.step == 0 && self.cfg.steps == 0 {
            let m = self.snapshot(&st.model)?;
            emit(eval_record(0, m), &mut log)?;
        }
        while st.step < self.cfg.steps {
            let batch = sample_step(self.cfg, &self.pool, &self.regime, st.step)?;
            let rec = if self.cfg.stage == Stage::Base {
                self.base_step(&mut st, &batch)?
            } else {
                self.adversarial_step(&mut st, &batch)?
            };
            emit(rec, &mut log)?;
            st.step += 1;
            let at_end = st.step == self.cfg.steps;
            if (self.cfg.eval_every > 0 && st.step.is_multiple_of(self.cfg.eval_every)) || at_end {
                let m = self.snapshot(&st.model)?;
                emit(eval_record(st.step, m), &mut log)?;
            }
            if self.cfg.checkpoint_every > 0
                && st.step.is_multiple_of(self.cfg.checkpoint_every)
                && !at_end
            {
                self.save(&st)?;
            }
        }
        writer.flush().map_err(|e| Error::io(self.out, e))?;
        drop(writer);
        if self.codec.weights_hash() != self.codec_hash {
            return Err(Error::integrity("codec weights changed during training"));
        }
        if self.cfg.stage.is_lora() && st.model.base_hash() != self.base_hash {
            return Err(Error::integrity(
                "frozen base weights changed during training",
            ));
        }
        let manifest = self.save(&st)?;
        Ok(TrainOutcome {
            manifest,
            state: st,
            log,
            checkpoint_dir: self.out.join(CHECKPOINT_DIR),
        })
    }
}

fn open_log(out: &Path, append: bool) -> Result<File> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join(LOG_FILE);
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&p)
        .map_err(|e| Error::io(&p, e))
}

fn new_run<'a>(
    cfg: &'a TrainConfig,
    codec: &'a Codec,
    out: &'a Path,
    base_hash: String,
) -> Result<Run<'a>> {
    let (pool, _) = identity_pools(cfg)?;
    let regime = cfg.regime();
    let eval = heldout_set(cfg, &regime, cfg.data.eval_identities)?;
    Ok(Run {
        cfg,
        codec,
        pool,
        regime,
        eval,
        out,
        codec_hash: codec.weights_hash(),
        base_hash,
        last_good: None,
        metrics: BTreeMap::new(),
    })
}

fn optimizers(cfg: &TrainConfig) -> (Adam, Adam) {
    let g = if cfg.stage == Stage::Base {
        cfg.optim.lr_base
    } else {
        cfg.optim.lr_generator
    };
    (
        Adam::new(AdamConfig::with_lr(g)),
        Adam::new(AdamConfig::with_lr(cfg.optim.lr_discriminator)),
    )
}

/// Trains a base, pretrain or finetune stage from scratch or from `init`.
///
/// `base` starts from random weights (or `init`) and updates everything.
/// `pretrain` takes the base from `init` (random if absent), freezes it and
/// attaches fresh adapters. `finetune` continues the adapters and the
/// discriminator of an `init` checkpoint.
pub fn train_refiner_stage(
    cfg: &TrainConfig,
    codec: &Codec,
    init: Option<&Path>,
    out: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !matches!(cfg.stage, Stage::Base | Stage::Pretrain | Stage::Finetune) {
        return Err(Error::Config(format!(
            "stage `{}` does not train the refiner",
            cfg.stage
        )));
    }
    if codec.config.latent_channels != cfg.refiner.latent_channels {
        return Err(Error::Config(
            "codec latent channels differ from the refiner's".into(),
        ));
    }
    let loaded = init.map(load_checkpoint).transpose()?;
    if cfg.stage == Stage::Finetune && loaded.is_none() {
        return Err(Error::Config(
            "fine-tuning needs an --init checkpoint".into(),
        ));
    }
    if let Some((m, st)) = &loaded {
        if st.model.config != cfg.refiner {
            return Err(Error::Config(format!(
                "init checkpoint (stage {}) has a different refiner config",
                m.stage
            )));
        }
    }
    let (mut model, disc) = match loaded {
        Some((_, st)) => (st.model, Some(st.disc)),
        None => (RefinerModel::new(cfg.model_seed(), cfg.refiner)?, None),
    };
    match cfg.stage {
        Stage::Base => {
            if model.has_adapters() {
                return Err(Error::Config(
                    "base training cannot start from an adapted model".into(),
                ));
            }
            model.unfreeze();
        }
        Stage::Pretrain => {
            if model.has_adapters() {
                model.merge_lora()?;
            }
            model.apply_lora(mix(cfg.seed, SALT_LORA))?;
        }
        Stage::Finetune => {
            if !model.has_adapters() {
                model.apply_lora(mix(cfg.seed, SALT_LORA))?;
            }
        }
        _ => unreachable!(),
    }
    let disc = match (cfg.stage, disc) {
        (Stage::Finetune, Some(d)) => d,
        _ => Discriminator::new(mix(cfg.seed, SALT_DISC)),
    };
    let (opt_g, opt_d) = optimizers(cfg);
    let base_hash = model.base_hash();
    let run = new_run(cfg, codec, out, base_hash)?;
    let log = open_log(out, false)?;
    run.run(
        TrainState {
            model,
            disc,
            opt_g,
            opt_d,
            step: 0,
        },
        log,
    )
}

/// Continues the run stored at `checkpoint` up to `cfg.steps`, writing into `out`.
pub fn resume(
    checkpoint: &Path,
    cfg: &TrainConfig,
    codec: &Codec,
    out: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (manifest, mut st) = load_checkpoint(checkpoint)?;
    if manifest.config_hash != cfg.config_hash() {
        return Err(Error::Config(
            "configuration changed since the checkpoint was written; refusing to resume".into(),
        ));
    }
    if manifest.codec_hash != codec.weights_hash() {
        return Err(Error::integrity(
            "codec differs from the one the checkpoint was trained with",
        ));
    }
    if manifest.step > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {}, beyond the {} requested",
            manifest.step, cfg.steps
        )));
    }
    let (g, d) = optimizers(cfg);
    st.opt_g.config = g.config;
    st.opt_d.config = d.config;
    let mut run = new_run(cfg, codec, out, manifest.base_hash.clone())?;
    run.last_good = Some(manifest.step);
    run.metrics = manifest.metrics.clone();
    let log = open_log(out, true)?;
    run.run(st, log)
}
