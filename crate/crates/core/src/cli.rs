//! Command-line front end.
//!
//! Every command resolves a [`TrainConfig`] from the optional config file,
//! then `--set key=value` overrides, then command flags (later wins), and
//! writes the result to `<out>/<command>.resolved.toml` together with a
//! `<command>.run.json` recording how it was assembled.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coarse_synth::{degrade, reproject_reference};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent_codec::CodecCheckpoint;
use crate::metrics::{self, EvalSet, IdentityEmbedder, ROTATION_ANGLES};
use crate::refiner::{
    NoiseLevel, RefinerModel, INFERENCE_NOISE, INFERENCE_SEED, TRAIN_NOISE_LEVELS,
};
use crate::synthdata::{
    make_bundle, read_dataset, sample_identity_in, sample_pose, write_dataset, CameraPose, Manifest,
};
use crate::trainer::{
    self, identity_pools, CheckpointManifest, Stage, TrainConfig, CHECKPOINT_DIR,
};

#[derive(Debug, Parser)]
#[command(
    name = "portrait-refine",
    version,
    about = "Single-step multi-view refinement of coarse portrait views"
)]
pub struct Cli {
    /// TOML configuration document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set optim.lr_generator=2e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Artifact root: datasets, checkpoints, reports.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural multi-view dataset.
    GenerateData(GenerateArgs),
    /// Train one stage: codec, embedder, base, pretrain or finetune.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out dataset.
    Eval(EvalArgs),
    /// Refinement quality at fixed inference noise levels.
    AblateNoise(AblateNoiseArgs),
    /// Refinement quality across target yaw angles.
    AblateRotation(AblateRotationArgs),
    /// Refine coarse views of one reference image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub identities: usize,
    #[arg(long)]
    pub views: usize,
    #[arg(long)]
    pub res: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Output directory; defaults to `<out>/data/<split>`.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: String,
    /// Checkpoint to start from (base for pretrain, pretrain for finetune).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue the stage's existing checkpoint instead of starting over.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Training checkpoint directory; defaults to `<out>/finetune/checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    pub embedder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Held-out dataset written by `generate-data --split eval`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = INFERENCE_NOISE)]
    pub r: f32,
}

#[derive(Debug, Args)]
pub struct AblateNoiseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = TRAIN_NOISE_LEVELS.to_vec())]
    pub levels: Vec<f32>,
}

#[derive(Debug, Args)]
pub struct AblateRotationArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = ROTATION_ANGLES.to_vec())]
    pub angles: Vec<f32>,
    /// Held-out identities per angle; defaults to `data.eval_identities`.
    #[arg(long)]
    pub identities: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    pub yaws: Vec<f32>,
    /// Output directory; defaults to `<out>/render`.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    config_file: Option<&'a Path>,
    overrides: &'a [(String, String)],
    config_hash: String,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))
        })
        .collect()
}

impl Cli {
    fn command_name(&self) -> &'static str {
        match self.command {
            Command::GenerateData(_) => "generate-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::AblateNoise(_) => "ablate-noise",
            Command::AblateRotation(_) => "ablate-rotation",
            Command::Render(_) => "render",
        }
    }

    /// Overrides implied by command flags, applied after `--set`.
    fn flag_overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seed".into(), s.to_string()));
        }
        match &self.command {
            Command::GenerateData(g) => {
                o.push(("view_count".into(), g.views.to_string()));
                o.push(("resolution".into(), g.res.to_string()));
            }
            Command::Train(t) => {
                o.push(("stage".into(), format!("\"{}\"", t.stage)));
                if let Some(s) = t.steps {
                    o.push(("steps".into(), s.to_string()));
                }
            }
            _ => {}
        }
        o
    }

    fn resolve(&self) -> Result<(TrainConfig, Vec<(String, String)>)> {
        let mut overrides = parse_overrides(&self.overrides)?;
        overrides.extend(self.flag_overrides());
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Ok((TrainConfig::from_toml(&text, &overrides)?, overrides))
    }

    fn snapshot(&self, cfg: &TrainConfig, overrides: &[(String, String)]) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let name = self.command_name();
        let p = self.out.join(format!("{name}.resolved.toml"));
        std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
        let record = RunRecord {
            command: name,
            argv: std::env::args().collect(),
            config_file: self.config.as_deref(),
            overrides,
            config_hash: cfg.config_hash(),
        };
        let p = self.out.join(format!("{name}.run.json"));
        std::fs::write(
            &p,
            serde_json::to_string_pretty(&record).expect("record serializes"),
        )
        .map_err(|e| Error::io(&p, e))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let (cfg, overrides) = cli.resolve()?;
    cli.snapshot(&cfg, &overrides)?;
    match &cli.command {
        Command::GenerateData(a) => generate_data(cli, &cfg, a),
        Command::Train(a) => train(cli, &cfg, a),
        Command::Eval(a) => eval(cli, &cfg, a),
        Command::AblateNoise(a) => ablate_noise(cli, &cfg, a),
        Command::AblateRotation(a) => ablate_rotation(cli, &cfg, a),
        Command::Render(a) => render(cli, &cfg, a),
    }
}

fn generate_data(cli: &Cli, cfg: &TrainConfig, a: &GenerateArgs) -> Result<()> {
    if a.identities == 0 {
        return Err(Error::validation("--identities must be positive"));
    }
    let (train, eval) = identity_pools(&TrainConfig {
        data: trainer::DataConfig {
            train_identities: a.identities.max(1),
            eval_identities: a.identities.max(1),
            ..cfg.data.clone()
        },
        ..cfg.clone()
    })?;
    let seeds = match a.split.as_str() {
        "train" => train,
        "eval" => eval,
        other => {
            return Err(Error::validation(format!(
                "split must be `train` or `eval`, got `{other}`"
            )))
        }
    };
    let regime = cfg.regime();
    let mut rng = ChaCha8Rng::seed_from_u64(trainer::mix(cfg.seed, a.split.len() as u64));
    let bundles = seeds
        .iter()
        .map(|&s| {
            let poses: Vec<_> = (0..a.views)
                .map(|_| sample_pose(&mut rng, cfg.max_yaw))
                .collect();
            make_bundle(&sample_identity_in(s, &regime), &poses, a.res)
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = a
        .dir
        .clone()
        .unwrap_or_else(|| cli.out.join("data").join(&a.split));
    let manifest = write_dataset(&bundles, &dir, &a.split, &regime)?;
    println!(
        "wrote {} bundles to {} (manifest {})",
        manifest.bundles.len(),
        dir.display(),
        manifest.hash()
    );
    Ok(())
}

fn codec_dir(cli: &Cli, m: Option<&ModelArgs>) -> PathBuf {
    m.and_then(|m| m.codec.clone())
        .unwrap_or_else(|| cli.out.join("codec"))
}

fn stage_dir(cli: &Cli, stage: Stage) -> PathBuf {
    cli.out.join(stage.name())
}

fn train(cli: &Cli, cfg: &TrainConfig, a: &TrainArgs) -> Result<()> {
    match cfg.stage {
        Stage::Codec => {
            let ck = trainer::train_codec_stage(cfg, &codec_dir(cli, None))?;
            println!(
                "codec trained: held-out PSNR {:.2} dB",
                ck.meta.heldout_psnr
            );
        }
        Stage::Embedder => {
            let e = trainer::train_embedder_stage(cfg, &cli.out.join("embedder"))?;
            let acc = e.meta.as_ref().map_or(f64::NAN, |m| m.heldout_accuracy);
            println!("embedder trained: held-out accuracy {acc:.3}");
        }
        stage => {
            let codec = CodecCheckpoint::load(&codec_dir(cli, None))?.codec;
            let out = stage_dir(cli, stage);
            let outcome = if a.resume {
                trainer::resume(&out.join(CHECKPOINT_DIR), cfg, &codec, &out)?
            } else {
                let init = match (&a.init, stage) {
                    (Some(p), _) => Some(p.clone()),
                    (None, Stage::Pretrain) => {
                        Some(stage_dir(cli, Stage::Base).join(CHECKPOINT_DIR))
                            .filter(|p| p.exists())
                    }
                    (None, Stage::Finetune) => {
                        Some(stage_dir(cli, Stage::Pretrain).join(CHECKPOINT_DIR))
                    }
                    _ => None,
                };
                trainer::train_refiner_stage(cfg, &codec, init.as_deref(), &out)?
            };
            println!(
                "{stage} at step {}: {:?} -> {}",
                outcome.manifest.step,
                outcome.manifest.metrics,
                outcome.checkpoint_dir.display()
            );
        }
    }
    Ok(())
}

struct Loaded {
    model: RefinerModel,
    manifest: CheckpointManifest,
    codec: CodecCheckpoint,
    embedder: IdentityEmbedder,
}

fn load_models(cli: &Cli, m: &ModelArgs) -> Result<Loaded> {
    let ckpt = m
        .checkpoint
        .clone()
        .unwrap_or_else(|| stage_dir(cli, Stage::Finetune).join(CHECKPOINT_DIR));
    let (manifest, state) = trainer::load_checkpoint(&ckpt)?;
    let codec = CodecCheckpoint::load(&codec_dir(cli, Some(m)))?;
    if codec.meta.weights_hash != manifest.codec_hash {
        return Err(Error::integrity(
            "codec differs from the one the checkpoint was trained with",
        ));
    }
    let embedder = IdentityEmbedder::load(
        &m.embedder
            .clone()
            .unwrap_or_else(|| cli.out.join("embedder")),
    )?;
    Ok(Loaded {
        model: state.model,
        manifest,
        codec,
        embedder,
    })
}

fn ensure_heldout(manifest: &Manifest, ckpt: &CheckpointManifest) -> Result<()> {
    let train: std::collections::HashSet<u64> = ckpt.train_identities.iter().copied().collect();
    if let Some(s) = manifest.seeds().into_iter().find(|s| train.contains(s)) {
        return Err(Error::validation(format!(
            "evaluation identity {s} was used for training"
        )));
    }
    Ok(())
}

fn load_eval_set(cfg: &TrainConfig, dir: &Path, l: &Loaded) -> Result<EvalSet> {
    let (manifest, bundles) = read_dataset(dir)?;
    ensure_heldout(&manifest, &l.manifest)?;
    EvalSet::from_bundles(&bundles, &cfg.degradation, cfg.seed)
}

fn report_dir(cli: &Cli) -> PathBuf {
    cli.out.join("reports")
}

fn eval(cli: &Cli, cfg: &TrainConfig, a: &EvalArgs) -> Result<()> {
    let l = load_models(cli, &a.model)?;
    let set = load_eval_set(cfg, &a.data, &l)?;
    let (_, bundles) = read_dataset(&a.data)?;
    let mut report = metrics::evaluate(
        &l.model,
        &l.codec.codec,
        Some(&l.embedder),
        &set,
        NoiseLevel::new(a.r)?,
        &cfg.config_hash(),
    )?;
    report.timing = Some(metrics::timing(
        &l.model,
        &l.codec.codec,
        &bundles[0],
        &cfg.degradation,
        20,
    )?);
    report.write(&report_dir(cli), "eval")?;
    let (r, c) = (report.refined.expect("set"), report.coarse.expect("set"));
    println!(
        "refined PSNR {:.2} SSIM {:.4} | coarse PSNR {:.2} SSIM {:.4}",
        r.psnr, r.ssim, c.psnr, c.ssim
    );
    Ok(())
}

fn ablate_noise(cli: &Cli, cfg: &TrainConfig, a: &AblateNoiseArgs) -> Result<()> {
    for &r in &a.levels {
        NoiseLevel::new(r)?;
    }
    let l = load_models(cli, &a.model)?;
    let set = match &a.data {
        Some(d) => load_eval_set(cfg, d, &l)?,
        None => trainer::heldout_set(cfg, &cfg.regime(), cfg.data.eval_identities)?,
    };
    let report = metrics::ablate_noise(
        &l.model,
        &l.codec.codec,
        Some(&l.embedder),
        &set,
        &a.levels,
        &cfg.config_hash(),
    )?;
    report.write(&report_dir(cli), "ablate_noise")?;
    print!("{}", report.noise_csv());
    Ok(())
}

fn ablate_rotation(cli: &Cli, cfg: &TrainConfig, a: &AblateRotationArgs) -> Result<()> {
    let l = load_models(cli, &a.model)?;
    let (_, eval) = identity_pools(cfg)?;
    let regime = cfg.regime();
    let n = a.identities.unwrap_or(cfg.data.eval_identities);
    let ids: Vec<_> = eval
        .iter()
        .cycle()
        .take(n)
        .map(|&s| sample_identity_in(s, &regime))
        .collect();
    let report = metrics::ablate_rotation(
        &l.model,
        &l.codec.codec,
        Some(&l.embedder),
        &ids,
        &a.angles,
        cfg.resolution,
        &cfg.degradation,
        cfg.seed,
        &cfg.config_hash(),
    )?;
    report.write(&report_dir(cli), "ablate_rotation")?;
    print!("{}", report.angle_csv());
    Ok(())
}

fn yaw_tag(yaw: f32) -> String {
    format!("{:+04}", yaw.round() as i32)
}

fn render(cli: &Cli, cfg: &TrainConfig, a: &RenderArgs) -> Result<()> {
    if !a.model.checkpoint.as_ref().is_none_or(|p| p.exists()) {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            a.model.checkpoint.as_ref().unwrap().display()
        )));
    }
    let ckpt = a
        .model
        .checkpoint
        .clone()
        .unwrap_or_else(|| stage_dir(cli, Stage::Finetune).join(CHECKPOINT_DIR));
    let (manifest, state) = trainer::load_checkpoint(&ckpt)?;
    let codec = CodecCheckpoint::load(&codec_dir(cli, Some(&a.model)))?;
    if codec.meta.weights_hash != manifest.codec_hash {
        return Err(Error::integrity(
            "codec differs from the one the checkpoint was trained with",
        ));
    }
    let reference = Image::load_png(&a.reference)?;
    let coarse = a
        .yaws
        .iter()
        .enumerate()
        .map(|(i, &yaw)| {
            let warped = reproject_reference(&reference, yaw)?;
            degrade(
                &warped,
                &CameraPose::yaw(yaw),
                &cfg.degradation,
                trainer::mix(cfg.seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let v = state.model.config.view_count;
    let mut refined = Vec::with_capacity(coarse.len());
    for chunk in coarse.chunks(v) {
        // pad the last group by repeating its final view
        let mut group: Vec<&Image> = std::iter::once(&reference).chain(chunk).collect();
        while group.len() < v + 1 {
            group.push(chunk.last().expect("non-empty chunk"));
        }
        let out = state.model.refine_groups(
            &codec.codec,
            &[group],
            NoiseLevel::new(INFERENCE_NOISE)?,
            INFERENCE_SEED,
        )?;
        refined.extend(out.into_iter().flatten().take(chunk.len()));
    }
    let dir = a.dir.clone().unwrap_or_else(|| cli.out.join("render"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for ((yaw, c), r) in a.yaws.iter().zip(&coarse).zip(&refined) {
        c.save_png(&dir.join(format!("coarse_yaw{}.png", yaw_tag(*yaw))))?;
        r.save_png(&dir.join(format!("refined_yaw{}.png", yaw_tag(*yaw))))?;
    }
    println!(
        "wrote {} refined and {} coarse views to {}",
        refined.len(),
        coarse.len(),
        dir.display()
    );
    Ok(())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
