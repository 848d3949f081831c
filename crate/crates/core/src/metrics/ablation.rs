use std::time::Instant;

use super::embedder::{cosine, IdentityEmbedder};
use super::fid::{fid_proxy, FID_MIN_SAMPLES};
use super::report::{AngleRow, EvalReport, MetricSummary, NoiseRow, Timing};
use super::{l2_error, lpips_proxy_batch, mean, psnr_from_mse, ssim};
use crate::coarse_synth::{degrade, view_seed, DegradationConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent_codec::Codec;
use crate::refiner::{NoiseLevel, RefinerModel, INFERENCE_SEED};
use crate::synthdata::{make_bundle, CameraPose, IdentityParams, SceneBundle};

pub const ROTATION_ANGLES: [f32; 7] = [-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0];
const CHUNK: usize = 8;

/// One subject: reference, ground-truth targets and their coarse versions.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub identity_seed: u64,
    pub reference: Image,
    pub ground_truth: Vec<Image>,
    pub coarse: Vec<Image>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    /// Degrades every target of every bundle with per-view seeds.
    pub fn from_bundles(
        bundles: &[SceneBundle],
        deg: &DegradationConfig,
        seed: u64,
    ) -> Result<Self> {
        let items = bundles
            .iter()
            .map(|b| {
                let coarse = b
                    .targets
                    .iter()
                    .enumerate()
                    .map(|(v, t)| {
                        degrade(&t.image, &t.pose, deg, view_seed(seed, b.identity.seed, v))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EvalItem {
                    identity_seed: b.identity.seed,
                    reference: b.reference.clone(),
                    ground_truth: b.targets.iter().map(|t| t.image.clone()).collect(),
                    coarse,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet { items })
    }

    /// Every identity with `views` copies of one pose, each degraded with its own seed.
    pub fn at_pose(
        identities: &[IdentityParams],
        pose: CameraPose,
        views: usize,
        resolution: usize,
        deg: &DegradationConfig,
        seed: u64,
    ) -> Result<Self> {
        let bundles = identities
            .iter()
            .map(|id| make_bundle(id, &vec![pose; views], resolution))
            .collect::<Result<Vec<_>>>()?;
        Self::from_bundles(&bundles, deg, seed)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn views(&self) -> usize {
        self.items.first().map_or(0, |i| i.ground_truth.len())
    }
}

/// Refined views for every item, batched `CHUNK` subjects per U-Net pass.
pub fn refine_set(
    model: &RefinerModel,
    codec: &Codec,
    set: &EvalSet,
    r: NoiseLevel,
) -> Result<Vec<Vec<Image>>> {
    if set.views() != model.config.view_count {
        return Err(Error::validation(format!(
            "evaluation set has {} views per subject, model expects {}",
            set.views(),
            model.config.view_count
        )));
    }
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.items.chunks(CHUNK) {
        let groups: Vec<Vec<&Image>> = chunk
            .iter()
            .map(|it| std::iter::once(&it.reference).chain(&it.coarse).collect())
            .collect();
        out.extend(model.refine_groups(codec, &groups, r, INFERENCE_SEED)?);
    }
    Ok(out)
}

/// Per-view summaries of `outputs` against `truth`.
fn summarize(
    outputs: &[&Image],
    truth: &[&Image],
    codec: &Codec,
    embedder: Option<&IdentityEmbedder>,
) -> Result<MetricSummary> {
    if outputs.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    let mut l2 = Vec::with_capacity(outputs.len());
    let mut psnrs = Vec::with_capacity(outputs.len());
    let mut ssims = Vec::with_capacity(outputs.len());
    for (o, t) in outputs.iter().zip(truth) {
        let e = l2_error(o, t)?;
        l2.push(e);
        psnrs.push(psnr_from_mse(e));
        ssims.push(ssim(o, t)?);
    }
    let mut lp = Vec::with_capacity(outputs.len());
    for (o, t) in outputs.chunks(32).zip(truth.chunks(32)) {
        lp.extend(lpips_proxy_batch(o, t, codec));
    }
    let id = match embedder {
        Some(e) => {
            let (eo, et) = (e.embed(outputs)?, e.embed(truth)?);
            mean(
                &eo.iter()
                    .zip(&et)
                    .map(|(a, b)| cosine(a, b))
                    .collect::<Vec<_>>(),
            )
        }
        None => f64::NAN,
    };
    Ok(MetricSummary {
        count: outputs.len(),
        psnr: mean(&psnrs),
        ssim: mean(&ssims),
        l2: mean(&l2),
        lpips_proxy: mean(&lp),
        id_proxy: id,
    })
}

fn flat<'a>(nested: impl Iterator<Item = &'a Vec<Image>>) -> Vec<&'a Image> {
    nested.flatten().collect()
}

/// Refined and coarse summaries, a per-view-slot breakdown and, when the set
/// is large enough, the Fréchet proxy between refined and true views.
pub fn evaluate(
    model: &RefinerModel,
    codec: &Codec,
    embedder: Option<&IdentityEmbedder>,
    set: &EvalSet,
    r: NoiseLevel,
    config_hash: &str,
) -> Result<EvalReport> {
    let refined = refine_set(model, codec, set, r)?;
    let out = flat(refined.iter());
    let gt = flat(set.items.iter().map(|i| &i.ground_truth));
    let coarse = flat(set.items.iter().map(|i| &i.coarse));
    let mut report = EvalReport::new(config_hash);
    report.refined = Some(summarize(&out, &gt, codec, embedder)?);
    report.coarse = Some(summarize(&coarse, &gt, codec, embedder)?);
    for v in 0..set.views() {
        let o: Vec<&Image> = refined.iter().map(|r| &r[v]).collect();
        let t: Vec<&Image> = set.items.iter().map(|i| &i.ground_truth[v]).collect();
        report.per_view.push(summarize(&o, &t, codec, embedder)?);
    }
    if let Some(e) = embedder {
        if out.len() >= FID_MIN_SAMPLES {
            report.fid_proxy = Some(fid_proxy(&out, &gt, e)?);
        }
    }
    report.check_finite_where_defined()?;
    Ok(report)
}

/// Refinement quality at each fixed inference noise level.
pub fn ablate_noise(
    model: &RefinerModel,
    codec: &Codec,
    embedder: Option<&IdentityEmbedder>,
    set: &EvalSet,
    levels: &[f32],
    config_hash: &str,
) -> Result<EvalReport> {
    let levels = levels
        .iter()
        .map(|&r| NoiseLevel::new(r))
        .collect::<Result<Vec<_>>>()?;
    let gt = flat(set.items.iter().map(|i| &i.ground_truth));
    let mut report = EvalReport::new(config_hash);
    for r in levels {
        let refined = refine_set(model, codec, set, r)?;
        let out = flat(refined.iter());
        report.noise.push(NoiseRow {
            r: r.value(),
            refined: summarize(&out, &gt, codec, embedder)?,
        });
    }
    report.check_finite_where_defined()?;
    Ok(report)
}

/// Refinement quality with every novel view placed at each yaw in `angles`.
#[allow(clippy::too_many_arguments)]
pub fn ablate_rotation(
    model: &RefinerModel,
    codec: &Codec,
    embedder: Option<&IdentityEmbedder>,
    identities: &[IdentityParams],
    angles: &[f32],
    resolution: usize,
    deg: &DegradationConfig,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(config_hash);
    for &yaw in angles {
        let set = EvalSet::at_pose(
            identities,
            CameraPose::yaw(yaw),
            model.config.view_count,
            resolution,
            deg,
            seed,
        )?;
        let refined = refine_set(model, codec, &set, NoiseLevel::new(0.1)?)?;
        let gt = flat(set.items.iter().map(|i| &i.ground_truth));
        let coarse = flat(set.items.iter().map(|i| &i.coarse));
        report.angles.push(AngleRow {
            yaw,
            refined: summarize(&flat(refined.iter()), &gt, codec, embedder)?,
            coarse: summarize(&coarse, &gt, codec, embedder)?,
        });
    }
    report.check_finite_where_defined()?;
    Ok(report)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median per-view wall time of coarse-view production and of refinement.
pub fn timing(
    model: &RefinerModel,
    codec: &Codec,
    bundle: &SceneBundle,
    deg: &DegradationConfig,
    n_trials: usize,
) -> Result<Timing> {
    if n_trials < 20 {
        return Err(Error::validation("timing needs at least 20 trials"));
    }
    let v = bundle.targets.len();
    let mut reg = Vec::with_capacity(n_trials);
    let mut gen = Vec::with_capacity(n_trials);
    let mut forwards = 0;
    // warm-up
    let set = EvalSet::from_bundles(std::slice::from_ref(bundle), deg, 0)?;
    refine_set(model, codec, &set, NoiseLevel::new(0.1)?)?;
    for trial in 0..n_trials {
        let t0 = Instant::now();
        let set = EvalSet::from_bundles(std::slice::from_ref(bundle), deg, trial as u64)?;
        reg.push(t0.elapsed().as_secs_f64() * 1e3 / v as f64);
        let before = model.forward_count();
        let t1 = Instant::now();
        refine_set(model, codec, &set, NoiseLevel::new(0.1)?)?;
        gen.push(t1.elapsed().as_secs_f64() * 1e3 / v as f64);
        forwards = model.forward_count() - before;
    }
    Ok(Timing {
        registration_ms: median(reg),
        generation_ms: median(gen),
        trials: n_trials,
        unet_forwards_per_call: forwards,
    })
}

impl EvalReport {
    /// Like [`EvalReport::check_finite`], ignoring identity scores when no
    /// embedder was supplied.
    fn check_finite_where_defined(&self) -> Result<()> {
        let mut copy = self.clone();
        let fix = |m: &mut MetricSummary| {
            if m.id_proxy.is_nan() {
                m.id_proxy = 0.0;
            }
        };
        copy.refined
            .iter_mut()
            .chain(copy.coarse.iter_mut())
            .chain(copy.per_view.iter_mut())
            .for_each(fix);
        copy.noise.iter_mut().for_each(|r| fix(&mut r.refined));
        copy.angles.iter_mut().for_each(|r| {
            fix(&mut r.refined);
            fix(&mut r.coarse)
        });
        copy.check_finite()
    }
}
