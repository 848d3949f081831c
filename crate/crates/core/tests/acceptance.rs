//! End-to-end acceptance run: trains the whole pipeline once at 64x64 and
//! checks every criterion, printing one PASS/FAIL line each.
//!
//! Set `ACCEPTANCE_REUSE=1` to reuse stage checkpoints from an earlier run in
//! the same target directory.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use autograd::{no_grad, Module, Tensor};
use common::{max_abs_diff, permute_views, random_batch, random_tensor, tiny_model, wake_zeros};
use portrait_refine::coarse_synth::{gaussian_blur, CoarseView};
use portrait_refine::latent_codec::{Codec, CodecCheckpoint, CodecConfig};
use portrait_refine::metrics::{
    ablate_noise, ablate_rotation, evaluate, fid_from_features, id_consistency, lpips_proxy, psnr,
    psnr_from_mse, ssim, timing, EvalReport, EvalSet, IdentityEmbedder, MetricSummary, PSNR_CAP_DB,
    ROTATION_ANGLES,
};
use portrait_refine::refiner::{
    add_noise, refine, reshape_for_attention, reshape_for_resblock, unreshape_from_attention,
    unreshape_from_resblock, NoiseLevel, RefinerModel, ViewLatentBatch, INFERENCE_SEED,
    TRAIN_NOISE_LEVELS,
};
use portrait_refine::synthdata::{
    make_bundle, render_view, sample_identity_in, sample_pose, CameraPose, IdentityParams,
    IdentityRegime,
};
use portrait_refine::trainer::{
    heldout_set, identity_pools, load_checkpoint, resume, train_codec_stage, train_embedder_stage,
    train_refiner_stage, CheckpointManifest, Stage, TrainConfig, CHECKPOINT_DIR,
};
use portrait_refine::Image;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CODEC_STEPS: u64 = 9000;
const BASE_STEPS: u64 = 4500;
const PRETRAIN_STEPS: u64 = 500;
const HELDOUT_SUBJECTS: usize = 32;

fn config(stage: Stage, steps: u64, noise: &[f32]) -> TrainConfig {
    let text = format!(
        r#"
stage = "{stage}"
steps = {steps}
batch_size = 4
view_count = 2
resolution = 64
seed = 11
eval_every = 250
checkpoint_every = 0
noise_levels = {noise:?}

[data]
train_identities = 512
eval_identities = {HELDOUT_SUBJECTS}

[codec_stage]
steps = {CODEC_STEPS}
"#
    );
    TrainConfig::from_toml(&text, &[])
        .unwrap()
        .resolved()
        .unwrap()
}

struct Criterion {
    id: usize,
    name: &'static str,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(id: usize, name: &'static str) -> Self {
        Criterion {
            id,
            name,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.checks.push((what.into(), ok));
    }

    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|(_, ok)| *ok)
    }

    fn line(&self) -> String {
        let detail: Vec<String> = self
            .checks
            .iter()
            .map(|(w, ok)| {
                if *ok {
                    w.clone()
                } else {
                    format!("FAILED {w}")
                }
            })
            .collect();
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        format!(
            "criterion {} [{verdict}] {}: {}",
            self.id,
            self.name,
            detail.join("; ")
        )
    }
}

struct Refiner {
    dir: PathBuf,
    manifest: CheckpointManifest,
    model: RefinerModel,
}

struct Pipeline {
    root: PathBuf,
    codec: Codec,
    codec_hash: String,
    embedder: IdentityEmbedder,
    base: Refiner,
    model: Refiner,
    control: Refiner,
    heldout: EvalSet,
    pretrain_cfg: TrainConfig,
}

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    println!("  {label}: {:.0} s", t.elapsed().as_secs_f64());
    out
}

fn refiner_stage(
    cfg: &TrainConfig,
    codec: &Codec,
    init: Option<&Path>,
    dir: PathBuf,
    reuse: bool,
) -> Refiner {
    let ckpt = dir.join(CHECKPOINT_DIR);
    if reuse && ckpt.exists() {
        let (manifest, state) = load_checkpoint(&ckpt).unwrap();
        return Refiner {
            dir: ckpt,
            manifest,
            model: state.model,
        };
    }
    let out = timed(&format!("{} {} steps", cfg.stage, cfg.steps), || {
        train_refiner_stage(cfg, codec, init, &dir).unwrap()
    });
    Refiner {
        dir: out.checkpoint_dir,
        manifest: out.manifest,
        model: out.state.model,
    }
}

impl Pipeline {
    fn build() -> Pipeline {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let reuse = std::env::var("ACCEPTANCE_REUSE").is_ok_and(|v| v == "1");
        if !reuse && root.exists() {
            std::fs::remove_dir_all(&root).unwrap();
        }
        std::fs::create_dir_all(&root).unwrap();
        println!("training pipeline under {}", root.display());

        let noisy = TRAIN_NOISE_LEVELS.to_vec();
        let codec_cfg = config(Stage::Codec, CODEC_STEPS, &noisy);
        let codec_dir = root.join("codec");
        let codec = if reuse && codec_dir.exists() {
            CodecCheckpoint::load(&codec_dir).unwrap()
        } else {
            timed("codec", || {
                train_codec_stage(&codec_cfg, &codec_dir).unwrap()
            })
        };
        println!("  codec held-out psnr {:.2} dB", codec.meta.heldout_psnr);
        let codec_hash = codec.meta.weights_hash.clone();
        let codec = codec.codec;

        let emb_dir = root.join("embedder");
        let embedder = if reuse && emb_dir.exists() {
            IdentityEmbedder::load(&emb_dir).unwrap()
        } else {
            timed("embedder", || {
                train_embedder_stage(&config(Stage::Embedder, 0, &noisy), &emb_dir).unwrap()
            })
        };

        let base = refiner_stage(
            &config(Stage::Base, BASE_STEPS, &noisy),
            &codec,
            None,
            root.join("base"),
            reuse,
        );
        let pretrain_cfg = config(Stage::Pretrain, PRETRAIN_STEPS, &noisy);
        let model = refiner_stage(
            &pretrain_cfg,
            &codec,
            Some(&base.dir),
            root.join("pretrain"),
            reuse,
        );

        let fixed = [0.0];
        let control_base = refiner_stage(
            &config(Stage::Base, BASE_STEPS, &fixed),
            &codec,
            None,
            root.join("control_base"),
            reuse,
        );
        let control = refiner_stage(
            &config(Stage::Pretrain, PRETRAIN_STEPS, &fixed),
            &codec,
            Some(&control_base.dir),
            root.join("control_pretrain"),
            reuse,
        );

        let heldout = heldout_set(&pretrain_cfg, &IdentityRegime::BROAD, HELDOUT_SUBJECTS).unwrap();
        Pipeline {
            root,
            codec,
            codec_hash,
            embedder,
            base,
            model,
            control,
            heldout,
            pretrain_cfg,
        }
    }

    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn heldout_identities(&self) -> Vec<IdentityParams> {
        let (_, eval) = identity_pools(&self.pretrain_cfg).unwrap();
        eval.iter()
            .map(|&s| sample_identity_in(s, &IdentityRegime::BROAD))
            .collect()
    }

    fn ground_truth(&self) -> Vec<&Image> {
        self.heldout
            .items
            .iter()
            .flat_map(|i| &i.ground_truth)
            .collect()
    }

    /// Encoded `(reference, coarse..)` groups of the first `n` held-out subjects.
    fn latents(&self, n: usize) -> ViewLatentBatch {
        let groups: Vec<Vec<&Image>> = self.heldout.items[..n]
            .iter()
            .map(|i| std::iter::once(&i.reference).chain(&i.coarse).collect())
            .collect();
        self.model
            .model
            .encode_groups(&self.codec, &groups)
            .unwrap()
    }
}

fn summary(report: &EvalReport, which: fn(&EvalReport) -> Option<MetricSummary>) -> MetricSummary {
    which(report).expect("summary present")
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
}

fn bits(t: &[f32]) -> Vec<u32> {
    t.iter().map(|v| v.to_bits()).collect()
}

fn refinement_gain(p: &Pipeline) -> Criterion {
    let mut c = Criterion::new(1, "refinement gain");
    let r = NoiseLevel::new(0.1).unwrap();
    let report = evaluate(
        &p.model.model,
        &p.codec,
        Some(&p.embedder),
        &p.heldout,
        r,
        &p.pretrain_cfg.config_hash(),
    )
    .unwrap();
    report.write(&p.reports(), "eval").unwrap();
    let (refined, coarse) = (
        summary(&report, |r| r.refined),
        summary(&report, |r| r.coarse),
    );
    let dpsnr = refined.psnr - coarse.psnr;
    let dssim = refined.ssim - coarse.ssim;
    c.check(
        format!(
            "psnr {:.2} -> {:.2} dB, gain {dpsnr:.2} >= 2.0",
            coarse.psnr, refined.psnr
        ),
        dpsnr >= 2.0,
    );
    c.check(
        format!(
            "ssim {:.3} -> {:.3}, gain {dssim:.3} >= 0.03",
            coarse.ssim, refined.ssim
        ),
        dssim >= 0.03,
    );
    c
}

fn noise_flatness(p: &Pipeline) -> Criterion {
    let mut c = Criterion::new(2, "noise-level flatness");
    let hash = p.pretrain_cfg.config_hash();
    let run = |m: &RefinerModel| {
        ablate_noise(
            m,
            &p.codec,
            Some(&p.embedder),
            &p.heldout,
            &TRAIN_NOISE_LEVELS,
            &hash,
        )
        .unwrap()
    };
    let main = run(&p.model.model);
    let control = run(&p.control.model);
    main.write(&p.reports(), "ablate_noise").unwrap();
    control.write(&p.reports(), "ablate_noise_control").unwrap();
    let psnr_spread = |r: &EvalReport| spread(r.noise.iter().map(|n| n.refined.psnr));
    let id_spread = |r: &EvalReport| spread(r.noise.iter().map(|n| n.refined.id_proxy));
    let (ps, is) = (psnr_spread(&main), id_spread(&main));
    let (cps, cis) = (psnr_spread(&control), id_spread(&control));
    for row in main.noise.iter().zip(&control.noise) {
        println!(
            "  r={:.1} psnr {:.2} id {:.4} | control psnr {:.2} id {:.4}",
            row.0.r,
            row.0.refined.psnr,
            row.0.refined.id_proxy,
            row.1.refined.psnr,
            row.1.refined.id_proxy
        );
    }
    c.check(format!("psnr spread {ps:.3} <= 1.5 dB"), ps <= 1.5);
    c.check(format!("id spread {is:.4} <= 0.02"), is <= 0.02);
    c.check(
        format!("control psnr spread {cps:.3} > {ps:.3} (control id spread {cis:.4})"),
        cps > ps,
    );
    c
}

fn rotation_trend(p: &Pipeline) -> Criterion {
    let mut c = Criterion::new(3, "rotation degradation");
    let report = ablate_rotation(
        &p.model.model,
        &p.codec,
        Some(&p.embedder),
        &p.heldout_identities(),
        &ROTATION_ANGLES,
        p.pretrain_cfg.resolution,
        &p.pretrain_cfg.degradation,
        p.pretrain_cfg.seed,
        &p.pretrain_cfg.config_hash(),
    )
    .unwrap();
    report.write(&p.reports(), "ablate_rotation").unwrap();
    let csv = std::fs::read_to_string(p.reports().join("ablate_rotation_angles.csv")).unwrap();
    let yaws: Vec<f32> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    c.check(format!("csv rows at {yaws:?}"), yaws == ROTATION_ANGLES);

    for row in &report.angles {
        println!(
            "  yaw {:+4} ssim {:.4} id {:.4}",
            row.yaw, row.refined.ssim, row.refined.id_proxy
        );
    }
    let at = |yaw: f32| report.angles.iter().find(|r| r.yaw == yaw).unwrap().refined;
    for (name, get) in [
        (
            "ssim",
            (|m: MetricSummary| m.ssim) as fn(MetricSummary) -> f64,
        ),
        ("id", |m| m.id_proxy),
    ] {
        let centre = get(at(0.0));
        let best = report
            .angles
            .iter()
            .map(|r| get(r.refined))
            .fold(f64::MIN, f64::max);
        c.check(
            format!("{name} at 0 is {centre:.4}, max over angles {best:.4}"),
            centre >= best,
        );
        let (l, r) = (get(at(-90.0)), get(at(90.0)));
        c.check(
            format!("{name} at -90 {l:.4} and +90 {r:.4} below 0"),
            l < centre && r < centre,
        );
    }
    c
}

fn single_step(p: &Pipeline) -> Criterion {
    let mut c = Criterion::new(4, "single step and reference contracts");
    let model = &p.model.model;
    let item = &p.heldout.items[0];
    let views: Vec<CoarseView> = item
        .coarse
        .iter()
        .map(|img| CoarseView {
            image: img.clone(),
            pose: CameraPose::yaw(0.0),
            source_identity_seed: item.identity_seed,
        })
        .collect();
    model.reset_forward_count();
    refine(
        model,
        &p.codec,
        &item.reference,
        &views,
        NoiseLevel::new(0.1).unwrap(),
    )
    .unwrap();
    c.check(
        format!("refine: {} forward", model.forward_count()),
        model.forward_count() == 1,
    );

    let groups: Vec<Vec<&Image>> = p.heldout.items[..8]
        .iter()
        .map(|i| std::iter::once(&i.reference).chain(&i.coarse).collect())
        .collect();
    model.reset_forward_count();
    model
        .refine_groups(
            &p.codec,
            &groups,
            NoiseLevel::new(0.3).unwrap(),
            INFERENCE_SEED,
        )
        .unwrap();
    c.check(
        format!("8 subjects: {} forward", model.forward_count()),
        model.forward_count() == 1,
    );

    let (_, eval) = identity_pools(&p.pretrain_cfg).unwrap();
    let poses = [CameraPose::yaw(-30.0), CameraPose::yaw(45.0)];
    let bundle = make_bundle(
        &sample_identity_in(eval[0], &IdentityRegime::BROAD),
        &poses,
        64,
    )
    .unwrap();
    let t = timing(model, &p.codec, &bundle, &p.pretrain_cfg.degradation, 20).unwrap();
    c.check(
        format!(
            "timing: {} forward, {:.2} ms/view generation, {:.2} ms/view coarse",
            t.unet_forwards_per_call, t.generation_ms, t.registration_ms
        ),
        t.unet_forwards_per_call == 1,
    );

    let z = p.latents(8);
    let mut untouched = true;
    for &r in &TRAIN_NOISE_LEVELS {
        for seed in [0, 1, INFERENCE_SEED, u64::MAX] {
            let noisy = add_noise(&z, NoiseLevel::new(r).unwrap(), seed);
            untouched &= (0..z.batch_size()).all(|b| bits(noisy.slot(b, 0)) == bits(z.slot(b, 0)));
        }
    }
    c.check("slot 0 bit-identical at every level", untouched);
    let same = add_noise(&z, NoiseLevel::new(0.0).unwrap(), 5);
    c.check(
        "r = 0 bit-exact",
        bits(same.tensor().data()) == bits(z.tensor().data()),
    );
    c
}

fn structure(p: &Pipeline) -> Criterion {
    let mut c = Criterion::new(5, "structural invariants");
    let z = p.latents(4);
    let x = z.tensor();
    let b = z.batch_size();
    let rb = unreshape_from_resblock(&reshape_for_resblock(x), b);
    let [_, h, w] = z.slot_shape();
    let at = unreshape_from_attention(&reshape_for_attention(x), z.views() + 1, h, w);
    c.check(
        "reshape round trips",
        bits(rb.data()) == bits(x.data()) && bits(at.data()) == bits(x.data()),
    );

    let noisy = add_noise(&z, NoiseLevel::new(0.2).unwrap(), 3);
    let model = &p.model.model;
    let y = no_grad(|| model.unet_forward(&noisy)).unwrap();
    let swapped = ViewLatentBatch::new(permute_views(noisy.tensor(), &[1, 0])).unwrap();
    let ys = no_grad(|| model.unet_forward(&swapped)).unwrap();
    let mut worst = max_abs_diff(ys.tensor(), &permute_views(y.tensor(), &[1, 0]));
    let wide: RefinerModel = tiny_model(4, 21);
    let xw = random_batch::<f32>(2, 4, 4, 4, 22);
    let yw = no_grad(|| wide.unet_forward(&xw)).unwrap();
    for order in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]] {
        let xp = ViewLatentBatch::new(permute_views(xw.tensor(), &order)).unwrap();
        let yp = no_grad(|| wide.unet_forward(&xp)).unwrap();
        worst = worst.max(max_abs_diff(
            yp.tensor(),
            &permute_views(yw.tensor(), &order),
        ));
    }
    c.check(
        format!("permutation equivariance max diff {worst:.2e} <= 1e-5"),
        worst <= 1e-5,
    );

    let base = &p.base.model;
    let mut adapted = base.clone();
    adapted.apply_lora(99).unwrap();
    let yb = no_grad(|| base.unet_forward(&noisy)).unwrap();
    let ya = no_grad(|| adapted.unet_forward(&noisy)).unwrap();
    c.check(
        "fresh adapters bit-exact on the trained base",
        bits(yb.tensor().data()) == bits(ya.tensor().data()),
    );

    let mut merged = model.clone();
    merged.merge_lora().unwrap();
    let ym = no_grad(|| merged.unet_forward(&noisy)).unwrap();
    let d = max_abs_diff(ym.tensor(), y.tensor());
    c.check(
        format!("merged vs adapted max diff {d:.2e} <= 1e-5"),
        d <= 1e-5,
    );

    c.check(
        "base hash unchanged by adapter training",
        model.base_hash() == base.base_hash()
            && p.model.manifest.base_hash == p.base.manifest.base_hash,
    );
    let codec_now = p.codec.weights_hash();
    let codec_ok = [&p.base.manifest, &p.model.manifest, &p.control.manifest]
        .iter()
        .all(|m| m.codec_hash == codec_now);
    c.check(
        "codec hash unchanged across stages",
        codec_ok && codec_now == p.codec_hash,
    );
    let share = model
        .adapter_tensors()
        .iter()
        .map(|(_, t)| t.numel())
        .sum::<usize>() as f64
        / model.num_base_params() as f64;
    c.check(
        format!("adapters are {:.2}% of base parameters", 100.0 * share),
        share < 0.05,
    );
    c
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Worst relative error between autodiff and central differences at `picks`.
fn grad_check<M: Module<f64> + Clone>(
    m: &M,
    loss: impl Fn(&M) -> Tensor<f64>,
    picks: &[(String, usize)],
) -> (f64, f64) {
    let grads = loss(m).backward();
    let tensors = m.named_tensors();
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut smallest = f64::MAX;
    for (name, idx) in picks {
        let t = &tensors.iter().find(|(n, _)| n == name).unwrap().1;
        let analytic = grads.get(t).map(|g| g[*idx]).unwrap_or(0.0);
        let at = |delta: f64| {
            let mut p = m.clone();
            p.visit_mut("", &mut |n, t| {
                if &n == name {
                    let mut d = t.to_vec();
                    d[*idx] += delta;
                    *t = Tensor::constant(t.shape().to_vec(), d);
                }
            });
            no_grad(|| loss(&p)).item()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
        smallest = smallest.min(analytic.abs());
    }
    (worst, smallest)
}

fn pick(tensors: &[(String, Tensor<f64>)], n: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (name, t) = &tensors[rng.random_range(0..tensors.len())];
            (name.clone(), rng.random_range(0..t.numel()))
        })
        .collect()
}

fn gradients() -> Criterion {
    let mut c = Criterion::new(6, "gradient checks");
    let mut model: RefinerModel<f64> = tiny_model(2, 31);
    model.apply_lora(32).unwrap();
    wake_zeros(&mut model, 33, 0.3);
    let x = random_batch::<f64>(1, 2, 4, 4, 34);
    let probe = random_tensor::<f64>(x.tensor().shape(), 35);
    let picks = pick(&model.adapter_tensors(), 10, 36);
    let (err, small) = grad_check(
        &model,
        |m| m.unet_forward(&x).unwrap().tensor().mul(&probe).sum_all(),
        &picks,
    );
    c.check(
        format!("lora worst relative error {err:.2e} <= 1e-2 (smallest |grad| {small:.1e})"),
        err <= 1e-2,
    );

    let codec: Codec<f64> = Codec::new(
        37,
        CodecConfig {
            latent_channels: 4,
            widths: [8, 8],
        },
    );
    let img = render_view(
        &sample_identity_in(40, &IdentityRegime::BROAD),
        &CameraPose::yaw(20.0),
        64,
    )
    .unwrap();
    let mut crop = Vec::with_capacity(3 * 64);
    for ch in 0..3 {
        for y in 28..36 {
            for xx in 28..36 {
                crop.push(img.get(ch, y, xx) as f64);
            }
        }
    }
    let xi = Tensor::constant(vec![1, 3, 8, 8], crop);
    let probe = random_tensor::<f64>(&[1, 3, 8, 8], 38);
    let picks = pick(&codec.named_tensors(), 10, 39);
    let (err, small) = grad_check(
        &codec,
        |m| {
            m.reconstruct(&xi)
                .mse(&xi)
                .add(&m.reconstruct(&xi).mul(&probe).sum_all())
        },
        &picks,
    );
    c.check(
        format!("codec worst relative error {err:.2e} <= 1e-2 (smallest |grad| {small:.1e})"),
        err <= 1e-2,
    );
    c
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn metric_selftests(p: &Pipeline) -> Criterion {
    let mut c = Criterion::new(7, "metric self-tests");
    let gt = p.ground_truth();
    let coarse: Vec<&Image> = p.heldout.items.iter().flat_map(|i| &i.coarse).collect();
    let (x, y) = (gt[0], coarse[0]);

    c.check("psnr(x, x) at the cap", psnr(x, x).unwrap() == PSNR_CAP_DB);
    c.check(
        format!("psnr at mse 0.01 = {}", psnr_from_mse(0.01)),
        psnr_from_mse(0.01) == 20.0,
    );
    let s = ssim(x, x).unwrap();
    c.check(format!("ssim(x, x) = {s:.9}"), (s - 1.0).abs() < 1e-9);
    let (ab, ba) = (ssim(x, y).unwrap(), ssim(y, x).unwrap());
    c.check("ssim symmetric", (ab - ba).abs() < 1e-12);
    let (pa, pb) = (
        lpips_proxy(x, y, Some(&p.codec)).unwrap(),
        lpips_proxy(y, x, Some(&p.codec)).unwrap(),
    );
    c.check(
        "lpips proxy zero on identical input and symmetric",
        lpips_proxy(x, x, Some(&p.codec)).unwrap() == 0.0 && (pa - pb).abs() < 1e-12,
    );

    let monotone = gt[..20]
        .iter()
        .filter(|img| {
            let d1 = lpips_proxy(img, &gaussian_blur(img, 1.0), Some(&p.codec)).unwrap();
            let d2 = lpips_proxy(img, &gaussian_blur(img, 2.0), Some(&p.codec)).unwrap();
            0.0 < d1 && d1 < d2
        })
        .count();
    c.check(
        format!("lpips proxy strictly increasing with blur on {monotone}/20 images"),
        monotone == 20,
    );

    let self_id = id_consistency(x, x, &p.embedder).unwrap();
    let cross_id = id_consistency(x, y, &p.embedder).unwrap();
    c.check(
        format!("id(x, x) = {self_id:.7}, id in [-1, 1]"),
        (self_id - 1.0).abs() < 1e-6 && (-1.0..=1.0).contains(&cross_id),
    );
    let ids = p.heldout_identities();
    let res = p.pretrain_cfg.resolution;
    let left: Vec<Image> = ids
        .iter()
        .map(|i| render_view(i, &CameraPose::yaw(-30.0), res).unwrap())
        .collect();
    let right: Vec<Image> = ids
        .iter()
        .map(|i| render_view(i, &CameraPose::yaw(30.0), res).unwrap())
        .collect();
    let el = p.embedder.embed(&left.iter().collect::<Vec<_>>()).unwrap();
    let er = p.embedder.embed(&right.iter().collect::<Vec<_>>()).unwrap();
    let n = ids.len();
    let same = (0..n).map(|i| cosine(&el[i], &er[i])).sum::<f64>() / n as f64;
    let diff = (0..n)
        .map(|i| cosine(&el[i], &el[(i + 1) % n]))
        .sum::<f64>()
        / n as f64;
    c.check(
        format!(
            "id margin {:.3} (same {same:.3}, different {diff:.3}) >= 0.2",
            same - diff
        ),
        same - diff >= 0.2,
    );

    let feats = p.embedder.embed(&gt).unwrap();
    let fss = fid_from_features(&feats, &feats).unwrap();
    c.check(format!("fid(S, S) = {fss:.2e}"), fss.abs() <= 1e-6);
    let d: Vec<f64> = (0..feats[0].len())
        .map(|k| 0.05 * ((k % 7) as f64 - 3.0))
        .collect();
    let shifted: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| f.iter().zip(&d).map(|(a, b)| a + b).collect())
        .collect();
    let expected: f64 = d.iter().map(|v| v * v).sum();
    let got = fid_from_features(&feats, &shifted).unwrap();
    c.check(
        format!("mean shift {got:.9} vs |d|^2 {expected:.9}"),
        (got - expected).abs() <= 1e-6,
    );
    let sym = fid_from_features(&shifted, &feats).unwrap();
    c.check("fid symmetric", (got - sym).abs() <= 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let pool: Vec<Image> = ids
        .iter()
        .flat_map(|id| {
            (0..8)
                .map(|_| render_view(id, &sample_pose(&mut rng, 90.0), res).unwrap())
                .collect::<Vec<_>>()
        })
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let (a, b) = order.split_at(pool.len() / 2);
    let fa = p
        .embedder
        .embed(&a.iter().map(|&i| &pool[i]).collect::<Vec<_>>())
        .unwrap();
    let fb = p
        .embedder
        .embed(&b.iter().map(|&i| &pool[i]).collect::<Vec<_>>())
        .unwrap();
    let blurred: Vec<Image> = b.iter().map(|&i| gaussian_blur(&pool[i], 2.0)).collect();
    let fbb = p
        .embedder
        .embed(&blurred.iter().collect::<Vec<_>>())
        .unwrap();
    let split = fid_from_features(&fa, &fb).unwrap();
    let vs_blur = fid_from_features(&fa, &fbb).unwrap();
    c.check(
        format!("random halves {split:.4} < half against blurred half {vs_blur:.4}"),
        split < vs_blur,
    );
    c
}

fn determinism(p: &Pipeline) -> Criterion {
    let mut c = Criterion::new(8, "determinism");
    let full = &p.pretrain_cfg;
    let again = timed("repeat pretrain", || {
        train_refiner_stage(full, &p.codec, Some(&p.base.dir), &p.root.join("repeat")).unwrap()
    });
    c.check(
        "repeated run has identical weights and checkpoint files",
        again.state.model.weights_hash() == p.model.model.weights_hash()
            && again.manifest.files == p.model.manifest.files,
    );
    let half_cfg = config(Stage::Pretrain, PRETRAIN_STEPS / 2, &TRAIN_NOISE_LEVELS);
    let half = timed("half pretrain", || {
        train_refiner_stage(&half_cfg, &p.codec, Some(&p.base.dir), &p.root.join("half")).unwrap()
    });
    let resumed = timed("resume", || {
        resume(
            &half.checkpoint_dir,
            full,
            &p.codec,
            &p.root.join("resumed"),
        )
        .unwrap()
    });
    c.check(
        format!(
            "resume from step {} matches the uninterrupted run",
            half.manifest.step
        ),
        resumed.manifest.step == PRETRAIN_STEPS
            && resumed.state.model.weights_hash() == p.model.model.weights_hash()
            && resumed.manifest.files == p.model.manifest.files,
    );
    c
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let p = Pipeline::build();
    println!(
        "pipeline ready after {:.0} s",
        started.elapsed().as_secs_f64()
    );
    let criteria: [fn(&Pipeline) -> Criterion; 8] = [
        refinement_gain,
        noise_flatness,
        rotation_trend,
        single_step,
        structure,
        |_| gradients(),
        metric_selftests,
        determinism,
    ];
    let results: Vec<Criterion> = criteria.iter().map(|f| f(&p)).collect();
    let lines: Vec<String> = results.iter().map(Criterion::line).collect();
    println!();
    for l in &lines {
        println!("{l}");
    }
    std::fs::write(p.root.join("acceptance.txt"), lines.join("\n") + "\n").unwrap();
    println!("total {:.0} s", started.elapsed().as_secs_f64());
    let failed: Vec<usize> = results
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.id)
        .collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
