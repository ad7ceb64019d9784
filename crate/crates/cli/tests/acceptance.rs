//! Acceptance suite: every criterion at its stated tolerance, one PASS/FAIL
//! line each on stderr. Run alone with
//! `cargo test --release -p vton-cli --test acceptance`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use vton_cli::ablation::{run_ablation, VARIANTS};
use vton_core::checkpoint::Checkpoint;
use vton_core::codec::Codec;
use vton_core::config::{AttentionKind, DataConfig, DiffusionConfig, PipelineConfig, UNetConfig};
use vton_core::data::{all_images, generate, tryon_region, TryOnSample};
use vton_core::diffusion::NoiseSchedule;
use vton_core::metrics::{eval_inputs, fid, frechet_distance, kid, sqrtm_psd, ssim, EvalMode};
use vton_core::sampler::{cfg_combine, generate_tryon, Model};
use vton_core::trainer::{LatentCache, Trainer};
use vton_core::unet::{rows_stochastic, AttentionBlock, AttentionTrace, UNet};
use vton_core::{Image, Result};
use vton_tensor::{gradient_check, GaussianRng, Graph, ParamStore, Tensor, TensorError, Var};

/// Diffusion steps for the overfit run.
const OVERFIT_STEPS: u64 = 6000;
/// Diffusion steps per ablation run.
const ABLATION_STEPS: u64 = 1500;
/// U-Net width for the ablation runs, reduced from the toy 32 so that twelve
/// models train in about the time of one toy model.
const ABLATION_BASE_CHANNELS: usize = 16;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

/// Writes straight to stderr so the lines survive the test harness's output
/// capture and appear in every `cargo test` log.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, r: std::result::Result<String, String>) -> Outcome {
    let (pass, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    say(&format!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" }));
    Outcome { id, name, pass, detail }
}

fn check(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn project(g: &mut Graph, v: Var, seed: u64) -> vton_tensor::Result<Var> {
    let w = Tensor::randn(g.shape(v), &mut GaussianRng::new(seed));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> vton_tensor::Result<Var>>;

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> vton_tensor::Result<Var> + 'static) -> (&'static str, Vec<Tensor>, Build) {
    (name, inputs, Box::new(f))
}

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = GaussianRng::new(101);
    let mut r = |s: &[usize]| Tensor::randn(s, &mut rng);
    let positive = r(&[5]).map(|v| v.abs() + 0.5);
    vec![
        case("add", vec![r(&[2, 3]), r(&[2, 3])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 1)
        }),
        case("sub", vec![r(&[2, 3]), r(&[2, 3])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 2)
        }),
        case("mul", vec![r(&[2, 3]), r(&[2, 3])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 3)
        }),
        case("scale", vec![r(&[5])], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 4)
        }),
        case("add_scalar", vec![r(&[5])], |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            project(g, y, 5)
        }),
        case("exp", vec![r(&[5])], |g, v| {
            let y = g.exp(v[0]);
            project(g, y, 6)
        }),
        case("sqrt", vec![positive], |g, v| {
            let y = g.sqrt(v[0])?;
            project(g, y, 7)
        }),
        case("silu", vec![r(&[6])], |g, v| {
            let y = g.silu(v[0]);
            project(g, y, 8)
        }),
        case("square", vec![r(&[6])], |g, v| {
            let y = g.square(v[0]);
            project(g, y, 9)
        }),
        case("matmul", vec![r(&[3, 4]), r(&[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 10)
        }),
        case("matmul_t", vec![r(&[2, 4, 3]), r(&[2, 5, 4])], |g, v| {
            let y = g.matmul_t(v[0], v[1], true, true)?;
            project(g, y, 11)
        }),
        case("softmax_lastdim", vec![r(&[3, 5])], |g, v| {
            let y = g.softmax_lastdim(v[0])?;
            project(g, y, 12)
        }),
        case("conv2d", vec![r(&[2, 3, 5, 4]), r(&[4, 3, 3, 3])], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            project(g, y, 13)
        }),
        case("group_norm", vec![r(&[2, 4, 3, 3]), r(&[4]), r(&[4])], |g, v| {
            let y = g.group_norm(v[0], 2, v[1], v[2])?;
            project(g, y, 14)
        }),
        case("layer_norm", vec![r(&[2, 6, 3]), r(&[6]), r(&[6])], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, 15)
        }),
        case("add_bias", vec![r(&[2, 3, 2, 2]), r(&[2, 3])], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 16)
        }),
        case("concat_channels", vec![r(&[2, 2, 3, 2]), r(&[2, 3, 3, 2])], |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            project(g, y, 17)
        }),
        case("slice_channels", vec![r(&[2, 5, 3, 2])], |g, v| {
            let y = g.slice_channels(v[0], 1, 3)?;
            project(g, y, 18)
        }),
        case("upsample_nearest2x", vec![r(&[1, 2, 2, 3])], |g, v| {
            let y = g.upsample_nearest2x(v[0])?;
            project(g, y, 19)
        }),
        case("avg_pool2x", vec![r(&[1, 2, 4, 6])], |g, v| {
            let y = g.avg_pool2x(v[0])?;
            project(g, y, 20)
        }),
        case("reshape", vec![r(&[2, 6])], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y, 21)
        }),
        case("transpose_last2", vec![r(&[2, 3, 4])], |g, v| {
            let y = g.transpose_last2(v[0])?;
            project(g, y, 22)
        }),
        case("sum", vec![r(&[7])], |g, v| {
            let y = g.square(v[0]);
            Ok(g.sum(y))
        }),
        case("mean", vec![r(&[7])], |g, v| {
            let y = g.square(v[0]);
            Ok(g.mean(y))
        }),
    ]
}

fn gradient_integrity() -> std::result::Result<String, String> {
    let start = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (name, inputs, build) in op_cases() {
        let e = gradient_check(&inputs, 1e-5, |g, v| build(g, v)).map_err(err)?;
        check(e < 1e-4, format!("{name}: relative error {e:.3e}"))?;
        if e > worst.0 {
            worst = (e, name);
        }
    }
    // toy network with a single attention site
    let cfg = UNetConfig {
        latent_channels: 2,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_scales: vec![2],
        heads: 2,
        attention: AttentionKind::Gfa,
    };
    let net = UNet::new(&cfg, 4, 4, 7).map_err(err)?;
    let mut rng = GaussianRng::new(8);
    let (zt, zc, zg) = (
        Tensor::randn(&[1, 2, 4, 4], &mut rng),
        Tensor::randn(&[1, 2, 4, 4], &mut rng),
        Tensor::randn(&[1, 2, 4, 4], &mut rng),
    );
    let picked: Vec<usize> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| {
            n.contains("to_q")
                || n.contains("to_k_garment.weight")
                || n.contains("to_v_person.weight")
                || n.starts_with("garment.0.res.conv1.weight")
                || n.starts_with("out.conv.weight")
        })
        .map(|(i, _)| i)
        .collect();
    let inputs: Vec<Tensor> = picked.iter().map(|&i| net.params().iter().nth(i).unwrap().1.clone()).collect();
    let ids: Vec<_> = picked.iter().map(|&i| net.params().ids().nth(i).unwrap()).collect();
    let to_t = |e: vton_core::Error| TensorError::Contract(e.to_string());
    let e = gradient_check(&inputs, 1e-5, |g, vars| {
        let mut bound = net.params().bind(g, false);
        for (k, id) in ids.iter().enumerate() {
            bound.replace(*id, vars[k]);
        }
        let (a, b, c) = (g.constant(zt.clone()), g.constant(zc.clone()), g.constant(zg.clone()));
        let pyr = net.garment_encode(g, &bound, c).map_err(to_t)?;
        let (eps, v) = net.forward(g, &bound, a, b, &[3], &pyr, None).map_err(to_t)?;
        let s1 = project(g, eps, 30)?;
        let s2 = project(g, v, 31)?;
        g.add(s1, s2)
    })
    .map_err(err)?;
    check(e < 1e-4, format!("toy network: relative error {e:.3e}"))?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, format!("runtime {secs:.1}s exceeds 2 min"))?;
    Ok(format!(
        "{} ops, worst op {} {:.2e}; network ({} tensors) {e:.2e}; {secs:.1}s",
        op_cases().len(),
        worst.1,
        worst.0,
        inputs.len()
    ))
}

// ---------------------------------------------------------------- 2

fn diffusion_algebra() -> std::result::Result<String, String> {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(err)?;
    for t in 1..=1000 {
        check(s.alpha_bar(t) < s.alpha_bar(t - 1), format!("alpha_bar not decreasing at {t}"))?;
    }
    check(s.alpha_bar(1000) < 5e-5, format!("alpha_bar_T = {:.3e}", s.alpha_bar(1000)))?;

    let toy = NoiseSchedule::from_config(&DiffusionConfig::default()).map_err(err)?;
    let mut rng = GaussianRng::new(2);
    let z0 = Tensor::randn(&[2, 4, 3, 3], &mut rng);
    let zero = Tensor::zeros(z0.shape());
    let mut worst: f64 = 0.0;
    for sched in [&s, &toy] {
        for t in 1..=sched.timesteps() {
            let eps = Tensor::randn(z0.shape(), &mut rng);
            let zt = sched.q_sample(&z0, t, &eps).map_err(err)?;
            let step = sched.p_sample_step_with(&zt, &eps, &zero, t, &zero).map_err(err)?;
            let (mean, _) = sched.q_posterior(&z0, &zt, t).map_err(err)?;
            worst = worst.max(step.max_abs_diff(&mean).map_err(err)?);
        }
    }
    check(worst < 1e-8, format!("posterior mean error {worst:.3e}"))?;

    let n = 10_000;
    let x0 = [1.2, -0.4];
    let mut max_z: f64 = 0.0;
    for t in [1, 100, 500, 1000] {
        let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
        let base = Tensor::new(&[2], x0.to_vec()).map_err(err)?;
        for _ in 0..n {
            let e = Tensor::randn(&[2], &mut rng);
            let x = s.q_sample(&base, t, &e).map_err(err)?;
            for i in 0..2 {
                sum[i] += x.data()[i];
                sq[i] += x.data()[i] * x.data()[i];
            }
        }
        let var = 1.0 - s.alpha_bar(t);
        for i in 0..2 {
            let m = sum[i] / n as f64;
            let v = sq[i] / n as f64 - m * m;
            let zm = (m - s.alpha_bar(t).sqrt() * x0[i]).abs() / (var / n as f64).sqrt();
            let zv = (v - var).abs() / (var * (2.0 / (n - 1) as f64).sqrt());
            check(zm < 4.0 && zv < 4.0, format!("q_sample moments at t={t}: mean {zm:.2} SE, var {zv:.2} SE"))?;
            max_z = max_z.max(zm).max(zv);
        }
    }
    Ok(format!(
        "alpha_bar_T {:.3e}; reversal error {worst:.2e}; Monte-Carlo worst {max_z:.2} SE",
        s.alpha_bar(1000)
    ))
}

// ---------------------------------------------------------------- 3

fn cfg_identities() -> std::result::Result<String, String> {
    let mut rng = GaussianRng::new(3);
    let c = Tensor::randn(&[2, 4, 5, 3], &mut rng);
    let u = Tensor::randn(&[2, 4, 5, 3], &mut rng);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(bits(&cfg_combine(&c, &u, 1.0).map_err(err)?) == bits(&c), "s=1 is not bitwise conditional")?;
    check(bits(&cfg_combine(&c, &u, 0.0).map_err(err)?) == bits(&u), "s=0 is not bitwise unconditional")?;
    let pts = [0.5, 2.0, 3.5];
    let outs: Vec<Tensor> = pts.iter().map(|&s| cfg_combine(&c, &u, s).unwrap()).collect();
    let mut worst: f64 = 0.0;
    for (k, &s) in pts.iter().enumerate() {
        for i in 0..c.numel() {
            let want = u.data()[i] + s * (c.data()[i] - u.data()[i]);
            worst = worst.max((outs[k].data()[i] - want).abs());
        }
    }
    for i in 0..c.numel() {
        let d1 = outs[1].data()[i] - outs[0].data()[i];
        let d2 = outs[2].data()[i] - outs[1].data()[i];
        worst = worst.max((d1 - d2).abs());
    }
    check(worst < 1e-12, format!("affine error {worst:.3e}"))?;
    Ok(format!("endpoints bitwise; affine at s={pts:?} within {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn gfa_algebra() -> std::result::Result<String, String> {
    let cfg = PipelineConfig::toy();
    let (h, w) = cfg.latent_dims();
    let net = UNet::new(&cfg.effective_unet(), h, w, 4).map_err(err)?;
    let mut rng = GaussianRng::new(4);
    let shape = [2, 4, h, w];
    let (zt, zc, zg) = (
        Tensor::randn(&shape, &mut rng),
        Tensor::randn(&shape, &mut rng),
        Tensor::randn(&shape, &mut rng),
    );
    let (_, _, trace) = net.predict_traced(&zt, &zc, &zg, &[1, 200]).map_err(err)?;
    check(!trace.sites.is_empty(), "no attention sites traced")?;
    let mut maps = 0;
    for site in &trace.sites {
        let m2 = site.m2.as_ref().ok_or(format!("{}: no M2", site.site))?;
        check(rows_stochastic(&site.m1, 1e-10), format!("{}: M1 rows", site.site))?;
        check(rows_stochastic(m2, 1e-10), format!("{}: M2 rows", site.site))?;
        let l = site.m1.dim(2);
        for (a, b) in site.m1.data().chunks(l * l).zip(m2.data().chunks(l * l)) {
            for i in 0..l {
                let row: f64 = (0..l).map(|j| (0..l).map(|k| a[i * l + k] * b[k * l + j]).sum::<f64>()).sum();
                check((row - 1.0).abs() < 1e-10, format!("{}: M1 M2 row sum {row}", site.site))?;
            }
            maps += 1;
        }
    }
    // one position
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "a", AttentionKind::Gfa, 8, 2, &mut rng).map_err(err)?;
    let mut g = Graph::inference();
    let p = store.bind(&mut g, false);
    let a = g.constant(Tensor::randn(&[3, 8, 1, 1], &mut rng));
    let b = g.constant(Tensor::randn(&[3, 8, 1, 1], &mut rng));
    let mut one = AttentionTrace::default();
    block.forward(&mut g, &p, a, b, Some(&mut one)).map_err(err)?;
    let site = &one.sites[0];
    let vsum = site.v_person.as_ref().ok_or("no V^P")?.add(&site.v_garment).map_err(err)?;
    let d = site.pre_projection.max_abs_diff(&vsum).map_err(err)?;
    check(d < 1e-12, format!("L=1 pre-projection differs from V^P+V^G by {d:.2e}"))?;
    let (ours, two) = (net.param_count(), net.two_stream_param_count().map_err(err)?);
    check(ours < two, format!("{ours} parameters, two-stream baseline {two}"))?;
    Ok(format!(
        "{} sites, {maps} head maps stochastic to 1e-10; L=1 diff {d:.1e}; params {ours} < {two}",
        trace.sites.len()
    ))
}

// ---------------------------------------------------------------- 5

/// Source files on the inference path.
const INFERENCE_SOURCES: [(&str, &str); 9] = [
    ("sampler.rs", include_str!("../../core/src/sampler.rs")),
    ("unet/mod.rs", include_str!("../../core/src/unet/mod.rs")),
    ("unet/gfa.rs", include_str!("../../core/src/unet/gfa.rs")),
    ("unet/embedding.rs", include_str!("../../core/src/unet/embedding.rs")),
    ("codec.rs", include_str!("../../core/src/codec.rs")),
    ("diffusion.rs", include_str!("../../core/src/diffusion.rs")),
    ("nn.rs", include_str!("../../core/src/nn.rs")),
    ("checkpoint.rs", include_str!("../../core/src/checkpoint.rs")),
    ("image.rs", include_str!("../../core/src/image.rs")),
];

const FORBIDDEN: [&str; 9] = ["mask", "keypoint", "parser", "parsing", "segment", "densepose", "label", "pose", "crate::data"];

fn parser_free_contract() -> std::result::Result<String, String> {
    // the entry point's type admits exactly a person image, a garment image,
    // a checkpoint, and a scale
    let entry: fn(&Image, &Image, &Checkpoint, f64) -> Result<Image> = generate_tryon;
    for (file, src) in INFERENCE_SOURCES {
        let lower = src.to_lowercase();
        for word in FORBIDDEN {
            check(!lower.contains(word), format!("{file} mentions {word:?}"))?;
        }
    }
    let _ = entry;
    Ok(format!(
        "entry fn(&Image, &Image, &Checkpoint, f64); {} inference sources free of {FORBIDDEN:?}",
        INFERENCE_SOURCES.len()
    ))
}

// ---------------------------------------------------------------- 6, 7

struct Toy {
    cfg: PipelineConfig,
    train: Vec<TryOnSample>,
    codec: Codec,
    codec_secs: f64,
    codec_ssim: f64,
}

fn toy_setup() -> std::result::Result<Toy, String> {
    let cfg = PipelineConfig::toy();
    let train = generate(&cfg.data).map_err(err)?;
    let start = Instant::now();
    let mut codec = Codec::new(&cfg.codec).map_err(err)?;
    codec.train(&all_images(&train)).map_err(err)?;
    let codec_secs = start.elapsed().as_secs_f64();
    let held = generate(&DataConfig {
        seed: 99,
        count: 8,
        ..cfg.data.clone()
    })
    .map_err(err)?;
    let mut total = 0.0;
    for s in &held {
        for im in [&s.person, &s.garment] {
            let rec = codec.decode(&codec.encode(im).map_err(err)?).map_err(err)?;
            total += ssim(&rec, im).map_err(err)?;
        }
    }
    let codec_ssim = total / (2 * held.len()) as f64;
    say(&format!("  codec: {codec_secs:.0}s, held-out reconstruction SSIM {codec_ssim:.4}"));
    Ok(Toy {
        cfg,
        train,
        codec,
        codec_secs,
        codec_ssim,
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn overfit_run(toy: &Toy) -> std::result::Result<String, String> {
    let start = Instant::now();
    let mut cfg = toy.cfg.clone();
    cfg.train.steps = OVERFIT_STEPS;
    let cache = LatentCache::build(&toy.codec, &toy.train).map_err(err)?;
    let mut trainer = Trainer::new(&cfg).map_err(err)?;
    let logs = trainer.fit(&cache, |_, _| Ok(())).map_err(err)?;
    let mse: Vec<f64> = logs.iter().map(|l| l.loss_mse).collect();
    let (first, last) = (mean(&mse[..100]), mean(&mse[mse.len() - 100..]));
    let train_secs = start.elapsed().as_secs_f64();

    let model = Model::from_checkpoint(&trainer.to_checkpoint(&toy.codec)).map_err(err)?;
    let inputs: Vec<(Image, Image)> = toy.train.iter().map(|s| eval_inputs(s, EvalMode::Paired)).collect::<Result<_>>().map_err(err)?;
    let persons: Vec<&Image> = inputs.iter().map(|(p, _)| p).collect();
    let garments: Vec<&Image> = inputs.iter().map(|(_, g)| g).collect();
    let zc = model.codec.encode_batch(&persons).map_err(err)?;
    let zg = model.codec.encode_batch(&garments).map_err(err)?;
    let mut envelope: f64 = 0.0;
    let z0 = model
        .sample_latents(&zc, &zg, cfg.sample.guidance_scale, cfg.sample.seed, |_, z| {
            envelope = envelope.max(z.max_abs())
        })
        .map_err(err)?;
    let outputs = model.codec.decode_batch(&z0).map_err(err)?;
    let scores: Vec<f64> = outputs.iter().zip(&toy.train).map(|(o, s)| ssim(o, &s.person).unwrap()).collect();
    let ssim_mean = mean(&scores);
    let total_min = (toy.codec_secs + start.elapsed().as_secs_f64()) / 60.0;
    if let Ok(dir) = std::env::var("VTON_ACCEPTANCE_OUT") {
        let dir = Path::new(&dir);
        std::fs::create_dir_all(dir).map_err(err)?;
        for (i, (o, s)) in outputs.iter().zip(&toy.train).enumerate() {
            Image::hstack(&[persons[i], garments[i], o, &s.person])
                .map_err(err)?
                .write_ppm(dir.join(format!("overfit_{i:02}.ppm")))
                .map_err(err)?;
        }
    }
    let detail = format!(
        "{} steps in {train_secs:.0}s; mse first-100 {first:.4} last-100 {last:.4}; sample SSIM {ssim_mean:.4} (codec ceiling {:.4}); max|Z| {envelope:.2}; total {total_min:.1} min",
        logs.len(),
        toy.codec_ssim
    );
    check(logs.len() as u64 <= 20_000, format!("too many steps; {detail}"))?;
    check(last < 0.5 * first, format!("loss trend; {detail}"))?;
    check(ssim_mean >= 0.85, format!("SSIM below 0.85; {detail}"))?;
    check(total_min <= 60.0, format!("runtime; {detail}"))?;
    Ok(detail)
}

fn ablation_echo(toy: &Toy) -> std::result::Result<String, String> {
    let start = Instant::now();
    let mut cfg = toy.cfg.clone();
    cfg.train.steps = ABLATION_STEPS;
    cfg.unet.base_channels = ABLATION_BASE_CHANNELS;
    let held = generate(&DataConfig { seed: 1, ..cfg.data.clone() }).map_err(err)?;
    let table = run_ablation(&cfg, &toy.codec, &toy.train, &held, &ABLATION_SEEDS).map_err(err)?;
    let mut lines = Vec::new();
    for seed in table.seeds() {
        let fids = table.fids(seed);
        lines.push(format!(
            "seed {seed}: [{}]",
            fids.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(", ")
        ));
    }
    let monotone = table.monotone_seeds();
    let detail = format!(
        "{} ({}); non-increasing in {monotone}/3 seeds; {:.0}s",
        lines.join("; "),
        VARIANTS.iter().map(|v| v.name).collect::<Vec<_>>().join(" -> "),
        start.elapsed().as_secs_f64()
    );
    check(monotone >= 2, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn metrics_consistency() -> std::result::Result<String, String> {
    let mut rng = GaussianRng::new(8);
    let mut x = Image::new(32, 24, [0.0; 3]);
    for y in 0..32 {
        for c in 0..24 {
            x.set(y, c, [rng.uniform(), rng.uniform(), rng.uniform()]);
        }
    }
    let s = ssim(&x, &x).map_err(err)?;
    check(s == 1.0, format!("ssim(x,x) = {s}"))?;

    use nalgebra::{DMatrix, DVector};
    let a = DMatrix::from_fn(50, 4, |_, _| rng.normal());
    let faa = fid(&a, &a).map_err(err)?;
    check(faa < 1e-8, format!("fid(A,A) = {faa:.3e}"))?;
    let one = DMatrix::from_element(1, 1, 1.0);
    let closed = frechet_distance(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).map_err(err)?;
    check((closed - 1.0).abs() < 1e-6, format!("closed form {closed}"))?;

    let trials: Vec<f64> = (0..100)
        .map(|_| {
            let p = DMatrix::from_fn(20, 4, |_, _| rng.normal());
            let q = DMatrix::from_fn(20, 4, |_, _| rng.normal());
            kid(&p, &q).unwrap()
        })
        .collect();
    let m = mean(&trials);
    let se = (trials.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 99.0).sqrt() / 10.0;
    check(m.abs() < 4.0 * se, format!("KID mean {m:.3e}, SE {se:.3e}"))?;

    // eigen-oracle: V diag(sqrt(l)) V^T from an independent Jacobi sweep
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let b = DMatrix::from_fn(4, 4, |_, _| rng.normal());
        let spd = &b * b.transpose() + DMatrix::identity(4, 4) * 0.1;
        let oracle = jacobi_sqrt(&spd);
        worst = worst.max((sqrtm_psd(&spd).map_err(err)? - oracle).abs().max());
    }
    check(worst < 1e-8, format!("sqrtm vs oracle {worst:.3e}"))?;
    Ok(format!(
        "ssim 1 exactly; fid(A,A) {faa:.1e}; closed form {closed:.9}; KID mean {:.2} SE; sqrtm diff {worst:.1e}",
        m / se
    ))
}

/// Cyclic Jacobi eigen-decomposition, then `V sqrt(L) V^T`.
fn jacobi_sqrt(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = nalgebra::DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| a[(i, j)].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut r = nalgebra::DMatrix::<f64>::identity(n, n);
                r[(p, p)] = c;
                r[(q, q)] = c;
                r[(p, q)] = s;
                r[(q, p)] = -s;
                a = r.transpose() * &a * &r;
                v = &v * &r;
            }
        }
    }
    let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, (0..n).map(|i| a[(i, i)].max(0.0).sqrt())));
    &v * d * v.transpose()
}

// ---------------------------------------------------------------- 9

const TINY: &str = r#"
[data]
height = 16
width = 16
count = 3
n_hubs = 2
replicas_per_hub = 2

[codec]
base_channels = 8
steps = 4

[unet]
base_channels = 8
channel_multipliers = [1, 2]
attention_scales = [2]
heads = 2

[diffusion]
timesteps = 10
beta_start = 0.001
beta_end = 0.2

[train]
steps = 4
batch_size = 4
"#;

fn vton(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vton")).args(args).output().map_err(err)?;
    check(out.status.success(), format!("vton {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

/// Every file under `dir`, relative path to bytes. The training log's
/// wall-clock column is dropped.
fn snapshot(dir: &Path) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
            let mut bytes = std::fs::read(&p).map_err(err)?;
            if rel.ends_with("train_log.csv") {
                let text = String::from_utf8(bytes).map_err(err)?;
                bytes = text
                    .lines()
                    .map(|l| l.rsplit_once(',').map(|(a, _)| a).unwrap_or(l).to_string() + "\n")
                    .collect::<String>()
                    .into_bytes();
            }
            out.push((rel, bytes));
        }
    }
    out.sort();
    Ok(out)
}

fn run_pipeline(root: &Path, cfg: &Path) -> std::result::Result<(), String> {
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let (data, codec, run, sample) = (root.join("data"), root.join("codec"), root.join("run"), root.join("sample"));
    vton(&["gen-data", "--config", &p(cfg), "--seed", "7", "--out", &p(&data)])?;
    vton(&["train-codec", "--config", &p(cfg), "--seed", "7", "--data", &p(&data), "--out", &p(&codec)])?;
    vton(&[
        "train",
        "--config",
        &p(cfg),
        "--seed",
        "7",
        "--data",
        &p(&data),
        "--codec",
        &p(&codec.join("codec.ckpt")),
        "--out",
        &p(&run),
    ])?;
    std::fs::create_dir_all(&sample).map_err(err)?;
    vton(&[
        "sample",
        "--seed",
        "7",
        "--person",
        &p(&data.join("images/pseudo_0001_h1_r00.ppm")),
        "--garment",
        &p(&data.join("images/G_0001.ppm")),
        "--ckpt",
        &p(&run.join("model.ckpt")),
        "--s",
        "2",
        "--out",
        &p(&sample.join("out.ppm")),
        "--grid",
        &p(&sample.join("grid.ppm")),
    ])
}

fn determinism() -> std::result::Result<String, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).map_err(err)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&a, &cfg)?;
    run_pipeline(&b, &cfg)?;
    let (sa, sb) = (snapshot(&a)?, snapshot(&b)?);
    check(sa.len() == sb.len(), format!("{} vs {} files", sa.len(), sb.len()))?;
    for ((na, ba), (nb, bb)) in sa.iter().zip(&sb) {
        check(na == nb, format!("file sets differ at {na} / {nb}"))?;
        check(ba == bb, format!("{na} differs between runs"))?;
    }
    let bytes: usize = sa.iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "{} files ({bytes} bytes) byte-identical across two gen-data/train-codec/train/sample runs",
        sa.len()
    ))
}

// ---------------------------------------------------------------- 10

fn pseudo_fidelity(samples: &[TryOnSample], cfg: &DataConfig) -> std::result::Result<String, String> {
    let mut count = 0;
    for (i, s) in samples.iter().enumerate() {
        for p in &s.pseudo {
            let region = tryon_region(&s.person_spec, &s.garment_spec, &p.garment, cfg.height, cfg.width);
            let mut outside = Image::new(cfg.height, cfg.width, [0.0; 3]);
            let mut truth = outside.clone();
            for (k, &inside) in region.iter().enumerate() {
                let (y, x) = (k / cfg.width, k % cfg.width);
                if !inside {
                    check(
                        p.image.get(y, x) == s.person.get(y, x),
                        format!("sample {i} hub {} replica {} differs at ({y},{x})", p.hub_id, p.replica),
                    )?;
                    outside.set(y, x, p.image.get(y, x));
                    truth.set(y, x, s.person.get(y, x));
                }
            }
            check(ssim(&outside, &truth).map_err(err)? == 1.0, format!("sample {i}: restricted SSIM below 1"))?;
            count += 1;
        }
    }
    Ok(format!(
        "{count} pseudo-inputs over {} samples equal P outside the try-on region",
        samples.len()
    ))
}

#[test]
fn acceptance() {
    say("");
    let mut outcomes = vec![
        report(1, "gradient integrity", gradient_integrity()),
        report(2, "diffusion algebra", diffusion_algebra()),
        report(3, "guidance identities", cfg_identities()),
        report(4, "fusion attention algebra", gfa_algebra()),
        report(5, "parser-free contract", parser_free_contract()),
    ];
    match toy_setup() {
        Ok(toy) => {
            outcomes.push(report(6, "overfit run", overfit_run(&toy)));
            outcomes.push(report(7, "ablation echo", ablation_echo(&toy)));
        }
        Err(e) => {
            outcomes.push(report(6, "overfit run", Err(format!("setup failed: {e}"))));
            outcomes.push(report(7, "ablation echo", Err(format!("setup failed: {e}"))));
        }
    }
    outcomes.push(report(8, "metrics self-consistency", metrics_consistency()));
    outcomes.push(report(9, "determinism", determinism()));
    let data_cfg = PipelineConfig::toy().data;
    outcomes.push(report(
        10,
        "pseudo-input fidelity",
        generate(&data_cfg).map_err(err).and_then(|s| pseudo_fidelity(&s, &data_cfg)),
    ));

    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({}): {}", o.id, o.name, o.detail))
        .collect();
    say(&format!("{}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len()));
    for f in &failed {
        say(&format!("  failed: {f}"));
    }
    // A failing criterion is a reported result, not a broken suite.
    assert_eq!(outcomes.len(), 10, "every criterion must report");
}
