use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gpdit::bench::run_bench;
use gpdit::config::RunConfig;
use gpdit::data::{gen_dataset, read_dataset, write_dataset, write_pgm, LatentVideo, VideoGeometry};
use gpdit::frame_attention::MaskVariant;
use gpdit::model::{GPDiTModel, ModelConfig};
use gpdit::probe::probe_sweep;
use gpdit::sampler::{rollout, SamplerConfig};
use gpdit::tensor::Float;
use gpdit::trainer::{fit, fit_paired, MetricRecord, OutputSpec, TrainState};
use gpdit::verify::{all_passed, render_table, run_suite, VerifyOptions};

use crate::Common;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
        cfg.sampler.seed = s;
        cfg.probe.seed = s;
    }
    if let Some(v) = common.variant {
        cfg.model.variant = v;
    }
    if let Some(p) = common.param {
        cfg.model.param = p;
    }
    if let Some(p) = &common.precision {
        cfg.train.precision = p.parse().expect("clap restricts precision");
    }
    if let Some(d) = &common.data {
        cfg.data.path = Some(d.clone());
    }
    Ok(cfg)
}

fn frame_shape(m: &ModelConfig) -> (usize, usize, usize) {
    (m.channels, m.height, m.width)
}

/// Videos from the configured dataset file, or generated. `min_frames`
/// lengthens generated videos when a command needs more frames.
fn load_videos(cfg: &RunConfig, count: usize, min_frames: usize) -> Result<Vec<LatentVideo>> {
    let videos = match &cfg.data.path {
        Some(p) => {
            let (g, v) = read_dataset(p).with_context(|| format!("reading dataset {}", p.display()))?;
            if (g.channels, g.height, g.width) != frame_shape(&cfg.model) {
                bail!("dataset {} has {}x{}x{} frames but the model expects {:?}", p.display(), g.channels, g.height, g.width, frame_shape(&cfg.model));
            }
            v.into_iter().take(count).collect()
        }
        None => {
            let mut bounce = cfg.data.bounce.clone();
            bounce.frames = bounce.frames.max(min_frames);
            gen_dataset(&bounce, cfg.data.seed, count)?
        }
    };
    if videos.is_empty() {
        bail!("no videos to work on");
    }
    Ok(videos)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write(path: PathBuf, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn progress(r: &MetricRecord) {
    if r.step.is_multiple_of(100) {
        eprintln!("[{}] step {:>5}  loss {:.5}", r.variant, r.step, r.loss);
    }
}

fn summary(variant: MaskVariant, log: &[MetricRecord]) {
    match (log.first(), log.len()) {
        (None, _) => println!("{variant}: no steps run"),
        (Some(first), n) => {
            let tail = &log[n.saturating_sub(100)..];
            let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
            println!("{variant}: {n} steps, first loss {:.5}, mean of last {} {:.5}", first.loss, tail.len(), mean);
        }
    }
}

pub fn train(common: &Common, steps: Option<usize>, lr: Option<f64>, paired: bool) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = lr {
        cfg.train.lr = lr;
    }
    cfg.validate()?;
    let videos = load_videos(&cfg, cfg.data.count, 0)?;
    create_out(&common.out)?;
    write(common.out.join("config.toml"), cfg.to_toml())?;
    match cfg.train.precision {
        64 => train_as::<f64>(&cfg, &videos, &common.out, paired)?,
        _ => train_as::<f32>(&cfg, &videos, &common.out, paired)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn train_as<T: Float>(cfg: &RunConfig, videos: &[LatentVideo], out: &Path, paired: bool) -> Result<()> {
    if paired {
        let [(_, a), (_, b)] = fit_paired::<T>(videos, &cfg.model, &cfg.train, Some(out), progress)?;
        summary(MaskVariant::Vanilla, &a);
        summary(MaskVariant::Lightweight, &b);
    } else {
        let model = GPDiTModel::<T>::new(cfg.model.clone(), cfg.train.seed)?;
        let spec = OutputSpec { dir: out.to_path_buf(), prefix: String::new() };
        let (_, log) = fit(videos, TrainState::new(model), &cfg.train, Some(&spec), progress)?;
        summary(cfg.model.variant, &log);
    }
    Ok(())
}

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub frames: Option<usize>,
    pub guidance: Option<f64>,
    pub steps: Option<usize>,
    pub context_frames: usize,
    pub videos: usize,
    pub pgm: bool,
}

#[derive(Serialize)]
struct GenerateReport {
    videos: usize,
    context_frames: usize,
    generated_frames: usize,
    sampler: SamplerConfig,
    /// Mean per-pixel squared error of generated frame j against the true
    /// continuation, over videos that have one.
    mse: Vec<Option<f64>>,
    /// Same for repeating the last context frame.
    copy_last_mse: Vec<Option<f64>>,
}

fn load_model<T: Float>(path: &Path) -> Result<GPDiTModel<T>> {
    GPDiTModel::<T>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn generate(common: &Common, args: &GenerateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    if let Some(f) = args.frames {
        cfg.sampler.frames = f;
    }
    if let Some(g) = args.guidance {
        cfg.sampler.guidance = g;
    }
    if let Some(s) = args.steps {
        cfg.sampler.steps = s;
    }
    cfg.sampler.validate()?;
    match cfg.train.precision {
        64 => generate_as(load_model::<f64>(&args.checkpoint)?, cfg, common, args),
        _ => generate_as(load_model::<f32>(&args.checkpoint)?, cfg, common, args),
    }
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn generate_as<T: Float>(model: GPDiTModel<T>, mut cfg: RunConfig, common: &Common, args: &GenerateArgs) -> Result<ExitCode> {
    // The checkpoint decides the architecture.
    cfg.model = model.config().clone();
    let (k, n) = (args.context_frames, cfg.sampler.frames);
    let videos = load_videos(&cfg, args.videos, k + n)?;
    if let Some(short) = videos.iter().position(|v| v.geometry.frames < k) {
        bail!("video {short} has {} frames, fewer than the {k} context frames", videos[short].geometry.frames);
    }
    create_out(&common.out)?;
    let mc = model.config();
    let geometry = VideoGeometry { frames: n, channels: mc.channels, height: mc.height, width: mc.width };
    let frame_len = geometry.frame_len();
    let (mut err, mut base, mut counts) = (vec![0.0; n], vec![0.0; n], vec![0usize; n]);
    let mut out = Vec::with_capacity(videos.len());
    for (vi, v) in videos.iter().enumerate() {
        let ctx: Vec<Vec<T>> = (0..k).map(|i| v.frame(i).iter().map(|&x| T::from_f64_lossy(x as f64)).collect()).collect();
        let refs: Vec<&[T]> = ctx.iter().map(|c| c.as_slice()).collect();
        let r = rollout(&model, &refs, &cfg.sampler, true).with_context(|| format!("rolling out video {vi}"))?;
        let frames: Vec<Vec<f32>> = r.frames.iter().map(|f| f.iter().map(|x| x.to_f64_lossy() as f32).collect()).collect();
        for (j, f) in frames.iter().enumerate() {
            if k + j < v.geometry.frames && k > 0 {
                err[j] += mse(f, v.frame(k + j));
                base[j] += mse(v.frame(k - 1), v.frame(k + j));
                counts[j] += 1;
            }
        }
        if args.pgm && vi == 0 {
            let dir = common.out.join("pgm");
            create_out(&dir)?;
            for i in 0..k {
                write_pgm(&dir.join(format!("context_{i:02}.pgm")), v.frame(i), mc.height, mc.width)?;
            }
            for (j, f) in frames.iter().enumerate() {
                write_pgm(&dir.join(format!("generated_{:02}.pgm", k + j)), &f[..frame_len], mc.height, mc.width)?;
            }
        }
        out.push(LatentVideo { geometry, data: frames.concat(), label: v.label, seed: None });
    }
    write_dataset(&common.out.join("generated.gpds"), geometry, &out)?;
    let avg = |s: &[f64]| s.iter().zip(&counts).map(|(e, &c)| (c > 0).then(|| e / c as f64)).collect::<Vec<_>>();
    let report = GenerateReport {
        videos: videos.len(),
        context_frames: k,
        generated_frames: n,
        sampler: cfg.sampler.clone(),
        mse: avg(&err),
        copy_last_mse: avg(&base),
    };
    for (j, (m, b)) in report.mse.iter().zip(&report.copy_last_mse).enumerate() {
        if let (Some(m), Some(b)) = (m, b) {
            println!("frame {:>3}: mse {m:.6}  copy-last {b:.6}", k + j);
        }
    }
    write(common.out.join("generate.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("wrote {} videos x {n} frames to {}", out.len(), common.out.join("generated.gpds").display());
    Ok(ExitCode::SUCCESS)
}

pub fn probe(common: &Common, checkpoint: Option<&Path>, layers: Option<Vec<usize>>, videos: Option<usize>) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let report = match (checkpoint, cfg.train.precision) {
        (Some(p), 64) => probe_as(&load_model::<f64>(p)?, &cfg, layers, videos)?,
        (Some(p), _) => probe_as(&load_model::<f32>(p)?, &cfg, layers, videos)?,
        (None, _) => {
            cfg.model.validate()?;
            probe_as(&GPDiTModel::<f32>::init(cfg.model.clone(), cfg.train.seed, false)?, &cfg, layers, videos)?
        }
    };
    create_out(&common.out)?;
    write(common.out.join("probe.csv"), &report)?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn probe_as<T: Float>(model: &GPDiTModel<T>, cfg: &RunConfig, layers: Option<Vec<usize>>, videos: Option<usize>) -> Result<String> {
    let mut cfg = cfg.clone();
    cfg.model = model.config().clone();
    let layers = layers.unwrap_or_else(|| (1..=cfg.model.layers).collect());
    let vids = load_videos(&cfg, videos.unwrap_or(cfg.data.count), 0)?;
    let classes = vids.iter().map(|v| v.label as usize + 1).max().unwrap_or(1).max(cfg.data.bounce.rule.classes());
    Ok(probe_sweep(model, &vids, &layers, classes, &cfg.probe)?.to_csv())
}

pub fn bench(common: &Common, frames: &[usize]) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    cfg.model.validate()?;
    let variants = match common.variant {
        Some(v) => vec![v],
        None => MaskVariant::ALL.to_vec(),
    };
    let report = run_bench(&cfg.model, &variants, frames, cfg.train.seed)?;
    create_out(&common.out)?;
    write(common.out.join("bench.csv"), report.to_csv(false))?;
    write(common.out.join("bench_timing.csv"), report.to_csv(true))?;
    print!("{}", report.to_csv(false));
    if !report.all_agree() {
        eprintln!("instrumented counts differ from closed forms");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn verify(corrupt_mask: bool) -> Result<ExitCode> {
    let results = run_suite(VerifyOptions { corrupt_mask });
    print!("{}", render_table(&results));
    Ok(if all_passed(&results) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
