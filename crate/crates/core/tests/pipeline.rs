use gpdit::bench::run_bench;
use gpdit::config::RunConfig;
use gpdit::data::{gen_dataset, read_dataset, write_dataset, BounceParams};
use gpdit::frame_attention::MaskVariant;
use gpdit::model::GPDiTModel;
use gpdit::sampler::{rollout, SamplerConfig};
use gpdit::trainer::{fit, OutputSpec, TrainState};
use gpdit::verify::{all_passed, run_suite, VerifyOptions};

const RUN: &str = r#"
[model]
layers = 2
hidden = 16
mlp = 32
heads = 2
patch = 4

[train]
batch = 2
steps = 3
lr = 1e-3

[data]
count = 6

[data.bounce]
frames = 4
"#;

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = BounceParams { frames: 5, ..Default::default() };
    let videos = gen_dataset(&p, 4, 7).unwrap();
    let path = dir.path().join("v.gpds");
    write_dataset(&path, p.geometry(), &videos).unwrap();
    let (g, back) = read_dataset(&path).unwrap();
    assert_eq!(g, p.geometry());
    assert_eq!(back.len(), videos.len());
    for (a, b) in videos.iter().zip(&back) {
        assert_eq!((&a.data, a.label), (&b.data, b.label));
    }
}

#[test]
fn config_to_checkpoint_to_rollout() {
    let cfg = RunConfig::parse(RUN).unwrap();
    cfg.validate().unwrap();
    let videos = gen_dataset(&cfg.data.bounce, cfg.data.seed, cfg.data.count).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = OutputSpec { dir: dir.path().to_path_buf(), prefix: String::new() };
    let state = TrainState::new(GPDiTModel::<f32>::new(cfg.model.clone(), cfg.train.seed).unwrap());
    let (trained, log) = fit(&videos, state, &cfg.train, Some(&out), |_| {}).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.loss.is_finite()));

    let loaded = GPDiTModel::<f32>::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded.param_digest(), trained.model.param_digest());
    let ctx = [videos[0].frame(0), videos[0].frame(1)];
    let sc = SamplerConfig { steps: 4, frames: 2, ..Default::default() };
    let a = rollout(&trained.model, &ctx, &sc, true).unwrap();
    let b = rollout(&loaded, &ctx, &sc, true).unwrap();
    assert_eq!(a.frames, b.frames);
    assert!(a.frames.iter().flatten().all(|x| x.is_finite()));
}

#[test]
fn both_variants_share_a_checkpoint_layout() {
    let cfg = RunConfig::parse(RUN).unwrap();
    let m = GPDiTModel::<f32>::new(cfg.model.clone(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for v in MaskVariant::ALL {
        let path = dir.path().join(format!("{v}.ckpt"));
        m.with_variant(v).save(&path).unwrap();
        let back = GPDiTModel::<f32>::load(&path).unwrap();
        assert_eq!(back.config().variant, v);
        assert_eq!(back.params(), m.params());
    }
}

#[test]
fn invariant_suite_passes() {
    let results = run_suite(VerifyOptions::default());
    assert!(all_passed(&results), "{results:?}");
}

#[test]
fn bench_counts_agree_with_closed_forms() {
    let cfg = RunConfig::parse(RUN).unwrap();
    let report = run_bench(&cfg.model, &MaskVariant::ALL, &[1, 2, 8], 0).unwrap();
    assert!(report.all_agree());
    assert_eq!(report.pair_ratio(8), Some(44.0 / 72.0));
}
