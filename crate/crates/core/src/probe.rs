//! Linear probing of frozen features: mean-pooled hidden states after a
//! block, standardised, then a multinomial logistic layer trained by
//! full-batch gradient descent.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LatentVideo;
use crate::model::{GPDiTModel, ModelError};
use crate::rng;
use crate::tensor::Float;

pub const CSV_HEADER: &str = "layer,accuracy,n_train,n_test,seed";

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("layer {layer} outside 1..={layers}")]
    Layer { layer: usize, layers: usize },
    #[error("training split has {0} class(es); need at least 2")]
    Classes(usize),
    #[error("invalid probe input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How frozen features are read out of the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureReading {
    /// Clean frames only, so no time rotation is ever applied.
    #[default]
    CleanPath,
    /// Clean frames with the temporal positional channels zeroed as well.
    NoTemporalPositions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Share of videos held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
    pub reading: FeatureReading,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.1, test_fraction: 0.25, seed: 0, reading: FeatureReading::CleanPath }
    }
}

/// Pooled features of `video` after block `layer` (1-based).
pub fn extract_features<T: Float>(model: &GPDiTModel<T>, video: &LatentVideo, layer: usize, reading: FeatureReading) -> Result<Vec<f64>, ProbeError> {
    let layers = model.config().layers;
    if layer == 0 || layer > layers {
        return Err(ProbeError::Layer { layer, layers });
    }
    Ok(extract_all_layers(model, video, reading)?.swap_remove(layer - 1))
}

/// Pooled features after every block, from a single forward pass.
pub fn extract_all_layers<T: Float>(model: &GPDiTModel<T>, video: &LatentVideo, reading: FeatureReading) -> Result<Vec<Vec<f64>>, ProbeError> {
    let frames: Vec<Vec<T>> = video.frames().iter().map(|f| f.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()).collect();
    let refs: Vec<&[T]> = frames.iter().map(|f| f.as_slice()).collect();
    let pooled = model.pooled_features_with(&refs, reading == FeatureReading::CleanPath)?;
    Ok(pooled.into_iter().map(|l| l.into_iter().map(|x| x.to_f64_lossy()).collect()).collect())
}

/// Disjoint `(train, test)` index sets; the test side gets
/// `round(n·test_fraction)` items, at least one and at most `n − 1`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), ProbeError> {
    if n < 2 {
        return Err(ProbeError::Input(format!("need at least 2 samples to split, got {n}")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ProbeError::Input(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "probe", 0));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

/// Fitted probe with its accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in x {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        // Constant columns carry no signal and map to zero.
        let inv_std = var.iter().map(|&v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        Self { mean, inv_std }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect()
    }
}

fn logits(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

fn argmax(v: &[f64]) -> usize {
    // First maximum wins, so ties resolve to the lowest class.
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Multinomial logistic regression from zero weights, full-batch gradient
/// descent on mean cross-entropy, no regularisation. Features are
/// standardised with training statistics.
pub fn train_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeFit, ProbeError> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(ProbeError::Input("empty train or test split".into()));
    }
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(ProbeError::Input("feature and label counts differ".into()));
    }
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(ProbeError::Input("ragged feature rows".into()));
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(ProbeError::Input(format!("label {y} with {classes} classes")));
    }
    let mut seen = vec![false; classes];
    train_y.iter().for_each(|&y| seen[y] = true);
    let present = seen.iter().filter(|&&s| s).count();
    if present < 2 {
        return Err(ProbeError::Classes(present));
    }

    let std = Standardizer::fit(train_x);
    let xs: Vec<Vec<f64>> = train_x.iter().map(|r| std.apply(r)).collect();
    let (mut w, mut b) = (vec![0.0; classes * d], vec![0.0; classes]);
    let (mut gw, mut gb) = (vec![0.0; classes * d], vec![0.0; classes]);
    let mut z = vec![0.0; classes];
    let inv_n = 1.0 / xs.len() as f64;
    for _ in 0..cfg.epochs {
        gw.fill(0.0);
        gb.fill(0.0);
        for (x, &y) in xs.iter().zip(train_y) {
            logits(&w, &b, x, &mut z);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            z.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = z.iter().sum();
            for k in 0..classes {
                let g = (z[k] / s - if k == y { 1.0 } else { 0.0 }) * inv_n;
                gb[k] += g;
                gw[k * d..(k + 1) * d].iter_mut().zip(x).for_each(|(a, c)| *a += g * c);
            }
        }
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= cfg.lr * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= cfg.lr * g);
    }

    let accuracy_of = |rows: &mut dyn Iterator<Item = Vec<f64>>, ys: &[usize]| {
        let mut z = vec![0.0; classes];
        let hits = rows.zip(ys).filter(|(x, &y)| {
            logits(&w, &b, x, &mut z);
            argmax(&z) == y
        });
        hits.count() as f64 / ys.len() as f64
    };
    Ok(ProbeFit {
        accuracy: accuracy_of(&mut test_x.iter().map(|r| std.apply(r)), test_y),
        train_accuracy: accuracy_of(&mut xs.into_iter(), train_y),
        n_train: train_x.len(),
        n_test: test_x.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub epochs: usize,
    pub seed: u64,
}

impl ProbeReport {
    /// Row with the highest held-out accuracy (earliest layer on ties).
    pub fn best(&self) -> Option<&ProbeRow> {
        self.rows.iter().fold(None, |best: Option<&ProbeRow>, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.accuracy, r.n_train, r.n_test, self.seed);
        }
        s
    }
}

/// Extracts features once per video and fits one probe per layer.
pub fn probe_sweep<T: Float>(
    model: &GPDiTModel<T>,
    videos: &[LatentVideo],
    layers: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, ProbeError> {
    if layers.is_empty() {
        return Err(ProbeError::Input("no layers requested".into()));
    }
    let n_layers = model.config().layers;
    if let Some(&layer) = layers.iter().find(|&&l| l == 0 || l > n_layers) {
        return Err(ProbeError::Layer { layer, layers: n_layers });
    }
    let feats = videos.iter().map(|v| extract_all_layers(model, v, cfg.reading)).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = videos.iter().map(|v| v.label as usize).collect();
    let (train, test) = split_indices(videos.len(), cfg.test_fraction, cfg.seed)?;
    let pick = |idx: &[usize], l: usize| idx.iter().map(|&i| feats[i][l - 1].clone()).collect::<Vec<_>>();
    let ys = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let rows = layers
        .iter()
        .map(|&l| {
            let fit = train_probe(&pick(&train, l), &ys(&train), &pick(&test, l), &ys(&test), classes, cfg)?;
            Ok(ProbeRow { layer: l, accuracy: fit.accuracy, train_accuracy: fit.train_accuracy, n_train: fit.n_train, n_test: fit.n_test })
        })
        .collect::<Result<Vec<_>, ProbeError>>()?;
    Ok(ProbeReport { rows, epochs: cfg.epochs, seed: cfg.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, BounceParams};
    use crate::frame_attention::MaskVariant;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { layers: 2, hidden: 16, mlp: 32, heads: 2, patch: 4, variant: MaskVariant::Lightweight, ..ModelConfig::desk() }
    }

    fn blobs(n: usize, seed: u64, sep: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let xs = ys.iter().map(|&y| vec![r.random_range(-1.0..1.0) + sep * y as f64, r.random_range(-1.0..1.0)]).collect();
        (xs, ys)
    }

    #[test]
    fn separable_classes_are_learned_perfectly() {
        let (x, y) = blobs(80, 1, 3.0);
        let fit = train_probe(&x[..60], &y[..60], &x[60..], &y[60..], 2, &ProbeConfig::default()).unwrap();
        assert_eq!(fit.accuracy, 1.0);
        assert_eq!(fit.train_accuracy, 1.0);
    }

    #[test]
    fn identical_features_give_the_majority_rate() {
        let x = vec![vec![0.5, -2.0]; 40];
        let y: Vec<usize> = (0..40).map(|i| if i % 10 < 7 { 1 } else { 0 }).collect();
        let fit = train_probe(&x[..30], &y[..30], &x[30..], &y[30..], 3, &ProbeConfig::default()).unwrap();
        let majority = y[30..].iter().filter(|&&c| c == 1).count() as f64 / 10.0;
        assert_eq!(fit.accuracy, majority);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        // Permutation null: with labels independent of the features the
        // held-out accuracy over 600 samples sits within ±4 standard
        // errors of 1/2.
        let (x, mut y) = blobs(2400, 3, 3.0);
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        let fit = train_probe(&x[..1800], &y[..1800], &x[1800..], &y[1800..], 2, &ProbeConfig::default()).unwrap();
        let se = (0.25f64 / 600.0).sqrt();
        assert!((fit.accuracy - 0.5).abs() <= 4.0 * se, "{}", fit.accuracy);
    }

    #[test]
    fn single_class_training_split_is_rejected() {
        let x = vec![vec![1.0]; 4];
        assert!(matches!(train_probe(&x, &[1; 4], &x, &[0; 4], 2, &ProbeConfig::default()), Err(ProbeError::Classes(1))));
        assert!(train_probe(&x, &[0, 5, 0, 1], &x, &[0; 4], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let (tr, te) = split_indices(10, 0.25, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.25, 7).unwrap(), (tr, te));
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(5, 1.0, 0).is_err());
    }

    #[test]
    fn features_are_deterministic_and_leave_the_model_alone() {
        let m = GPDiTModel::<f32>::init(small(), 2, false).unwrap();
        let v = gen_dataset(&BounceParams::default(), 1, 2).unwrap();
        let before = m.param_digest();
        let a = extract_features(&m, &v[0], 1, FeatureReading::CleanPath).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, extract_features(&m, &v[0].clone(), 1, FeatureReading::CleanPath).unwrap());
        assert_ne!(a, extract_features(&m, &v[0], 1, FeatureReading::NoTemporalPositions).unwrap());
        assert_eq!(m.param_digest(), before);
        assert!(matches!(extract_features(&m, &v[0], 0, FeatureReading::CleanPath), Err(ProbeError::Layer { .. })));
        assert!(matches!(extract_features(&m, &v[0], 3, FeatureReading::CleanPath), Err(ProbeError::Layer { .. })));
    }

    #[test]
    fn sweep_report_and_csv() {
        let m = GPDiTModel::<f32>::init(small(), 2, false).unwrap();
        let v = gen_dataset(&BounceParams::default(), 5, 40).unwrap();
        let cfg = ProbeConfig { seed: 3, ..Default::default() };
        let r = probe_sweep(&m, &v, &[2], 4, &cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!((r.rows[0].n_train, r.rows[0].n_test), (30, 10));
        assert!((0.0..=1.0).contains(&r.rows[0].accuracy));
        let csv = r.to_csv();
        assert!(csv.starts_with("layer,accuracy,n_train,n_test,seed\n2,"));
        assert!(csv.trim_end().ends_with(",30,10,3"));
        assert_eq!(r, probe_sweep(&m, &v, &[2], 4, &cfg).unwrap());
        assert!(probe_sweep(&m, &v, &[], 4, &cfg).is_err());
        assert!(probe_sweep(&m, &v, &[9], 4, &cfg).is_err());
    }

    #[test]
    fn random_init_features_with_shuffled_labels_are_at_chance() {
        // Permutation null on real backbone features: five random
        // backbones, labels shuffled, 100 held-out videos each. The
        // 4-class chance rate is 0.25 with standard error ~0.043.
        let mut v = gen_dataset(&BounceParams::default(), 11, 400).unwrap();
        let mut labels: Vec<u16> = v.iter().map(|x| x.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(12));
        v.iter_mut().zip(labels).for_each(|(x, l)| x.label = l);
        for seed in 0..5 {
            let m = GPDiTModel::<f32>::init(ModelConfig::desk(), seed, false).unwrap();
            let r = probe_sweep(&m, &v, &[4], 4, &ProbeConfig { seed, ..Default::default() }).unwrap();
            let acc = r.rows[0].accuracy;
            assert!((0.15..=0.40).contains(&acc), "seed {seed}: {acc}");
        }
    }

    #[test]
    fn converged_probe_fits_train_at_least_as_well() {
        let (x, y) = blobs(400, 9, 0.8);
        let fit = train_probe(&x[..300], &y[..300], &x[300..], &y[300..], 2, &ProbeConfig::default()).unwrap();
        assert!(fit.train_accuracy + 0.02 >= fit.accuracy);
    }

    #[test]
    fn best_prefers_earliest_tie() {
        let row = |layer, accuracy| ProbeRow { layer, accuracy, train_accuracy: 1.0, n_train: 1, n_test: 1 };
        let r = ProbeReport { rows: vec![row(1, 0.3), row(2, 0.5), row(3, 0.5)], epochs: 1, seed: 0 };
        assert_eq!(r.best().unwrap().layer, 2);
    }
}
