//! The frame-autoregressive diffusion transformer.
//!
//! Tokens are patch embeddings plus fixed sinusoidal positions (spatial
//! offset in the first half of the channels, frame index in the second).
//! Each pre-norm block rotates the noisy rows by the diffusion angle, then
//! runs masked attention and a GELU MLP with residuals. A zero-initialised
//! linear head maps the final noisy rows back to patch pixels.

mod checkpoint;
mod patch;
mod rotation;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use patch::{patchify, unpatchify, PatchGeometry};
pub use rotation::rotate_condition;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_attention::{attend, AttentionError, AttentionMask, AttentionStats, CacheError, KVCache, MaskVariant, Segment, SeqAttention, TokenKind};
use crate::rng;
use crate::schedule::{theta_of, Parameterization, ScheduleError};
use crate::tensor::{Float, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Geometry { what: &'static str, expected: usize, got: usize },
    #[error("cache does not match the request: {0}")]
    CacheMismatch(String),
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the time rotation is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationPlacement {
    /// Noisy rows of every block input.
    #[default]
    BlockInput,
    /// No time conditioning (ablation).
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub variant: MaskVariant,
    pub param: Parameterization,
    pub rotation: RotationPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 4 layers, hidden 128, 16×16 single-channel frames in 4×4 patches.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            mlp: 512,
            heads: 4,
            patch: 4,
            channels: 1,
            height: 16,
            width: 16,
            variant: MaskVariant::default(),
            param: Parameterization::default(),
            rotation: RotationPlacement::default(),
        }
    }

    /// The base-size configuration (12 layers, 768 hidden, 3072 MLP, 12 heads).
    pub fn base() -> Self {
        Self { layers: 12, hidden: 768, mlp: 3072, heads: 12, ..Self::desk() }
    }

    /// Two layers, hidden 8, two heads, one token per frame.
    pub fn tiny() -> Self {
        Self { layers: 2, hidden: 8, mlp: 16, heads: 2, patch: 2, channels: 1, height: 2, width: 2, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [self.hidden, self.mlp, self.heads, self.patch, self.channels, self.height, self.width];
        if self.layers > MAX_LAYERS || extents.iter().any(|&e| e > MAX_EXTENT) {
            return Err(ModelError::Config(format!("layers must be <= {MAX_LAYERS} and every extent <= {MAX_EXTENT}")));
        }
        if self.hidden == 0 || self.mlp == 0 || self.heads == 0 {
            return Err(ModelError::Config("hidden, mlp and heads must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(ModelError::Config(format!("hidden {} must be even for the rotation pairs", self.hidden)));
        }
        self.geometry().validate()
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry { channels: self.channels, height: self.height, width: self.width, patch: self.patch }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.geometry().tokens()
    }

    pub fn token_dim(&self) -> usize {
        self.geometry().token_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], init: Init) -> Self {
        Self { name, shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const EMBED_W: usize = 0;
const EMBED_B: usize = 1;
/// Sanity bounds so a hostile config cannot request absurd allocations.
pub const MAX_LAYERS: usize = 1024;
pub const MAX_EXTENT: usize = 1 << 16;

const BLOCK_BASE: usize = 2;
const PER_BLOCK: usize = 16;
const NORM1_G: usize = 0;
const NORM1_B: usize = 1;
const Q_W: usize = 2;
const Q_B: usize = 3;
const K_W: usize = 4;
const K_B: usize = 5;
const V_W: usize = 6;
const V_B: usize = 7;
const O_W: usize = 8;
const O_B: usize = 9;
const NORM2_G: usize = 10;
const NORM2_B: usize = 11;
const MLP_IN_W: usize = 12;
const MLP_IN_B: usize = 13;
const MLP_OUT_W: usize = 14;
const MLP_OUT_B: usize = 15;

/// Parameter inventory in storage order. Depends on the config only.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (h, m, td) = (cfg.hidden, cfg.mlp, cfg.token_dim());
    let mut specs = vec![ParamSpec::new("patch_embed.weight".into(), &[td, h], Init::Xavier), ParamSpec::new("patch_embed.bias".into(), &[h], Init::Zeros)];
    for b in 0..cfg.layers {
        let n = |s: &str| format!("blocks.{b}.{s}");
        specs.extend([
            ParamSpec::new(n("norm1.gain"), &[h], Init::Ones),
            ParamSpec::new(n("norm1.bias"), &[h], Init::Zeros),
            ParamSpec::new(n("attn.q.weight"), &[h, h], Init::Xavier),
            ParamSpec::new(n("attn.q.bias"), &[h], Init::Zeros),
            ParamSpec::new(n("attn.k.weight"), &[h, h], Init::Xavier),
            ParamSpec::new(n("attn.k.bias"), &[h], Init::Zeros),
            ParamSpec::new(n("attn.v.weight"), &[h, h], Init::Xavier),
            ParamSpec::new(n("attn.v.bias"), &[h], Init::Zeros),
            ParamSpec::new(n("attn.o.weight"), &[h, h], Init::Xavier),
            ParamSpec::new(n("attn.o.bias"), &[h], Init::Zeros),
            ParamSpec::new(n("norm2.gain"), &[h], Init::Ones),
            ParamSpec::new(n("norm2.bias"), &[h], Init::Zeros),
            ParamSpec::new(n("mlp.in.weight"), &[h, m], Init::Xavier),
            ParamSpec::new(n("mlp.in.bias"), &[m], Init::Zeros),
            ParamSpec::new(n("mlp.out.weight"), &[m, h], Init::Xavier),
            ParamSpec::new(n("mlp.out.bias"), &[h], Init::Zeros),
        ]);
    }
    specs.extend([
        ParamSpec::new("final_norm.gain".into(), &[h], Init::Ones),
        ParamSpec::new("final_norm.bias".into(), &[h], Init::Zeros),
        ParamSpec::new("head.weight".into(), &[h, td], Init::Zeros),
        ParamSpec::new("head.bias".into(), &[td], Init::Zeros),
    ]);
    specs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Attention and MLP weight matrices: `layers·(4·hidden² + 2·hidden·mlp)`.
    pub block_core: u64,
    pub total: u64,
}

/// Number of parameter tensors, without building the inventory.
pub fn tensor_count(cfg: &ModelConfig) -> usize {
    BLOCK_BASE + cfg.layers * PER_BLOCK + 4
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let (l, h, m) = (cfg.layers as u64, cfg.hidden as u64, cfg.mlp as u64);
    let total = param_specs(cfg).iter().map(|s| s.numel() as u64).sum();
    ParamCount { block_core: l * (4 * h * h + 2 * h * m), total }
}

/// One sequence of frame copies fed to [`GPDiTModel::forward`].
#[derive(Clone, Debug)]
pub struct TokenSequence<T> {
    pub segments: Vec<Segment>,
    /// `[segments.len()·P × token_dim]`, segment after segment.
    pub tokens: Tensor<T>,
    /// Diffusion time shared by every noisy segment.
    pub time: f64,
    /// Cut every noisy→clean edge (unconditional branch).
    pub drop_context: bool,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[noisy rows × token_dim]`, `None` when no noisy segment was given.
    pub prediction: Option<Var>,
    /// Stacked row index of each prediction row.
    pub noisy_rows: Vec<usize>,
    /// Hidden states after each block, `[rows × hidden]`.
    pub hidden: Vec<Var>,
    /// Per-block keys and values of the new rows only.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub stats: AttentionStats,
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Binding(pub Vec<Var>);

#[derive(Clone, Debug, PartialEq)]
pub struct GPDiTModel<T: Float> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

fn sinusoid(pos: usize, n: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate().take(n) {
        let k = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * k / n as f64);
        *o = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

impl<T: Float> GPDiTModel<T> {
    /// Xavier-uniform weights from the `"init"` stream, unit norms, zero
    /// biases and a zero output head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::init(config, seed, true)
    }

    /// Like [`new`](Self::new) but with `zero_head = false` the head is
    /// Xavier-initialised too, so gradients reach every parameter.
    pub fn init(config: ModelConfig, seed: u64, zero_head: bool) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut rng = rng::stream(seed, "init", 0);
        let head = specs.len() - 2;
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let init = if i == head && !zero_head { Init::Xavier } else { s.init };
                match init {
                    Init::Zeros => Tensor::zeros(s.shape.clone()),
                    Init::Ones => Tensor::from_fn(s.shape.clone(), |_| T::one()),
                    Init::Xavier => {
                        let a = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                        Tensor::from_fn(s.shape.clone(), |_| T::from_f64_lossy(rng.random_range(-a..a)))
                    }
                }
            })
            .collect();
        Ok(Self { config, specs, params })
    }

    /// Wraps existing tensors after checking them against the inventory.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(ModelError::Geometry { what: "parameter count", expected: specs.len(), got: params.len() });
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(ModelError::Config(format!("parameter {} has shape {:?}, expected {:?}", s.name, p.shape(), s.shape)));
            }
        }
        Ok(Self { config, specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_digest(&self) -> u64 {
        rng::digest(&self.params)
    }

    /// Same weights with a different mask variant; shapes are unaffected.
    pub fn with_variant(&self, variant: MaskVariant) -> Self {
        let mut m = self.clone();
        m.config.variant = variant;
        m
    }

    pub fn cast<U: Float>(&self) -> GPDiTModel<U> {
        GPDiTModel { config: self.config.clone(), specs: self.specs.clone(), params: self.params.iter().map(|p| p.cast()).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, encode_checkpoint(self))?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        decode_checkpoint(&std::fs::read(path)?)
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        Binding(self.params.iter().map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) }).collect())
    }

    pub fn new_cache(&self, capacity_frames: usize) -> KVCache<T> {
        let c = &self.config;
        KVCache::new(c.layers, c.heads, c.head_dim(), c.tokens_per_frame(), capacity_frames)
    }

    /// Patchifies consecutive frames into one `[frames·P × token_dim]` tensor.
    pub fn tokens_of(&self, frames: &[&[T]]) -> Result<Tensor<T>, ModelError> {
        let g = self.config.geometry();
        let mut data = Vec::with_capacity(frames.len() * g.frame_len());
        for f in frames {
            data.extend(patchify(f, &g)?.into_data());
        }
        Ok(Tensor::new([frames.len() * g.tokens(), g.token_dim()], data)?)
    }

    fn positional(&self, frame: usize, temporal_positions: bool, table: &mut HashMap<usize, Vec<T>>) -> Vec<T> {
        let (p, h) = (self.config.tokens_per_frame(), self.config.hidden);
        table
            .entry(frame)
            .or_insert_with(|| {
                let spatial = h / 2;
                let mut temporal = vec![0.0; h - spatial];
                if temporal_positions {
                    sinusoid(frame, h - spatial, &mut temporal);
                }
                let mut row = vec![0.0; spatial];
                let mut out = Vec::with_capacity(p * h);
                for offset in 0..p {
                    sinusoid(offset, spatial, &mut row);
                    out.extend(row.iter().chain(&temporal).map(|&x| T::from_f64_lossy(x)));
                }
                out
            })
            .clone()
    }

    /// Runs the network over stacked sequences.
    ///
    /// Without a cache every sequence attends within itself. With a cache
    /// exactly one sequence is allowed; it reads the cached clean frames
    /// (which must be frames `0..k`) before its own rows.
    pub fn forward(&self, tape: &mut Tape<T>, binding: &Binding, seqs: &[TokenSequence<T>], cache: Option<&KVCache<T>>) -> Result<ForwardPass, ModelError> {
        self.forward_with(tape, binding, seqs, cache, true)
    }

    fn forward_with(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        seqs: &[TokenSequence<T>],
        cache: Option<&KVCache<T>>,
        temporal_positions: bool,
    ) -> Result<ForwardPass, ModelError> {
        let cfg = &self.config;
        let (p, td) = (cfg.tokens_per_frame(), cfg.token_dim());
        if binding.0.len() != self.params.len() {
            return Err(ModelError::Geometry { what: "bound parameters", expected: self.params.len(), got: binding.0.len() });
        }
        if seqs.is_empty() {
            return Err(ModelError::Config("forward needs at least one sequence".into()));
        }
        let cached: Vec<Segment> = match cache {
            None => Vec::new(),
            Some(c) => {
                if seqs.len() != 1 {
                    return Err(ModelError::CacheMismatch(format!("a cached forward takes one sequence, got {}", seqs.len())));
                }
                if c.layers() != cfg.layers || c.hidden() != cfg.hidden || c.tokens_per_frame() != p {
                    return Err(ModelError::CacheMismatch("cache geometry differs from the model".into()));
                }
                if c.frames().iter().enumerate().any(|(i, &f)| i != f) {
                    return Err(ModelError::CacheMismatch(format!("cache must hold frames 0..k, holds {:?}", c.frames())));
                }
                if let Some(s) = seqs[0].segments.iter().find(|s| s.frame < c.frames().len()) {
                    return Err(ModelError::CacheMismatch(format!("frame {} is already cached", s.frame)));
                }
                c.frames().iter().map(|&f| Segment::clean(f)).collect()
            }
        };

        let mut masks: HashMap<(Vec<Segment>, bool), Arc<AttentionMask>> = HashMap::new();
        let mut plan = Vec::with_capacity(seqs.len());
        let (mut tokens, mut cos, mut sin, mut pos, mut noisy_rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut table = HashMap::new();
        let mut row = 0;
        for s in seqs {
            let n = s.segments.len() * p;
            if s.tokens.shape() != [n, td] {
                return Err(ModelError::Geometry { what: "sequence tokens", expected: n * td, got: s.tokens.numel() });
            }
            let angle = theta_of(s.time)?;
            let key = (s.segments.clone(), s.drop_context);
            let mask = match masks.get(&key) {
                Some(m) => m.clone(),
                None => {
                    let keys: Vec<Segment> = cached.iter().chain(&s.segments).copied().collect();
                    let m = Arc::new(AttentionMask::between(&s.segments, &keys, p, cfg.variant, s.drop_context)?);
                    masks.insert(key, m.clone());
                    m
                }
            };
            plan.push(SeqAttention { q_start: row, k_start: row, mask });
            tokens.extend_from_slice(s.tokens.data());
            for seg in &s.segments {
                pos.extend(self.positional(seg.frame, temporal_positions, &mut table));
                let noisy = seg.kind == TokenKind::Noisy;
                let (c, sn) = if noisy { (angle.cos, angle.sin) } else { (1.0, 0.0) };
                cos.extend(std::iter::repeat_n(T::from_f64_lossy(c), p));
                sin.extend(std::iter::repeat_n(T::from_f64_lossy(sn), p));
                if noisy {
                    noisy_rows.extend(row..row + p);
                }
                row += p;
            }
        }
        let rotate = cfg.rotation == RotationPlacement::BlockInput && !noisy_rows.is_empty();

        let w = |i: usize| binding.0[i];
        let x = tape.constant(Tensor::new([row, td], tokens)?);
        let pos = tape.constant(Tensor::new([row, cfg.hidden], pos)?);
        let e = tape.linear(x, w(EMBED_W), Some(w(EMBED_B)))?;
        let mut h = tape.add(e, pos)?;
        let mut pass = ForwardPass { prediction: None, noisy_rows, hidden: vec![], keys: vec![], values: vec![], stats: Default::default() };
        for b in 0..cfg.layers {
            let w = |i: usize| binding.0[BLOCK_BASE + b * PER_BLOCK + i];
            if rotate {
                h = rotation::rotate_rows(tape, h, cos.clone(), sin.clone())?;
            }
            let a = tape.layer_norm(h, w(NORM1_G), w(NORM1_B))?;
            let q = tape.linear(a, w(Q_W), Some(w(Q_B)))?;
            let k = tape.linear(a, w(K_W), Some(w(K_B)))?;
            let v = tape.linear(a, w(V_W), Some(w(V_B)))?;
            pass.keys.push(k);
            pass.values.push(v);
            let (k_all, v_all) = match cache.and_then(|c| c.layer_tensors(b)) {
                Some((ck, cv)) => {
                    let (ck, cv) = (tape.constant(ck), tape.constant(cv));
                    (tape.concat_rows(ck, k)?, tape.concat_rows(cv, v)?)
                }
                None => (k, v),
            };
            let att = attend(tape, q, k_all, v_all, cfg.heads, &plan, &mut pass.stats)?;
            let o = tape.linear(att, w(O_W), Some(w(O_B)))?;
            h = tape.add(h, o)?;
            let m = tape.layer_norm(h, w(NORM2_G), w(NORM2_B))?;
            let m = tape.linear(m, w(MLP_IN_W), Some(w(MLP_IN_B)))?;
            let m = tape.gelu(m);
            let m = tape.linear(m, w(MLP_OUT_W), Some(w(MLP_OUT_B)))?;
            h = tape.add(h, m)?;
            pass.hidden.push(h);
        }
        if !pass.noisy_rows.is_empty() {
            let last = self.params.len() - 4;
            let g = tape.gather_rows(h, &pass.noisy_rows)?;
            let g = tape.layer_norm(g, w(last), w(last + 1))?;
            pass.prediction = Some(tape.linear(g, w(last + 2), Some(w(last + 3)))?);
        }
        Ok(pass)
    }

    /// Runs clean frame `frame` (which must equal the number of cached
    /// frames) through every layer and appends its keys and values.
    pub fn encode_frame(&self, frame: usize, pixels: &[T], cache: &mut KVCache<T>) -> Result<AttentionStats, ModelError> {
        self.encode_tokens(frame, &self.tokens_of(&[pixels])?, cache)
    }

    /// [`encode_frame`](Self::encode_frame) on an already patchified frame.
    pub fn encode_tokens(&self, frame: usize, tokens: &Tensor<T>, cache: &mut KVCache<T>) -> Result<AttentionStats, ModelError> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let seq = TokenSequence { segments: vec![Segment::clean(frame)], tokens: tokens.clone(), time: 0.0, drop_context: false };
        let pass = self.forward(&mut tape, &binding, &[seq], Some(cache))?;
        let ks: Vec<_> = pass.keys.iter().map(|&k| tape.value(k).clone()).collect();
        let vs: Vec<_> = pass.values.iter().map(|&v| tape.value(v).clone()).collect();
        cache.append(frame, &ks, &vs)?;
        Ok(pass.stats)
    }

    /// Prediction for noisy frame `frame` at time `t` given the cached clean
    /// frames. `x_t` is `[P × token_dim]`.
    pub fn predict_cached(
        &self,
        frame: usize,
        x_t: &Tensor<T>,
        t: f64,
        cache: &KVCache<T>,
        drop_context: bool,
    ) -> Result<(Tensor<T>, AttentionStats), ModelError> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let seq = TokenSequence { segments: vec![Segment::noisy(frame)], tokens: x_t.clone(), time: t, drop_context };
        let pass = self.forward(&mut tape, &binding, &[seq], Some(cache))?;
        let pred = pass.prediction.expect("noisy segment present");
        Ok((tape.value(pred).clone(), pass.stats))
    }

    /// Same prediction without a cache: the whole `[c_0 … c_{i-1}, n_i]`
    /// sequence is recomputed.
    pub fn predict_recompute(&self, context: &[&[T]], x_t: &Tensor<T>, t: f64, drop_context: bool) -> Result<(Tensor<T>, AttentionStats), ModelError> {
        let ctx = context.iter().map(|c| self.tokens_of(&[c])).collect::<Result<Vec<_>, _>>()?;
        self.predict_recompute_tokens(&ctx, x_t, t, drop_context)
    }

    pub fn predict_recompute_tokens(
        &self,
        context: &[Tensor<T>],
        x_t: &Tensor<T>,
        t: f64,
        drop_context: bool,
    ) -> Result<(Tensor<T>, AttentionStats), ModelError> {
        let i = context.len();
        let mut data = Vec::with_capacity((i + 1) * x_t.numel());
        for c in context.iter().chain([x_t]) {
            if c.shape() != x_t.shape() {
                return Err(ModelError::Geometry { what: "context frame tokens", expected: x_t.numel(), got: c.numel() });
            }
            data.extend_from_slice(c.data());
        }
        let tokens = Tensor::new([(i + 1) * x_t.rows(), x_t.last_dim()], data)?;
        let segments = (0..i).map(Segment::clean).chain([Segment::noisy(i)]).collect();
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let pass = self.forward(&mut tape, &binding, &[TokenSequence { segments, tokens, time: t, drop_context }], None)?;
        let pred = pass.prediction.expect("noisy segment present");
        Ok((tape.value(pred).clone(), pass.stats))
    }

    /// Mean over all tokens of the hidden state after each block, for a
    /// clean-only pass over `frames` (no time rotation is involved).
    pub fn pooled_features(&self, frames: &[&[T]]) -> Result<Vec<Vec<T>>, ModelError> {
        self.pooled_features_with(frames, true)
    }

    /// As [`pooled_features`](Self::pooled_features); with
    /// `temporal_positions = false` the temporal half of the positional
    /// encoding is left at zero for every frame.
    pub fn pooled_features_with(&self, frames: &[&[T]], temporal_positions: bool) -> Result<Vec<Vec<T>>, ModelError> {
        if frames.is_empty() {
            return Err(ModelError::Config("feature extraction needs at least one frame".into()));
        }
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let seq = TokenSequence { segments: (0..frames.len()).map(Segment::clean).collect(), tokens: self.tokens_of(frames)?, time: 0.0, drop_context: false };
        let pass = self.forward_with(&mut tape, &binding, &[seq], None, temporal_positions)?;
        Ok(pass
            .hidden
            .iter()
            .map(|&h| {
                let v = tape.value(h);
                let mut mean = vec![T::zero(); v.last_dim()];
                for r in v.data().chunks(v.last_dim()) {
                    mean.iter_mut().zip(r).for_each(|(m, &x)| *m += x);
                }
                let inv = T::one() / T::from_f64_lossy(v.rows() as f64);
                mean.iter_mut().for_each(|m| *m *= inv);
                mean
            })
            .collect())
    }
}
