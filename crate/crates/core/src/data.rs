//! Procedural bouncing-ball videos and the `GPDV` dataset file.
//!
//! File layout, little-endian:
//!
//! ```text
//! "GPDV" | version u16 | frames u32 | channels u32 | height u32 | width u32 | count u32
//! count × { label u16 | frames·channels·height·width × f32 }
//! ```

use std::f64::consts::{FRAC_PI_4, TAU};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"GPDV";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 5 * 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid bounce parameters: {0}")]
    Params(String),
    #[error("dataset format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("video {index} has geometry {got:?}, dataset expects {expected:?}")]
    Geometry { index: usize, expected: VideoGeometry, got: VideoGeometry },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoGeometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoGeometry {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `F×C×H×W` samples in `[-1, 1]` with a video-level label. `seed` is the
/// generator seed when known; it is not part of the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub geometry: VideoGeometry,
    pub data: Vec<f32>,
    pub label: u16,
    pub seed: Option<u64>,
}

impl LatentVideo {
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.geometry.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frames(&self) -> Vec<&[f32]> {
        (0..self.geometry.frames).map(|i| self.frame(i)).collect()
    }

    /// Same video with only the first `n` frames.
    pub fn truncated(&self, n: usize) -> LatentVideo {
        let n = n.min(self.geometry.frames);
        LatentVideo {
            geometry: VideoGeometry { frames: n, ..self.geometry },
            data: self.data[..n * self.geometry.frame_len()].to_vec(),
            label: self.label,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelRule {
    /// Sign pattern of the velocity, ordered `++, +−, −+, −−` (x then y).
    #[default]
    Quadrant,
    /// Velocity direction in eight 45° sectors counter-clockwise from +x.
    Octant,
}

impl LabelRule {
    pub fn classes(&self) -> usize {
        match self {
            Self::Quadrant => 4,
            Self::Octant => 8,
        }
    }

    pub fn label(&self, vx: f64, vy: f64) -> u16 {
        match self {
            Self::Quadrant => match (vx >= 0.0, vy >= 0.0) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            },
            Self::Octant => ((vy.atan2(vx).rem_euclid(TAU) / FRAC_PI_4) as u16).min(7),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BounceParams {
    pub radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub rule: LabelRule,
}

impl Default for BounceParams {
    fn default() -> Self {
        Self { radius: 2.5, speed_min: 0.75, speed_max: 1.5, frames: 8, channels: 1, height: 16, width: 16, rule: LabelRule::Quadrant }
    }
}

impl BounceParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Params(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("frame extents must be positive".into());
        }
        let side = self.height.min(self.width) as f64;
        if !(self.radius > 0.0 && self.radius < side / 2.0) {
            return bad(format!("radius {} must lie in (0, {})", self.radius, side / 2.0));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return bad(format!("speed range [{}, {}] must be positive and ordered", self.speed_min, self.speed_max));
        }
        if self.speed_max >= side - 2.0 * self.radius {
            return bad(format!("speed {} would cross the free span in one frame", self.speed_max));
        }
        Ok(())
    }

    pub fn geometry(&self) -> VideoGeometry {
        VideoGeometry { frames: self.frames, channels: self.channels, height: self.height, width: self.width }
    }
}

/// Ball centre per frame plus the initial velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub centers: Vec<(f64, f64)>,
    pub velocity: (f64, f64),
}

/// Start uniform in the free box, direction uniform on the circle, speed
/// uniform in range; reflections are elastic.
pub fn trajectory(params: &BounceParams, seed: u64) -> Result<Trajectory, DataError> {
    params.validate()?;
    let mut rng = rng::stream(seed, "bounce", 0);
    let r = params.radius;
    let (w, h) = (params.width as f64, params.height as f64);
    let (mut x, mut y) = (rng.random_range(r..=w - r), rng.random_range(r..=h - r));
    let phi = rng.random_range(0.0..TAU);
    let speed = rng.random_range(params.speed_min..=params.speed_max);
    let velocity = (speed * phi.cos(), speed * phi.sin());
    let (mut vx, mut vy) = velocity;
    let mut centers = vec![(x, y)];
    let reflect = |p: &mut f64, v: &mut f64, hi: f64| {
        *p += *v;
        if *p < r {
            *p = 2.0 * r - *p;
            *v = -*v;
        } else if *p > hi - r {
            *p = 2.0 * (hi - r) - *p;
            *v = -*v;
        }
    };
    for _ in 1..params.frames {
        reflect(&mut x, &mut vx, w);
        reflect(&mut y, &mut vy, h);
        centers.push((x, y));
    }
    Ok(Trajectory { centers, velocity })
}

/// Renders one video. Background −1, disc +1, linear edge one pixel wide.
pub fn gen_bounce(params: &BounceParams, seed: u64) -> Result<LatentVideo, DataError> {
    let traj = trajectory(params, seed)?;
    let g = params.geometry();
    let mut data = Vec::with_capacity(g.len());
    for &(cx, cy) in &traj.centers {
        let mut plane = Vec::with_capacity(g.height * g.width);
        for py in 0..g.height {
            for px in 0..g.width {
                let d = ((px as f64 + 0.5 - cx).powi(2) + (py as f64 + 0.5 - cy).powi(2)).sqrt();
                let cover = (params.radius + 0.5 - d).clamp(0.0, 1.0);
                plane.push((2.0 * cover - 1.0) as f32);
            }
        }
        for _ in 0..g.channels {
            data.extend_from_slice(&plane);
        }
    }
    Ok(LatentVideo { geometry: g, data, label: params.rule.label(traj.velocity.0, traj.velocity.1), seed: Some(seed) })
}

/// Seed of video `index` in a dataset generated from `seed`.
pub fn video_seed(seed: u64, index: u64) -> u64 {
    rng::stream(seed, "data", index).random()
}

pub fn gen_dataset(params: &BounceParams, seed: u64, count: usize) -> Result<Vec<LatentVideo>, DataError> {
    (0..count as u64).map(|i| gen_bounce(params, video_seed(seed, i))).collect()
}

pub fn encode_dataset(geometry: VideoGeometry, videos: &[LatentVideo]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(HEADER_LEN + videos.len() * (2 + 4 * geometry.len()));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for d in [geometry.frames, geometry.channels, geometry.height, geometry.width, videos.len()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (index, v) in videos.iter().enumerate() {
        if v.geometry != geometry || v.data.len() != geometry.len() {
            return Err(DataError::Geometry { index, expected: geometry, got: v.geometry });
        }
        out.extend_from_slice(&v.label.to_le_bytes());
        for &x in &v.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(VideoGeometry, Vec<LatentVideo>), DataError> {
    let err = |offset: usize, msg: &str| DataError::Format { offset, msg: msg.to_string() };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(err(0, "bad magic string"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(err(4, &format!("unsupported version {version}")));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let geometry = VideoGeometry { frames: field(0), channels: field(1), height: field(2), width: field(3) };
    let count = field(4);
    // Zero frames is allowed (an empty rollout); the frame extents are not.
    if geometry.channels == 0 || geometry.height == 0 || geometry.width == 0 {
        return Err(err(10, "frame extents must be positive"));
    }
    let video_len = geometry
        .frames
        .checked_mul(geometry.channels)
        .and_then(|x| x.checked_mul(geometry.height))
        .and_then(|x| x.checked_mul(geometry.width))
        .filter(|&n| n <= u32::MAX as usize)
        .ok_or_else(|| err(6, "geometry too large"))?;
    let record = video_len.checked_mul(4).and_then(|x| x.checked_add(2)).ok_or_else(|| err(6, "geometry too large"))?;
    let body = bytes.len() - HEADER_LEN;
    if count.checked_mul(record).is_none_or(|need| need > body) {
        return Err(err(bytes.len(), &format!("truncated: {count} videos need more than {body} bytes")));
    }
    if count * record != body {
        return Err(err(HEADER_LEN + count * record, "trailing bytes after last video"));
    }
    let videos = bytes[HEADER_LEN..]
        .chunks_exact(record)
        .map(|rec| LatentVideo {
            geometry,
            label: u16::from_le_bytes([rec[0], rec[1]]),
            data: rec[2..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            seed: None,
        })
        .collect();
    Ok((geometry, videos))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn write_dataset(path: &Path, geometry: VideoGeometry, videos: &[LatentVideo]) -> Result<(), DataError> {
    let bytes = encode_dataset(geometry, videos)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<(VideoGeometry, Vec<LatentVideo>), DataError> {
    decode_dataset(&std::fs::read(path).map_err(io_err(path))?)
}

/// Binary portable graymap of one channel, `[-1, 1]` mapped to `0..=255`.
pub fn write_pgm(path: &Path, plane: &[f32], height: usize, width: usize) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    let pixels: Vec<u8> = plane[..height * width].iter().map(|&x| ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
    write!(f, "P5\n{width} {height}\n255\n").and_then(|_| f.write_all(&pixels)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Position of a point moving at constant speed inside `[lo, hi]` with
    /// mirror walls, written as a triangle wave.
    fn folded(start: f64, v: f64, steps: usize, lo: f64, hi: f64) -> f64 {
        let span = hi - lo;
        let u = (start - lo + v * steps as f64).rem_euclid(2.0 * span);
        lo + if u <= span { u } else { 2.0 * span - u }
    }

    #[test]
    fn trajectories_match_closed_form_reflection() {
        let p = BounceParams::default();
        for seed in 0..100 {
            let tr = trajectory(&p, seed).unwrap();
            let (x0, y0) = tr.centers[0];
            for (f, &(x, y)) in tr.centers.iter().enumerate() {
                let ex = folded(x0, tr.velocity.0, f, p.radius, p.width as f64 - p.radius);
                let ey = folded(y0, tr.velocity.1, f, p.radius, p.height as f64 - p.radius);
                assert!((x - ex).abs() < 1e-9 && (y - ey).abs() < 1e-9, "seed {seed} frame {f}");
            }
        }
    }

    #[test]
    fn speed_is_constant_between_reflections() {
        let p = BounceParams { frames: 40, ..Default::default() };
        let (lo, hi) = (p.radius, 16.0 - p.radius);
        for seed in 0..20 {
            let tr = trajectory(&p, seed).unwrap();
            let speed = tr.velocity.0.hypot(tr.velocity.1);
            let near_wall = |(x, y): (f64, f64)| [x - lo, hi - x, y - lo, hi - y].iter().any(|&d| d < speed);
            for w in tr.centers.windows(2) {
                let step = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
                assert!((step - speed).abs() < 1e-9 || near_wall(w[0]), "seed {seed}: {step} vs {speed}");
            }
        }
    }

    #[test]
    fn quadrant_labels_follow_the_fixed_order() {
        let q = LabelRule::Quadrant;
        assert_eq!([q.label(1.0, 1.0), q.label(1.0, -1.0), q.label(-1.0, 1.0), q.label(-1.0, -1.0)], [0, 1, 2, 3]);
        let o = LabelRule::Octant;
        assert_eq!(o.label(1.0, 0.1), 0);
        assert_eq!(o.label(0.1, 1.0), 1);
        assert_eq!(o.label(1.0, -0.1), 7);
    }

    #[test]
    fn labels_are_balanced() {
        for rule in [LabelRule::Quadrant, LabelRule::Octant] {
            let p = BounceParams { rule, ..Default::default() };
            let mut counts = vec![0usize; rule.classes()];
            for s in 0..2000 {
                let tr = trajectory(&p, video_seed(9, s)).unwrap();
                counts[rule.label(tr.velocity.0, tr.velocity.1) as usize] += 1;
            }
            let uniform = 2000.0 / rule.classes() as f64;
            assert!(counts.iter().all(|&c| (c as f64 / uniform - 1.0).abs() <= 0.2), "{counts:?}");
        }
    }

    #[test]
    fn videos_are_bounded_and_reproducible() {
        let p = BounceParams { channels: 2, ..Default::default() };
        let v = gen_bounce(&p, 42).unwrap();
        assert_eq!(v.data.len(), p.geometry().len());
        assert!(v.data.iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)));
        assert!(v.data.contains(&1.0) && v.data.contains(&-1.0));
        assert_eq!(v, gen_bounce(&p, 42).unwrap());
        assert_eq!(gen_dataset(&p, 5, 3).unwrap(), gen_dataset(&p, 5, 3).unwrap());
    }

    #[test]
    fn bad_params_are_rejected() {
        let d = BounceParams::default();
        assert!(BounceParams { frames: 0, ..d.clone() }.validate().is_err());
        assert!(BounceParams { frames: 1, ..d.clone() }.validate().is_err());
        assert!(BounceParams { radius: 8.0, ..d.clone() }.validate().is_err());
        assert!(BounceParams { speed_min: 0.0, ..d.clone() }.validate().is_err());
    }

    #[test]
    fn dataset_round_trips() {
        let p = BounceParams::default();
        let g = p.geometry();
        let empty = encode_dataset(g, &[]).unwrap();
        assert_eq!(empty.len(), HEADER_LEN);
        assert_eq!(decode_dataset(&empty).unwrap(), (g, vec![]));
        let vids = gen_dataset(&p, 1, 3).unwrap();
        let (g2, back) = decode_dataset(&encode_dataset(g, &vids).unwrap()).unwrap();
        assert_eq!(g2, g);
        for (a, b) in vids.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let p = BounceParams::default();
        let mut bytes = encode_dataset(p.geometry(), &gen_dataset(&p, 1, 2).unwrap()).unwrap();
        let n = bytes.len();
        assert!(matches!(decode_dataset(&bytes[..n - 3]), Err(DataError::Format { .. })));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(DataError::Format { offset: 10, .. })));
        bytes[1] = b'X';
        let e = decode_dataset(&bytes).unwrap_err();
        assert!(matches!(e, DataError::Format { offset: 0, .. }));
        assert!(e.to_string().contains("byte 0"));
    }

    #[test]
    fn zero_frame_videos_round_trip() {
        let g = VideoGeometry { frames: 0, channels: 1, height: 4, width: 4 };
        let v = LatentVideo { geometry: g, data: vec![], label: 3, seed: None };
        let bytes = encode_dataset(g, &[v.clone(), v.clone()]).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), (g, vec![v.clone(), v]));
        let mut bad = encode_dataset(g, &[]).unwrap();
        bad[14] = 0;
        assert!(matches!(decode_dataset(&bad), Err(DataError::Format { .. })));
    }

    #[test]
    fn mixed_geometry_is_rejected() {
        let p = BounceParams::default();
        let a = gen_bounce(&p, 1).unwrap();
        let b = gen_bounce(&BounceParams { frames: 4, ..p.clone() }, 1).unwrap();
        assert!(matches!(encode_dataset(p.geometry(), &[a, b]), Err(DataError::Geometry { index: 1, .. })));
    }

    #[test]
    fn graymap_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        write_pgm(&path, &[-1.0, 0.0, 1.0, 1.0], 2, 2).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert!(b.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&b[b.len() - 4..], &[0, 128, 255, 255]);
    }

    proptest::proptest! {
        #[test]
        fn decoder_round_trips_or_rejects(
            flips in proptest::collection::vec((0usize..2048, proptest::prelude::any::<u8>()), 0..6),
            cut in 0usize..64,
        ) {
            let p = BounceParams { frames: 2, height: 8, width: 8, radius: 1.5, speed_max: 1.0, ..Default::default() };
            let mut bytes = encode_dataset(p.geometry(), &gen_dataset(&p, 3, 2).unwrap()).unwrap();
            for (i, b) in flips {
                let n = bytes.len();
                bytes[i % n] = b;
            }
            bytes.truncate(bytes.len().saturating_sub(cut));
            if let Ok((g, v)) = decode_dataset(&bytes) {
                proptest::prop_assert_eq!(encode_dataset(g, &v).unwrap(), bytes);
            }
        }
    }
}
