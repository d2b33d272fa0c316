//! Frame-structured token layouts, frame-causal masks, masked multi-head
//! attention, the key/value cache and attention cost accounting.
//!
//! Every token belongs to a frame and is either a clean copy `c_i` (context)
//! or a noisy copy `n_i` (diffusion target). Admissibility depends only on
//! the (frame, kind) of query and key, so masks are stored per block of
//! `tokens_per_frame` tokens.

mod cache;
mod complexity;
mod kernel;
mod mask;

pub use cache::{CacheError, KVCache};
pub use complexity::{frame_pair_count, FramePairCounts};
pub use kernel::{attend, attention, AttentionStats, SeqAttention};
pub use mask::{admits, build_mask, AttentionMask, MaskVariant};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("layout needs at least one frame and one token per frame (got frames={frames}, tokens_per_frame={tokens})")]
    EmptyLayout { frames: usize, tokens: usize },
    #[error("query block {query:?} admits no key")]
    EmptyRow { query: Segment },
    #[error("{what}: expected {expected}, got {got}")]
    Geometry { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKind {
    Clean,
    Noisy,
}

/// One frame copy: a contiguous block of `tokens_per_frame` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub frame: usize,
    pub kind: TokenKind,
}

impl Segment {
    pub fn clean(frame: usize) -> Self {
        Self { frame, kind: TokenKind::Clean }
    }

    pub fn noisy(frame: usize) -> Self {
        Self { frame, kind: TokenKind::Noisy }
    }
}

/// Position of a single token in a layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenInfo {
    pub frame: usize,
    pub kind: TokenKind,
    pub offset: usize,
}

/// Ordered sequence of frame copies. Frames are numbered from 0.
///
/// * training: `[c0, n0, c1, n1, …, c_{F-1}, n_{F-1}]`
/// * inference for frame `i`: `[c0, …, c_{i-1}, n_i]`
/// * context: `[c0, …, c_{F-1}]` (clean frames only)
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    tokens_per_frame: usize,
    segments: Vec<Segment>,
}

impl FrameLayout {
    pub fn training(frames: usize, tokens_per_frame: usize) -> Result<Self, AttentionError> {
        Self::check(frames, tokens_per_frame)?;
        let segments = (0..frames).flat_map(|f| [Segment::clean(f), Segment::noisy(f)]).collect();
        Ok(Self { tokens_per_frame, segments })
    }

    pub fn inference(target: usize, tokens_per_frame: usize) -> Result<Self, AttentionError> {
        Self::check(target + 1, tokens_per_frame)?;
        let segments = (0..target).map(Segment::clean).chain([Segment::noisy(target)]).collect();
        Ok(Self { tokens_per_frame, segments })
    }

    pub fn context(frames: usize, tokens_per_frame: usize) -> Result<Self, AttentionError> {
        Self::check(frames, tokens_per_frame)?;
        Ok(Self { tokens_per_frame, segments: (0..frames).map(Segment::clean).collect() })
    }

    fn check(frames: usize, tokens: usize) -> Result<(), AttentionError> {
        if frames == 0 || tokens == 0 {
            return Err(AttentionError::EmptyLayout { frames, tokens });
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Number of distinct frames referenced.
    pub fn frames(&self) -> usize {
        self.segments.iter().map(|s| s.frame + 1).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.segments.len() * self.tokens_per_frame
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<TokenInfo> {
        let seg = self.segments.get(index / self.tokens_per_frame)?;
        Some(TokenInfo { frame: seg.frame, kind: seg.kind, offset: index % self.tokens_per_frame })
    }

    pub fn index_of(&self, frame: usize, kind: TokenKind, offset: usize) -> Option<usize> {
        if offset >= self.tokens_per_frame {
            return None;
        }
        let block = self.segments.iter().position(|s| s.frame == frame && s.kind == kind)?;
        Some(block * self.tokens_per_frame + offset)
    }

    /// Token indices of every noisy copy, in layout order.
    pub fn noisy_tokens(&self) -> Vec<usize> {
        self.kind_tokens(TokenKind::Noisy)
    }

    pub fn clean_tokens(&self) -> Vec<usize> {
        self.kind_tokens(TokenKind::Clean)
    }

    fn kind_tokens(&self, kind: TokenKind) -> Vec<usize> {
        let p = self.tokens_per_frame;
        self.segments.iter().enumerate().filter(|(_, s)| s.kind == kind).flat_map(|(b, _)| b * p..(b + 1) * p).collect()
    }
}
