use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AttentionError, FrameLayout, Segment, TokenKind};
use crate::tensor::Mask;

/// Frame-causal attention variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum MaskVariant {
    /// "OF": clean frames attend every earlier clean frame and themselves.
    #[serde(rename = "of")]
    Vanilla,
    /// "OF2": clean frames attend only their own tokens. Noisy queries still
    /// read every earlier clean frame.
    #[default]
    #[serde(rename = "of2")]
    Lightweight,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 2] = [MaskVariant::Vanilla, MaskVariant::Lightweight];
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "of",
            Self::Lightweight => "of2",
        })
    }
}

impl FromStr for MaskVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "of" | "vanilla" => Ok(Self::Vanilla),
            "of2" | "lightweight" => Ok(Self::Lightweight),
            other => Err(format!("unknown mask variant '{other}' (expected of or of2)")),
        }
    }
}

/// Admissibility rule for a query copy reading a key copy.
///
/// `drop_context` removes every noisy→clean edge (the unconditional branch).
/// A noisy frame never sees its own clean copy.
pub fn admits(variant: MaskVariant, query: Segment, key: Segment, drop_context: bool) -> bool {
    match (query.kind, key.kind) {
        (TokenKind::Noisy, TokenKind::Noisy) => key.frame == query.frame,
        (TokenKind::Noisy, TokenKind::Clean) => !drop_context && key.frame < query.frame,
        (TokenKind::Clean, TokenKind::Noisy) => false,
        (TokenKind::Clean, TokenKind::Clean) => match variant {
            MaskVariant::Vanilla => key.frame <= query.frame,
            MaskVariant::Lightweight => key.frame == query.frame,
        },
    }
}

/// Block-level query×key admissibility.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    variant: MaskVariant,
    tokens_per_frame: usize,
    queries: Vec<Segment>,
    keys: Vec<Segment>,
    admissible: Vec<bool>,
}

/// Self-attention mask over a whole layout.
pub fn build_mask(layout: &FrameLayout, variant: MaskVariant) -> AttentionMask {
    AttentionMask::for_layout(layout, variant, false)
}

impl AttentionMask {
    pub fn for_layout(layout: &FrameLayout, variant: MaskVariant, drop_context: bool) -> Self {
        let segs = layout.segments();
        Self::between(segs, segs, layout.tokens_per_frame(), variant, drop_context).expect("every layout copy admits itself")
    }

    /// Mask for a query subset reading a key sequence, e.g. one new frame
    /// against cached frames. Fails if some query block admits nothing.
    pub fn between(queries: &[Segment], keys: &[Segment], tokens_per_frame: usize, variant: MaskVariant, drop_context: bool) -> Result<Self, AttentionError> {
        if tokens_per_frame == 0 || queries.is_empty() || keys.is_empty() {
            return Err(AttentionError::EmptyLayout { frames: queries.len().min(keys.len()), tokens: tokens_per_frame });
        }
        let admissible: Vec<bool> = queries.iter().flat_map(|&q| keys.iter().map(move |&k| admits(variant, q, k, drop_context))).collect();
        let mask = Self { variant, tokens_per_frame, queries: queries.to_vec(), keys: keys.to_vec(), admissible };
        mask.check_rows()?;
        Ok(mask)
    }

    pub(crate) fn check_rows(&self) -> Result<(), AttentionError> {
        for (qb, q) in self.queries.iter().enumerate() {
            if !self.row(qb).iter().any(|&a| a) {
                return Err(AttentionError::EmptyRow { query: *q });
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> MaskVariant {
        self.variant
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn query_segments(&self) -> &[Segment] {
        &self.queries
    }

    pub fn key_segments(&self) -> &[Segment] {
        &self.keys
    }

    pub fn query_len(&self) -> usize {
        self.queries.len() * self.tokens_per_frame
    }

    pub fn key_len(&self) -> usize {
        self.keys.len() * self.tokens_per_frame
    }

    fn row(&self, qb: usize) -> &[bool] {
        let nk = self.keys.len();
        &self.admissible[qb * nk..(qb + 1) * nk]
    }

    pub fn block_admits(&self, query_block: usize, key_block: usize) -> bool {
        self.row(query_block)[key_block]
    }

    /// Token-level lookup.
    pub fn admits(&self, query_token: usize, key_token: usize) -> bool {
        let p = self.tokens_per_frame;
        self.block_admits(query_token / p, key_token / p)
    }

    /// Key block indices admitted by a query block, in key order.
    pub fn admissible_keys(&self, query_block: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(query_block).iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k)
    }

    /// Number of admissible (query block, key block) pairs.
    pub fn admissible_pairs(&self) -> usize {
        self.admissible.iter().filter(|&&a| a).count()
    }

    /// Overrides one block. Only meant for negative controls that need a
    /// deliberately malformed mask.
    pub fn set_block(&mut self, query_block: usize, key_block: usize, value: bool) {
        let nk = self.keys.len();
        self.admissible[query_block * nk + key_block] = value;
    }

    /// Token-level boolean matrix `[query_len, key_len]`.
    pub fn to_dense(&self) -> Mask {
        let (lq, lk) = (self.query_len(), self.key_len());
        let data = (0..lq).flat_map(|q| (0..lk).map(move |k| (q, k))).map(|(q, k)| self.admits(q, k)).collect();
        Mask::new([lq, lk], data).expect("mask extents are non-zero")
    }
}
