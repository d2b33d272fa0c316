use serde::Serialize;

use super::{AttentionMask, MaskVariant, TokenKind};

/// Admissible (query frame, key frame) block pairs of a training layout,
/// split by what attends to what.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FramePairCounts {
    pub clean_clean: u64,
    pub noisy_clean: u64,
    pub noisy_self: u64,
    pub total: u64,
}

impl FramePairCounts {
    /// Counts the blocks a mask actually admits.
    pub fn of_mask(mask: &AttentionMask) -> Self {
        let mut c = Self::default();
        for (qb, q) in mask.query_segments().iter().enumerate() {
            for kb in mask.admissible_keys(qb) {
                let k = mask.key_segments()[kb];
                match (q.kind, k.kind) {
                    (TokenKind::Clean, TokenKind::Clean) => c.clean_clean += 1,
                    (TokenKind::Noisy, TokenKind::Clean) => c.noisy_clean += 1,
                    (TokenKind::Noisy, TokenKind::Noisy) => c.noisy_self += 1,
                    (TokenKind::Clean, TokenKind::Noisy) => {}
                }
                c.total += 1;
            }
        }
        c
    }

    /// Fraction of `other`'s total.
    pub fn ratio_to(&self, other: &Self) -> f64 {
        self.total as f64 / other.total as f64
    }
}

/// Closed-form pair counts for `frames` frames of a training layout.
///
/// Vanilla: `F(F+1)/2 + F(F-1)/2 + F = F² + F`.
/// Lightweight: `F + F(F-1)/2 + F = F(F+3)/2`.
pub fn frame_pair_count(variant: MaskVariant, frames: u64) -> FramePairCounts {
    let f = frames;
    let noisy_clean = f * f.saturating_sub(1) / 2;
    let clean_clean = match variant {
        MaskVariant::Vanilla => f * (f + 1) / 2,
        MaskVariant::Lightweight => f,
    };
    FramePairCounts { clean_clean, noisy_clean, noisy_self: f, total: clean_clean + noisy_clean + f }
}
