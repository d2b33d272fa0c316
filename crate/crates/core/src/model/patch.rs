use super::ModelError;
use crate::tensor::{Float, Tensor};

/// Frame geometry `C×H×W` split into `patch×patch` tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn validate(&self) -> Result<(), ModelError> {
        let g = self;
        if g.channels == 0 || g.height == 0 || g.width == 0 || g.patch == 0 {
            return Err(ModelError::Config(format!("frame geometry must be positive: {g:?}")));
        }
        if !g.height.is_multiple_of(g.patch) || !g.width.is_multiple_of(g.patch) {
            return Err(ModelError::Config(format!("height {} and width {} must be divisible by patch {}", g.height, g.width, g.patch)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Pixel index of element `e` of token `tok`.
    fn pixel(&self, tok: usize, e: usize) -> usize {
        let p = self.patch;
        let (ty, tx) = (tok / (self.width / p), tok % (self.width / p));
        let (c, dy, dx) = (e / (p * p), (e / p) % p, e % p);
        (c * self.height + ty * p + dy) * self.width + tx * p + dx
    }
}

/// `C×H×W` frame (flat, row-major) → `[P, C·patch²]`. Tokens follow the
/// patch grid in row-major order; each token is channel, row, column major.
pub fn patchify<T: Float>(frame: &[T], g: &PatchGeometry) -> Result<Tensor<T>, ModelError> {
    if frame.len() != g.frame_len() {
        return Err(ModelError::Geometry { what: "frame length", expected: g.frame_len(), got: frame.len() });
    }
    let d = g.token_dim();
    let data = (0..g.tokens() * d).map(|i| frame[g.pixel(i / d, i % d)]).collect();
    Ok(Tensor::new([g.tokens(), d], data)?)
}

pub fn unpatchify<T: Float>(tokens: &Tensor<T>, g: &PatchGeometry) -> Result<Vec<T>, ModelError> {
    if tokens.shape() != [g.tokens(), g.token_dim()] {
        return Err(ModelError::Geometry { what: "token count", expected: g.tokens() * g.token_dim(), got: tokens.numel() });
    }
    let d = g.token_dim();
    let mut frame = vec![T::zero(); g.frame_len()];
    for (i, &x) in tokens.data().iter().enumerate() {
        frame[g.pixel(i / d, i % d)] = x;
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_patch_is_row_major() {
        let g = PatchGeometry { channels: 1, height: 4, width: 4, patch: 4 };
        let frame: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let t = patchify(&frame, &g).unwrap();
        assert_eq!(t.shape(), &[1, 16]);
        assert_eq!(t.data(), &frame[..]);
    }

    #[test]
    fn round_trip_is_exact() {
        let g = PatchGeometry { channels: 3, height: 8, width: 8, patch: 2 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let frame: Vec<f64> = (0..g.frame_len()).map(|_| rng.random()).collect();
        let t = patchify(&frame, &g).unwrap();
        assert_eq!(t.shape(), &[16, 12]);
        assert_eq!(unpatchify(&t, &g).unwrap(), frame);
    }

    #[test]
    fn token_count_and_errors() {
        let g = PatchGeometry { channels: 1, height: 16, width: 16, patch: 4 };
        assert_eq!(g.tokens(), 16);
        assert!(patchify(&[0.0f32; 3], &g).is_err());
        assert!(PatchGeometry { patch: 3, ..g }.validate().is_err());
    }

    #[test]
    fn second_token_starts_at_next_tile() {
        let g = PatchGeometry { channels: 1, height: 2, width: 4, patch: 2 };
        let frame: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let t = patchify(&frame, &g).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
    }
}
