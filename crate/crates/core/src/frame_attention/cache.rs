use thiserror::Error;

use crate::tensor::{Float, Tensor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("frame {frame} appended after frame {last}; frames must strictly increase")]
    OutOfOrder { frame: usize, last: usize },
    #[error("cache holds at most {capacity} frames")]
    Capacity { capacity: usize },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Geometry { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
}

/// Per-layer keys and values of clean frames, stored as `[rows × hidden]`
/// with heads as contiguous column slices.
#[derive(Clone, Debug)]
pub struct KVCache<T> {
    heads: usize,
    head_dim: usize,
    tokens_per_frame: usize,
    capacity: usize,
    frames: Vec<usize>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Float> KVCache<T> {
    pub fn new(layers: usize, heads: usize, head_dim: usize, tokens_per_frame: usize, capacity: usize) -> Self {
        Self { heads, head_dim, tokens_per_frame, capacity, frames: Vec::new(), keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers] }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Frame indices held, in append order.
    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn rows(&self) -> usize {
        self.frames.len() * self.tokens_per_frame
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Stores one frame's keys and values for every layer at once; each
    /// tensor is `[tokens_per_frame × hidden]`. Nothing is stored on error.
    pub fn append(&mut self, frame: usize, keys: &[Tensor<T>], values: &[Tensor<T>]) -> Result<(), CacheError> {
        if let Some(&last) = self.frames.last() {
            if frame <= last {
                return Err(CacheError::OutOfOrder { frame, last });
            }
        }
        if self.frames.len() >= self.capacity {
            return Err(CacheError::Capacity { capacity: self.capacity });
        }
        if keys.len() != self.layers() || values.len() != self.layers() {
            return Err(CacheError::Geometry { what: "layers", expected: vec![self.layers()], got: vec![keys.len(), values.len()] });
        }
        let want = [self.tokens_per_frame, self.hidden()];
        for t in keys.iter().chain(values) {
            if t.shape() != want {
                return Err(CacheError::Geometry { what: "frame keys/values", expected: want.to_vec(), got: t.shape().to_vec() });
            }
        }
        for (l, (k, v)) in keys.iter().zip(values).enumerate() {
            self.keys[l].extend_from_slice(k.data());
            self.values[l].extend_from_slice(v.data());
        }
        self.frames.push(frame);
        Ok(())
    }

    /// Raw `[rows × hidden]` keys of one layer.
    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    /// `(keys, values)` of a layer as tensors, or `None` while empty.
    pub fn layer_tensors(&self, layer: usize) -> Option<(Tensor<T>, Tensor<T>)> {
        if self.is_empty() {
            return None;
        }
        let shape = [self.rows(), self.hidden()];
        Some((Tensor::new(shape, self.keys[layer].clone()).expect("cache geometry"), Tensor::new(shape, self.values[layer].clone()).expect("cache geometry")))
    }

    /// Keys of one head, `[rows × head_dim]`.
    pub fn head_keys(&self, layer: usize, head: usize) -> Option<Tensor<T>> {
        if self.is_empty() {
            return None;
        }
        let (h, d) = (self.hidden(), self.head_dim);
        let data = self.keys[layer].chunks(h).flat_map(|r| r[head * d..(head + 1) * d].iter().copied()).collect();
        Some(Tensor::new([self.rows(), d], data).expect("cache geometry"))
    }

    /// Stored scalars: `2 · layers · heads · frames · P · d_h`.
    pub fn memory_floats(&self) -> usize {
        2 * self.layers() * self.rows() * self.hidden()
    }

    pub fn memory_bytes(&self) -> usize {
        self.memory_floats() * std::mem::size_of::<T>()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: f32, p: usize, h: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![p, h], |i| v + i as f32)
    }

    #[test]
    fn appends_in_order_and_counts_memory() {
        let (layers, heads, dh, p) = (3, 2, 4, 5);
        let mut c = KVCache::<f32>::new(layers, heads, dh, p, 8);
        for f in 0..4 {
            let ks: Vec<_> = (0..layers).map(|_| frame(f as f32, p, heads * dh)).collect();
            c.append(f, &ks, &ks).unwrap();
            assert_eq!(c.memory_floats(), 2 * layers * heads * (f + 1) * p * dh);
        }
        assert_eq!(c.frames(), &[0, 1, 2, 3]);
        assert_eq!(c.layer_tensors(1).unwrap().0.shape(), &[4 * p, heads * dh]);
        let hk = c.head_keys(0, 1).unwrap();
        assert_eq!(hk.shape(), &[4 * p, dh]);
        assert_eq!(hk.data()[0], 4.0);
    }

    #[test]
    fn rejects_out_of_order_capacity_and_shape() {
        let mut c = KVCache::<f32>::new(1, 1, 2, 1, 2);
        let t = [frame(0.0, 1, 2)];
        c.append(1, &t, &t).unwrap();
        assert_eq!(c.append(1, &t, &t), Err(CacheError::OutOfOrder { frame: 1, last: 1 }));
        assert_eq!(c.append(0, &t, &t), Err(CacheError::OutOfOrder { frame: 0, last: 1 }));
        assert!(matches!(c.append(2, &[frame(0.0, 2, 2)], &t), Err(CacheError::Geometry { .. })));
        c.append(3, &t, &t).unwrap();
        assert_eq!(c.append(4, &t, &t), Err(CacheError::Capacity { capacity: 2 }));
        assert_eq!(c.frames(), &[1, 3]);
        c.clear();
        assert!(c.is_empty() && c.memory_floats() == 0);
    }
}
