//! Frame-autoregressive diffusion transformer.

pub mod bench;
pub mod config;
pub mod data;
pub mod frame_attention;
pub mod model;
pub mod probe;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod verify;
