//! Hierarchical text-to-video token generation at desk scale.
//!
//! The crate builds a small autoregressive transformer whose layers mix a
//! frozen spatial attention channel with a trainable spatio-temporal channel,
//! trains it on synthetic moving-pattern clips, and generates video token
//! grids in two stages: key frames at a low frame rate, then recursive
//! interpolation. Shifted-window attention masks admit a wavefront decoding
//! schedule that is checked against a brute-force dependency oracle.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod generate;
pub mod kv;
pub mod masks;
pub mod model;
pub mod numkernel;
pub mod scheduler;
pub mod sequence;
pub mod synthvid;
pub mod trainer;

pub use error::{Error, Result};
