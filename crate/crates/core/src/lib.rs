//! One-shot object detection with a two-stream cross-attention transformer.

pub mod attention;
pub mod bench;
pub mod cat;
pub mod data;
pub mod detector;
pub mod encoding;
pub mod error;
pub mod numerics;
pub mod train;

pub use error::{CatError, Result};
