//! MixFaceNet face-embedding networks on a small deterministic CPU engine.

pub mod arcface;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod manifest;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
