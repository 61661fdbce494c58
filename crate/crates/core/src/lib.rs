//! Synthetic multi-contrast MRI generation for joint super-resolution and
//! contrast synthesis, with a small 3D U-net trained on the generated stream.

pub mod acquire;
pub mod bench;
pub mod deform;
pub mod error;
pub mod eval;
pub mod export;
pub mod filter;
pub mod generator;
pub mod geometry;
pub mod hyper;
pub mod intensity;
pub mod net;
pub mod nifti;
pub mod phantom;
pub mod rng;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
