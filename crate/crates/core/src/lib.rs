//! A compact vision transformer for fine-grained classification, extended
//! with attention-guided structure learning over patch graphs and
//! multi-level contrastive feature boosting.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod mfb;
pub mod model;
pub mod params;
pub mod pgm;
pub mod sil;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
