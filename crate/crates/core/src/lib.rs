//! Vision-language pipeline for 3D medical volumes, desk scale.
//!
//! A volume is read as its z-axis slice sequence: a 2D ViT (DINO-pretrained)
//! encodes each slice to a [CLS] embedding, a sparse-attention encoder over
//! the slice axis ("Z-former") turns the embedding sequence into
//! sub-volumetric features via masked embedding modeling, a perceiver-style
//! bridger resamples those features into a fixed-size visual prompt, and a
//! toy autoregressive decoder generates reports or VQA answers from the
//! prompt under instruction fine-tuning with LoRA. Training runs in four
//! stages with per-stage freezing; everything is seeded and reproducible.

pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
