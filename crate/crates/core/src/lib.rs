//! Parameter-efficient fine-tuning for Vision Transformers: a small autodiff
//! tensor library, a ViT, model surgery (block expansion, LoRA), K-NN
//! forgetting evaluation and a deterministic fine-tuning harness.

pub mod error;
pub mod harness;
pub mod io;
pub mod knn;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
