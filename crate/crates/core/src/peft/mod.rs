//! Model surgery for parameter-efficient fine-tuning: block expansion, LoRA
//! adapters, freeze masks, and an identity verifier.

mod expansion;
mod identity;
mod lora;
mod mask;
mod strategy;

pub use expansion::{expand_blocks, ExpansionSpec};
pub use identity::verify_identity;
pub use lora::{attach_lora, merge_lora, AdapterSpec, LoraTarget};
pub use mask::{build_freeze_mask, FreezeMask, MaskStrategy};
pub use strategy::Strategy;
