//! Tensor files, dataset manifests and the synthetic dataset generator.

mod manifest;
mod synth;
mod tensor;

pub use manifest::{Dataset, DatasetManifest, Split, TokenBank, TokenSample};
pub use synth::{generate_synthetic, synthesize, SynthData, SynthSpec};
pub use tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor, DType, Tensor};
