//! Information-preserving binary hashing.
//!
//! A student encoder consumes randomly masked token grids and is trained to
//! reproduce fixed teacher features, while a linear hash layer turns the
//! student features into binary codes. Four losses drive training:
//! feature reconstruction, KL distillation against the teacher's softened
//! classifier output, pairwise cosine preservation through a straight-through
//! sign, and quantization. Codes are searched by packed Hamming distance and
//! scored with MAP@k.
//!
//! Module map:
//!
//! - [`numkit`]: dense matrices, softmax/cosine kernels, the seeded generator
//! - [`dataio`]: `.iph` tensor files, dataset manifests, synthetic data
//! - [`teacher`]: fixed teacher features and cached soft labels
//! - [`student`]: random masking, the token encoder, reconstruction loss
//! - [`hashcore`]: hash projection, binarization and the hashing losses
//! - [`trainer`]: Adam, the training loop, model files, gradient checking
//! - [`retrieval`]: bit packing and exact Hamming top-k search
//! - [`evalkit`]: AP / MAP@k, precision-recall curves, report emission

#![allow(clippy::needless_range_loop)]

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod hashcore;
pub mod numkit;
pub mod retrieval;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
