pub mod bundle;
pub mod config;
pub mod data;
pub mod distill;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod optim;
pub mod quantization;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod guide_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/quantization.md")]
pub mod guide_quantization {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/sparsity.md")]
pub mod guide_sparsity {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/distillation.md")]
pub mod guide_distillation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
pub mod guide_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/accounting.md")]
pub mod guide_accounting {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/formats.md")]
pub mod guide_formats {}
