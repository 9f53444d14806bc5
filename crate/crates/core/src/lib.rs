//! Semi-supervised adversarial domain adaptation for semantic segmentation.
//!
//! The crate bundles everything needed to run the method end to end at desk
//! scale:
//!
//! * [`diffcore`]: a small reverse-mode autodiff engine (convolution, linear,
//!   leaky ReLU, channel softmax, bilinear upsampling and the loss kernels).
//! * [`datagen`]: a procedural two-domain segmentation benchmark and the
//!   labeled / unlabeled / validation split manager.
//! * [`models`]: the feature generator, classification head, global
//!   discriminator and the two semantic-level discriminators.
//! * [`losses`]: segmentation, global and semantic adversarial losses and
//!   class-average pooling.
//! * [`trainer`]: the alternating generator / discriminator optimization.
//! * [`metrics`]: confusion matrices and mean IoU.
//! * [`cli`]: the experiment runner behind the `semadapt` binary.

pub mod cli;
pub mod datagen;
pub mod diffcore;
mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
