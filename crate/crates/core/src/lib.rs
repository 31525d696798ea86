//! Numerical core of the Falcon-X multivariate time-series forecaster.
//!
//! Everything in this crate is pure computation over owned buffers and builds
//! without the standard library (an allocator is required). File formats,
//! configuration parsing, logging and the command line live in the `falconx`
//! crate.
//!
//! Pipeline, in forward order:
//!
//! 1. [`preprocess`]: instance normalization over observed values, relative
//!    timestamps, observation masks and residual patch embedding.
//! 2. [`attention`]: per-variate time attention encoder.
//! 3. [`variate`]: prototype differential cross-attention, latent entity
//!    attention over the prototype space, routing back to variates and the
//!    gated residual fusion.
//! 4. [`head`]: quantile projection over the future patches and the losses.
//!
//! Gradients come from the reverse-mode tape in [`autodiff`] and are verified
//! against central differences with [`autodiff::grad_check`].
#![no_std]
#![cfg_attr(docsrs, feature(doc_cfg))]

extern crate alloc;

#[cfg(any(feature = "std", test))]
extern crate std;

pub mod attention;
pub mod autodiff;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod sampling;
pub mod series;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod variate;

pub use error::{Error, Result};
pub use model::{FalconX, ModelConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use series::EntitySeries;
pub use tensor::Tensor;
