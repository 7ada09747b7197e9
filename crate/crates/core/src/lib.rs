//! Adaptive multi-modal selection for sequence recognition.
//!
//! A lightweight policy network looks at cheap views of each modality and
//! decides, segment by segment, which modalities the expensive recognition
//! sub-networks should process. Decisions are sampled with the Gumbel-Max
//! trick and trained through a Gumbel-Softmax straight-through estimator,
//! jointly with the recognition network, under a loss that trades accuracy
//! against the fraction of segments processed.
//!
//! Everything runs on a small reverse-mode differentiation tape in [`diff`].
//!
//! ```
//! use amml_core::diff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = x.mul(x).unwrap().mean().unwrap();
//! g.backward(loss).unwrap();
//! let grad = x.grad().unwrap();
//! assert!((grad.data()[2] - 2.0).abs() < 1e-12);
//! ```

// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod gumbel;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod policy;
pub mod recognition;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/gumbel.md")]
    mod gumbel {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/recognition.md")]
    mod recognition {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
