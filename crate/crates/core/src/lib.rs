//! Decomposed cross-modal distillation for RGB temporal action detection.
//!
//! A motion model (trained on temporal gradients or optical flow) teaches an
//! RGB-only detector. The student splits its backbone features into an
//! appearance branch and a motion branch; only the motion branch is
//! distilled, both branches share one detection head, and a local attentive
//! fusion combines them for a joint head that is the only head used at
//! inference.
//!
//! Module map:
//!
//! - [`synth`]: controllable synthetic videos, temporal gradients, flow.
//! - [`backbone`]: frames or motion maps to a `T' x C` feature sequence.
//! - [`head`]: anchor-free head, decoding, assignment, losses, NMS.
//! - [`distill`]: frozen teacher, response and feature distillation.
//! - [`fusion`]: branch projections, attentive fusion, training objective.
//! - [`eval`]: tIoU, AP, mAP.
//! - [`train`]: experiment configs, training loops, reports.

// Index loops mirror the tensor maths; `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod params;
pub mod plot;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{ActionInstance, AnnotationSet, LossWeights, Prediction, PredictionSet};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
}
