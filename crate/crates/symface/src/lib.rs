//! Facial-symmetry training signal for face recognition models.
//!
//! The pipeline scores each face image for frontness from three landmarks,
//! vertically splits a sampled fraction of the near-frontal images into
//! zero-padded hemi-face canvases, and trains an embedding network with a
//! margin-softmax classification loss plus a symmetry loss that pulls the
//! two hemi-face embeddings of each split sample together.
//!
//! The crate is self-contained at desk scale: a procedural corpus
//! generator stands in for photographic datasets, a small reverse-mode
//! autodiff engine powers the losses, and the evaluation module measures
//! verification accuracy, inter-class variance, and hemi-pair distances.
//!
//! See the `book/` directory for a guided tour; its code snippets run as
//! doc-tests.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod raster;
pub mod seeds;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests so the book cannot drift from
// the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frontness.md")]
    mod frontness {}
    #[doc = include_str!("../../../book/src/splitting.md")]
    mod splitting {}
    #[doc = include_str!("../../../book/src/data-pipeline.md")]
    mod data_pipeline {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/symmetry-loss.md")]
    mod symmetry_loss {}
    #[doc = include_str!("../../../book/src/synthetic-faces.md")]
    mod synthetic_faces {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
