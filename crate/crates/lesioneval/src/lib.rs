//! Small-lesion segmentation toolkit: inverse-volume-weighted cross-entropy,
//! lesion-wise precision-recall evaluation, tumor-centered patch sampling,
//! and a multi-rater comparison protocol, exercised end-to-end on synthetic
//! volumetric phantoms with a minimal trainable per-voxel classifier.
//!
//! Modules, roughly bottom-up:
//!
//! * [`volgrid`] — volumetric containers, dataset manifests, RVOL file I/O.
//! * [`labeling`] — 3D connected components and probability binarization.
//! * [`imbalance`] — lesion weight grids and the three losses with gradients.
//! * [`sampler`] — uniform and tumor-centered patch sampling.
//! * [`lesion_metrics`] — lesion-wise precision-recall, Dice, bootstrap bands.
//! * [`rater_protocol`] — consensus contours, sign test, timing summaries.
//! * [`phantom`] — synthetic ground truths, simulated raters and predictors.
//! * [`trainer`] — per-voxel logistic classifier and the SGD loop.
//! * [`cli`] — the `lesioneval` command-line tool and the two reproducible
//!   benchmark experiments.

// Indexed loops here usually walk several parallel arrays at once, and
// `!(x > 0.0)` is the deliberate NaN-rejecting form of a positivity check.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod imbalance;
pub mod labeling;
pub mod lesion_metrics;
pub mod phantom;
pub mod rater_protocol;
pub mod sampler;
pub mod trainer;
pub mod volgrid;

pub use error::{Error, Result};

// Every code snippet in the guide compiles and runs as a doctest, keeping
// the book in sync with the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }
    chapter!(Volumes, "../../../book/src/volumes.md");
    chapter!(Labeling, "../../../book/src/labeling.md");
    chapter!(Losses, "../../../book/src/losses.md");
    chapter!(Sampling, "../../../book/src/sampling.md");
    chapter!(Metrics, "../../../book/src/metrics.md");
    chapter!(Raters, "../../../book/src/raters.md");
    chapter!(Phantoms, "../../../book/src/phantoms.md");
    chapter!(Training, "../../../book/src/training.md");
}
