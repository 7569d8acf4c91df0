//! Multiscale stress surrogate toolkit.
//!
//! Generates finite-element training data for porous 2D structures, trains a
//! Bayesian encoder-decoder convolutional network that maps macroscale stress
//! images plus a microstructure indicator to microscale Tresca stress
//! corrections, and runs uncertainty-driven selective learning on top of it.
//!
//! The crate is organised around the data flow:
//!
//! * [`geometry`] — random porous structures and boundary-condition sampling
//! * [`fem`] — P1 triangle meshing and linear / finite-strain elasticity solves
//! * [`fields`] — stress algebra (principal, Tresca, rotation) and mesh-to-grid
//!   rasterisation
//! * [`patchset`] — patch extraction, scaling, rotation augmentation, dataset
//!   persistence and full-field reconstruction
//! * [`tensor`] — minimal reverse-mode autodiff with exactly the layer ops the
//!   network needs, plus Adam and a gradient-check harness
//! * [`net`] — the encoder-decoder CNN with SE residual blocks
//! * [`bayes`] — Bayes-by-Backprop variational layers and predictive sampling
//! * [`trainer`] — training loops, the max-in-ROI accuracy metric, selective
//!   learning
//! * [`pipeline`] — batch commands (`gen`, `train`, `eval`, `predict`, `al`)
//!   behind the CLI, with CSV/SVG artifact emission


pub mod bayes;
pub mod fem;
pub mod fields;
pub mod geometry;
pub mod io;
pub mod net;
pub mod patchset;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;


/// Caps the rayon worker count from the `MICROSTRESS_THREADS` env var.
///
/// Safe to call more than once; only the first call can take effect.
pub fn init_threads() {
    if let Ok(v) = std::env::var("MICROSTRESS_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
