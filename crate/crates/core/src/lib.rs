//! Langevin sampling for low-rank matrix recovery posteriors whose optima
//! form orthogonal orbits, with geometry tools and diagnostics.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod operators;
pub mod processes;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod torus;

pub use config::{Dims, RunConfig, SpectrumSpec};
pub use error::{Error, Result};
pub use rng::{gaussian_matrix, RngStream};

// The guide under book/ is compiled and run as doctests so its snippets
// stay in sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/orbits.md")]
    mod orbits {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/comparison.md")]
    mod comparison {}
    #[doc = include_str!("../../../book/src/torus.md")]
    mod torus {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
