//! Concept-level comparison of real and generated image distributions
//! through a sparse autoencoder over vision-model features.

pub mod concepts;
pub mod cooccur;
pub mod datapoint;
pub mod error;
pub mod explorer;
pub mod interp;
pub mod pipeline;
pub mod rasae;
pub mod rng;
pub mod stats;
pub mod synthdgp;
pub mod tensorio;
pub mod theory;

pub use error::{Error, Result};

/// Sizes the global worker pool; `0` keeps the default of one thread per
/// available core. Only the first call has an effect.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Argument(format!("cannot size thread pool: {e}")))
}
