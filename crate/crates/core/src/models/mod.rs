//! The neural-process variants.
//!
//! Every variant shares one decoder that maps a per-query conditioning vector to a
//! Gaussian mean and standard deviation. The vector concatenates an embedding of the
//! query location with whichever of these the variant has:
//!
//! * a deterministic readout of the context, mean-pooled (cnp, bnp) or cross-attended
//!   from the query location (anp, canp, banp);
//! * a latent sample `z` from a mean-pooled set encoder (np, anp);
//! * a pooled readout of a with-replacement resample of the context (bnp, banp).
//!
//! Empty contexts fall back to learned null vectors and a learned prior.

mod bootstrap;
mod network;
mod variant;


pub use bootstrap::bootstrap_contexts;
pub use network::{
    ForwardOptions, LatentDistribution, LatentSource, Model, ModelConfig, ModelInput, ModelOutput,
    Queries, TargetValues,
};
pub use variant::{ModelId, ModelVariant};
