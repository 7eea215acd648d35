//! Likelihood-free (ABC) inference with summary-statistic dimension reduction.
//!
//! The crate is organised around a [`table::ReferenceTable`] of simulated
//! (parameter, summary-statistic) pairs. A kernel-weighted rejection sampler
//! ([`sampler`]) turns a table plus an observation into a weighted posterior
//! sample, which can then be post-processed by regression adjustment
//! ([`regression`]), scored by subset-selection criteria ([`selection`]),
//! projected to derived statistics ([`projection`]) and benchmarked against
//! competing pipelines ([`evaluation`]).

pub mod error;
pub mod evaluation;
pub mod models;
pub mod projection;
pub mod regression;
pub mod sampler;
pub mod selection;
pub mod table;

pub use error::{AbcError, Result};
pub use table::{
    KernelSpec, Observation, ReferenceTable, StandardisationSpec, SubsetMask, WeightedSample,
};
