//! Multidimensional index of child growth.
//!
//! * [`hierarchy`]: indicator → construct → broad → overarching aggregation.
//! * [`inference`]: Likert-elicited Gaussian priors and the Bernoulli posterior update.
//! * [`phenotyping`]: response-time certainty and certainty-adjusted responses.
//! * [`fitness`]: surrogate network, log TrueFitness target and MSE loss.
//! * [`evo`]: genetic algorithm over flattened network parameters.
//! * [`sim`]: seeded synthetic cohorts.
//! * [`service`]: HTTP API over an append-only event log.
//! * [`cli`]: the `micg` command-line front end.

pub mod cli;
pub mod config;
pub mod evo;
pub mod fitness;
pub mod hierarchy;
pub mod inference;
pub mod phenotyping;
pub mod pipeline;
pub mod service;
pub mod sim;
pub mod stats;

pub use hierarchy::{AllWeights, HierarchyConfig, IndexReport, IndicatorVector, Level, MissingPolicy, WeightSet};
pub use inference::{BeliefState, GaussianBelief, LikertElicitation, PriorConfig};
pub use phenotyping::{AdjustedMatrix, CertaintyConfig, TimedLikertResponse};
