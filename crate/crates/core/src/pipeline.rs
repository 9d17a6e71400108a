//! Pipeline stages shared by the CLI and the service. Each stage is a pure
//! function of its inputs and configuration.

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AppConfig;
use crate::evo::{self, EvolutionResult};
use crate::fitness::{self, LikelihoodConfig, MlpSpec};
use crate::hierarchy::{self, AllWeights, HierarchyConfig, IndexReport, IndicatorVector};
use crate::inference::{self, BeliefState, PosteriorDiagnostic};
use crate::phenotyping::{self, AdjustedMatrix};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Hierarchy(#[from] hierarchy::HierarchyError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Phenotyping(#[from] phenotyping::PhenotypingError),
    #[error(transparent)]
    Fitness(#[from] fitness::FitnessError),
    #[error(transparent)]
    Evo(#[from] evo::EvoError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub samples: usize,
    pub parameter_count: usize,
    pub generations: usize,
    pub initial_best_loss: f64,
    pub final_loss: f64,
    pub stop_reason: evo::StopReason,
    pub nan_count: usize,
}

pub struct TrainingOutput {
    pub result: EvolutionResult,
    pub summary: TrainingSummary,
}

/// Draws the surrogate training set from `beliefs` and evolves the network.
/// Columns of `adjusted` are aligned to the hierarchy's indicator order,
/// which is also the input order of the network.
pub fn train_fitness(
    beliefs: &BeliefState,
    adjusted: &AdjustedMatrix,
    hierarchy: &HierarchyConfig,
    cfg: &AppConfig,
) -> Result<TrainingOutput> {
    beliefs.validate()?;
    let ids = hierarchy.indicator_ids();
    let y = adjusted.aligned_to(&ids)?;
    let lik = LikelihoodConfig { tau_sq: cfg.likelihood.tau_sq, prior_beliefs: beliefs.beliefs.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let samples = fitness::build_training_set(&mut rng, &y, &lik, cfg.training.samples.max(1))?;
    let spec = MlpSpec::new(ids.len(), cfg.network.hidden_layers.clone());
    let result = evo::evolve(&samples, &spec, &cfg.ga)?;
    let summary = TrainingSummary {
        samples: samples.len(),
        parameter_count: spec.parameter_count(),
        generations: result.history.len(),
        initial_best_loss: -result.history[0].best_fitness,
        final_loss: -result.best_fitness,
        stop_reason: result.stop_reason,
        nan_count: result.total_nan,
    };
    Ok(TrainingOutput { result, summary })
}

/// Indicator weights from the beliefs, higher levels from the hierarchy
/// defaults.
pub fn weights_from_beliefs(beliefs: &BeliefState, hierarchy: &HierarchyConfig) -> Result<AllWeights> {
    let indicator = inference::beliefs_to_weights(&beliefs.beliefs, hierarchy)?;
    Ok(AllWeights::with_indicator_weights(hierarchy, indicator))
}

/// One report per observation, in input order.
pub fn compute_index(
    beliefs: &BeliefState,
    observations: &[IndicatorVector],
    hierarchy: &HierarchyConfig,
    cfg: &AppConfig,
    computed_at: DateTime<Utc>,
) -> Result<Vec<IndexReport>> {
    let weights = weights_from_beliefs(beliefs, hierarchy)?;
    weights.validate(hierarchy)?;
    observations
        .iter()
        .map(|x| Ok(hierarchy::compute_micg(x, &weights, hierarchy, cfg.missing_policy, computed_at)?))
        .collect()
}

pub fn update_posterior(
    beliefs: &BeliefState,
    observations: &[IndicatorVector],
) -> Result<(BeliefState, Vec<PosteriorDiagnostic>)> {
    Ok(inference::update_beliefs(beliefs, observations, true)?)
}
