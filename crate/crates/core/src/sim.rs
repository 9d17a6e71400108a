//! Seeded synthetic cohorts: ground-truth weights, Likert elicitations,
//! binary deprivations and timed responses.
//!
//! Deprivations follow the same Bernoulli-sigmoid model the posterior update
//! assumes, `x_ij ~ Bernoulli(σ(ω_j))`, so inference is exercised against its
//! matched model.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{HierarchyConfig, IndicatorVector};
use crate::inference::{sigmoid, LikertElicitation};
use crate::phenotyping::TimedLikertResponse;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Lognormal response latency whose median falls geometrically from
/// `median_low_confidence` (confidence 1) to `median_high_confidence`
/// (confidence 5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    pub median_low_confidence: f64,
    pub median_high_confidence: f64,
    pub log_sigma: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { median_low_confidence: 8.0, median_high_confidence: 1.0, log_sigma: 0.5 }
    }
}

impl LatencyModel {
    pub fn median(&self, confidence: u8) -> f64 {
        let f = (confidence.clamp(1, 5) - 1) as f64 / 4.0;
        self.median_low_confidence * (self.median_high_confidence / self.median_low_confidence).powf(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_children: usize,
    pub n_respondents: usize,
    pub truth_weight_range: (f64, f64),
    /// Standard deviation (in rating points) of the noise added to the affine
    /// image of the truth weight before rounding.
    pub importance_noise: f64,
    pub response_noise: f64,
    pub latency: LatencyModel,
    /// Probability that a timed response is left unanswered.
    pub response_dropout: f64,
    pub start_time: DateTime<Utc>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            n_children: 200,
            n_respondents: 40,
            truth_weight_range: (-2.0, 2.0),
            importance_noise: 0.5,
            response_noise: 0.75,
            latency: LatencyModel::default(),
            response_dropout: 0.1,
            start_time: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let (lo, hi) = self.truth_weight_range;
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_children == 0 {
            return bad("n_children must be at least 1");
        }
        if self.n_respondents == 0 {
            return bad("n_respondents must be at least 1");
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad("truth_weight_range must be a finite interval with lo < hi");
        }
        if !(self.importance_noise >= 0.0 && self.response_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..1.0).contains(&self.response_dropout) {
            return bad("response_dropout must lie in [0, 1)");
        }
        let l = &self.latency;
        if !(l.median_low_confidence > 0.0 && l.median_high_confidence > 0.0 && l.log_sigma >= 0.0) {
            return bad("latency medians must be positive and log_sigma non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBundle {
    pub truth: BTreeMap<String, f64>,
    pub elicitations: Vec<LikertElicitation>,
    pub indicator_vectors: Vec<IndicatorVector>,
    pub timed_responses: Vec<TimedLikertResponse>,
}

/// Affine map of `omega` from the truth range onto 1..5, plus optional
/// noise, rounded and clamped.
fn to_likert(omega: f64, range: (f64, f64), noise: f64) -> u8 {
    let (lo, hi) = range;
    let v = 1.0 + 4.0 * (omega - lo) / (hi - lo) + noise;
    v.round().clamp(1.0, 5.0) as u8
}

pub fn respondent_id(i: usize) -> String {
    format!("r{:04}", i + 1)
}

pub fn child_id(i: usize) -> String {
    format!("c{:04}", i + 1)
}

/// Draws, in order: truth weights, elicitations, indicator vectors, timed
/// responses. Fully determined by `cfg.seed`.
pub fn generate(cfg: &SimConfig, hierarchy: &HierarchyConfig) -> Result<SimBundle, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = hierarchy.indicator_ids();
    let (lo, hi) = cfg.truth_weight_range;

    let truth: BTreeMap<String, f64> = ids.iter().map(|id| (id.clone(), rng.random_range(lo..=hi))).collect();

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut elicitations = Vec::with_capacity(cfg.n_respondents * ids.len());
    for r in 0..cfg.n_respondents {
        for id in &ids {
            let noise = cfg.importance_noise * std_normal.sample(&mut rng);
            let importance = to_likert(truth[id], cfg.truth_weight_range, noise);
            let confidence = rng.random_range(1..=5u8);
            elicitations.push(LikertElicitation { respondent_id: respondent_id(r), indicator_id: id.clone(), importance, confidence });
        }
    }

    let mut indicator_vectors = Vec::with_capacity(cfg.n_children);
    for c in 0..cfg.n_children {
        let values = ids.iter().map(|id| (id.clone(), rng.random_bool(sigmoid(truth[id])) as u8)).collect();
        indicator_vectors.push(IndicatorVector {
            child_id: child_id(c),
            values,
            observed_at: cfg.start_time + Duration::minutes(c as i64),
        });
    }

    let mut timed_responses = Vec::new();
    for r in 0..cfg.n_respondents {
        let session_id = format!("s-{}", respondent_id(r));
        let mut clock = cfg.start_time + Duration::days(1) + Duration::hours(r as i64);
        for id in &ids {
            let answered = !rng.random_bool(cfg.response_dropout);
            let noise = cfg.response_noise * std_normal.sample(&mut rng);
            let confidence = rng.random_range(1..=5u8);
            let latency = LogNormal::new(cfg.latency.median(confidence).ln(), cfg.latency.log_sigma).expect("validated latency");
            let seconds: f64 = latency.sample(&mut rng);
            let ms = (seconds * 1000.0).round();
            clock += Duration::milliseconds(ms as i64);
            if !answered {
                continue;
            }
            timed_responses.push(TimedLikertResponse {
                respondent_id: respondent_id(r),
                indicator_id: id.clone(),
                rating: to_likert(truth[id], cfg.truth_weight_range, noise),
                response_time: ms / 1000.0,
                captured_at: clock,
                session_id: session_id.clone(),
            });
        }
    }

    Ok(SimBundle { truth, elicitations, indicator_vectors, timed_responses })
}
