//! Gaussian priors over indicator weights elicited from Likert
//! importance/confidence ratings, the Bernoulli-sigmoid likelihood, the
//! closed-form posterior update and a grid-integration oracle used to report
//! how far that closed form is from the exact posterior.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{self, HierarchyConfig, IndicatorVector, Level, WeightSet};

/// Floor applied to posterior means before they become aggregation weights.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Grid size used by [`grid_posterior_oracle`].
pub const GRID_POINTS: usize = 20_001;

/// Half-width of the oracle grid in prior standard deviations.
pub const GRID_HALF_WIDTH_SD: f64 = 10.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("no elicitation for indicator {0}")]
    MissingElicitation(String),
    #[error("elicitation for unknown indicator {0}")]
    UnknownIndicator(String),
    #[error("no belief for indicator {0}")]
    MissingBelief(String),
    #[error("{field} rating {value} outside 1..=5 (respondent {respondent_id}, indicator {indicator_id})")]
    RatingOutOfRange { field: &'static str, value: u8, respondent_id: String, indicator_id: String },
    #[error("prior scaling factor must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("belief for {indicator_id} has invalid variance {variance}")]
    InvalidVariance { indicator_id: String, variance: f64 },
    #[error("belief for {indicator_id} has non-finite mean {mean}")]
    InvalidMean { indicator_id: String, mean: f64 },
    #[error("observation {value} is not binary")]
    NonBinary { value: u8 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("belief map key {key} does not match indicator id {indicator_id}")]
    KeyMismatch { key: String, indicator_id: String },
    #[error(transparent)]
    Hierarchy(#[from] hierarchy::HierarchyError),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertElicitation {
    pub respondent_id: String,
    pub indicator_id: String,
    pub importance: u8,
    pub confidence: u8,
}

impl LikertElicitation {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [("importance", self.importance), ("confidence", self.confidence)] {
            if !(1..=5).contains(&value) {
                return Err(InferenceError::RatingOutOfRange {
                    field,
                    value,
                    respondent_id: self.respondent_id.clone(),
                    indicator_id: self.indicator_id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Mean/variance belief over one indicator weight, on the 1–5 importance scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub indicator_id: String,
    pub mean: f64,
    pub variance: f64,
}

impl GaussianBelief {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return Err(InferenceError::InvalidVariance { indicator_id: self.indicator_id.clone(), variance: self.variance });
        }
        if !self.mean.is_finite() {
            return Err(InferenceError::InvalidMean { indicator_id: self.indicator_id.clone(), mean: self.mean });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Scaling factor in `variance = alpha_prior / mean confidence`.
    pub alpha_prior: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { alpha_prior: 1.0 }
    }
}

/// Prior per indicator: mean importance, and `alpha_prior / mean confidence`
/// as variance.
pub fn elicit_prior(
    elicitations: &[LikertElicitation],
    indicator_ids: &[String],
    cfg: &PriorConfig,
) -> Result<BTreeMap<String, GaussianBelief>> {
    if !(cfg.alpha_prior.is_finite() && cfg.alpha_prior > 0.0) {
        return Err(InferenceError::InvalidAlpha(cfg.alpha_prior));
    }
    // (count, importance sum, confidence sum)
    let mut acc: BTreeMap<&str, (u64, u64, u64)> = indicator_ids.iter().map(|id| (id.as_str(), (0, 0, 0))).collect();
    for e in elicitations {
        e.validate()?;
        let slot = acc
            .get_mut(e.indicator_id.as_str())
            .ok_or_else(|| InferenceError::UnknownIndicator(e.indicator_id.clone()))?;
        slot.0 += 1;
        slot.1 += e.importance as u64;
        slot.2 += e.confidence as u64;
    }
    let mut out = BTreeMap::new();
    for id in indicator_ids {
        let (n, imp, conf) = acc[id.as_str()];
        if n == 0 {
            return Err(InferenceError::MissingElicitation(id.clone()));
        }
        let n = n as f64;
        let mean_confidence = conf as f64 / n;
        out.insert(
            id.clone(),
            GaussianBelief { indicator_id: id.clone(), mean: imp as f64 / n, variance: cfg.alpha_prior / mean_confidence },
        );
    }
    Ok(out)
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(w)`.
pub fn log_sigmoid(w: f64) -> f64 {
    -softplus(-w)
}

/// `ln(1 − σ(w))`.
pub fn log_one_minus_sigmoid(w: f64) -> f64 {
    -softplus(w)
}

/// Joint Bernoulli log-likelihood of an `n × k` binary matrix (rows are
/// children) given one weight per column.
pub fn bernoulli_loglik(x: &[Vec<u8>], w: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, row) in x.iter().enumerate() {
        if row.len() != w.len() {
            return Err(InferenceError::Shape(format!("row {i} has {} columns, expected {}", row.len(), w.len())));
        }
        for (&xij, &wj) in row.iter().zip(w) {
            total += match xij {
                1 => log_sigmoid(wj),
                0 => log_one_minus_sigmoid(wj),
                value => return Err(InferenceError::NonBinary { value }),
            };
        }
    }
    Ok(total)
}

fn check_column(column: &[u8]) -> Result<f64> {
    let mut s = 0u64;
    for &x in column {
        match x {
            0 => {}
            1 => s += 1,
            value => return Err(InferenceError::NonBinary { value }),
        }
    }
    Ok(s as f64)
}

/// One-shot Gaussian approximation of the posterior for one indicator weight:
///
/// ```text
/// μ' = (σ² Σ(x − σ(μ)) + μ σ²) / (Σ x² + σ²)
/// σ'² = (1/σ² + Σ x²)⁻¹
/// ```
///
/// The logistic term is evaluated at the prior mean. An empty column returns
/// the prior unchanged.
pub fn posterior_update(prior: &GaussianBelief, column: &[u8]) -> Result<GaussianBelief> {
    prior.validate()?;
    let sum_x = check_column(column)?;
    if column.is_empty() {
        return Ok(prior.clone());
    }
    let var = prior.variance;
    let n = column.len() as f64;
    // x² = x for binary data
    let residual = sum_x - n * sigmoid(prior.mean);
    let mean = (var * residual + prior.mean * var) / (sum_x + var);
    // Same quantity as (1/σ² + Σx)⁻¹, but cannot round above σ².
    let variance = var / (1.0 + var * sum_x);
    Ok(GaussianBelief { indicator_id: prior.indicator_id.clone(), mean, variance })
}

/// Moment-matched exact posterior `∝ Bernoulli likelihood × Gaussian prior`,
/// integrated on a dense grid over `μ ± 10σ` in log space.
pub fn grid_posterior_oracle(prior: &GaussianBelief, column: &[u8]) -> Result<GaussianBelief> {
    prior.validate()?;
    let s = check_column(column)?;
    let f = column.len() as f64 - s;
    let sd = prior.variance.sqrt();
    let lo = prior.mean - GRID_HALF_WIDTH_SD * sd;
    let step = 2.0 * GRID_HALF_WIDTH_SD * sd / (GRID_POINTS - 1) as f64;
    let log_density = |w: f64| {
        let z = (w - prior.mean) / sd;
        let mut lp = -0.5 * z * z;
        if s > 0.0 {
            lp += s * log_sigmoid(w);
        }
        if f > 0.0 {
            lp += f * log_one_minus_sigmoid(w);
        }
        lp
    };
    let points: Vec<(f64, f64)> = (0..GRID_POINTS).map(|i| {
        let w = lo + step * i as f64;
        (w, log_density(w))
    }).collect();
    let max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    // trapezoid weights
    let (mut z, mut m1) = (0.0, 0.0);
    for (i, &(w, lp)) in points.iter().enumerate() {
        let tw = if i == 0 || i == GRID_POINTS - 1 { 0.5 } else { 1.0 };
        let p = tw * (lp - max).exp();
        z += p;
        m1 += p * w;
    }
    let mean = m1 / z;
    let mut m2 = 0.0;
    for (i, &(w, lp)) in points.iter().enumerate() {
        let tw = if i == 0 || i == GRID_POINTS - 1 { 0.5 } else { 1.0 };
        let d = w - mean;
        m2 += tw * (lp - max).exp() * d * d;
    }
    Ok(GaussianBelief { indicator_id: prior.indicator_id.clone(), mean, variance: m2 / z })
}

/// Per-indicator comparison of the closed-form update with the grid oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDiagnostic {
    pub indicator_id: String,
    pub n: usize,
    pub deprived: usize,
    pub closed_form_mean: f64,
    pub closed_form_variance: f64,
    pub grid_mean: f64,
    pub grid_variance: f64,
    pub mean_divergence: f64,
    pub variance_divergence: f64,
}

pub fn posterior_diagnostic(prior: &GaussianBelief, column: &[u8]) -> Result<PosteriorDiagnostic> {
    let closed = posterior_update(prior, column)?;
    let grid = grid_posterior_oracle(prior, column)?;
    Ok(PosteriorDiagnostic {
        indicator_id: prior.indicator_id.clone(),
        n: column.len(),
        deprived: column.iter().filter(|&&x| x == 1).count(),
        closed_form_mean: closed.mean,
        closed_form_variance: closed.variance,
        grid_mean: grid.mean,
        grid_variance: grid.variance,
        mean_divergence: (closed.mean - grid.mean).abs(),
        variance_divergence: (closed.variance - grid.variance).abs(),
    })
}

/// Persisted beliefs: one entry per indicator plus the number of survey waves
/// already folded in. The posterior of wave `t` is the prior of wave `t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub wave: u64,
    pub beliefs: BTreeMap<String, GaussianBelief>,
}

impl BeliefState {
    pub fn from_prior(beliefs: BTreeMap<String, GaussianBelief>) -> Self {
        BeliefState { wave: 0, beliefs }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, b) in &self.beliefs {
            if *k != b.indicator_id {
                return Err(InferenceError::KeyMismatch { key: k.clone(), indicator_id: b.indicator_id.clone() });
            }
            b.validate()?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: BeliefState = serde_json::from_str(s)?;
        state.validate()?;
        Ok(state)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Binary column for one indicator across children; children missing the
/// indicator are skipped.
pub fn indicator_column(observations: &[IndicatorVector], indicator_id: &str) -> Vec<u8> {
    observations.iter().filter_map(|x| x.values.get(indicator_id).copied()).collect()
}

/// Folds one wave of observations into every belief. A wave with no
/// observations leaves the state untouched, wave counter included.
pub fn update_beliefs(
    state: &BeliefState,
    observations: &[IndicatorVector],
    with_diagnostics: bool,
) -> Result<(BeliefState, Vec<PosteriorDiagnostic>)> {
    state.validate()?;
    for x in observations {
        for id in x.values.keys() {
            if !state.beliefs.contains_key(id) {
                return Err(InferenceError::MissingBelief(id.clone()));
            }
        }
    }
    if observations.is_empty() {
        return Ok((state.clone(), Vec::new()));
    }
    let results: Vec<(GaussianBelief, Option<PosteriorDiagnostic>)> = state
        .beliefs
        .par_iter()
        .map(|(id, prior)| {
            let column = indicator_column(observations, id);
            let post = posterior_update(prior, &column)?;
            let diag = if with_diagnostics { Some(posterior_diagnostic(prior, &column)?) } else { None };
            Ok((post, diag))
        })
        .collect::<Result<_>>()?;
    let mut beliefs = BTreeMap::new();
    let mut diagnostics = Vec::new();
    for (post, diag) in results {
        diagnostics.extend(diag);
        beliefs.insert(post.indicator_id.clone(), post);
    }
    Ok((BeliefState { wave: state.wave + 1, beliefs }, diagnostics))
}

/// Indicator-level aggregation weights: `max(mean, 1e-6)` normalized within
/// each construct.
pub fn beliefs_to_weights(beliefs: &BTreeMap<String, GaussianBelief>, config: &HierarchyConfig) -> Result<WeightSet> {
    let mut raw = BTreeMap::new();
    for ind in &config.indicators {
        let b = beliefs.get(&ind.id).ok_or_else(|| InferenceError::MissingBelief(ind.id.clone()))?;
        let m = if b.mean.is_finite() { b.mean.max(WEIGHT_FLOOR) } else { WEIGHT_FLOOR };
        raw.insert(ind.id.clone(), m);
    }
    Ok(hierarchy::normalize_weights(&raw, &config.grouping(Level::Indicator))?)
}

pub fn read_elicitations_json<R: Read>(r: R) -> Result<Vec<LikertElicitation>> {
    let v: Vec<LikertElicitation> = serde_json::from_reader(r)?;
    v.iter().try_for_each(LikertElicitation::validate)?;
    Ok(v)
}

/// CSV with header `respondent_id,indicator_id,importance,confidence`.
pub fn read_elicitations_csv<R: Read>(r: R) -> Result<Vec<LikertElicitation>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let e: LikertElicitation = rec?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_elicitations_csv<W: Write>(w: W, elicitations: &[LikertElicitation]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for e in elicitations {
        wtr.serialize(e)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}
