//! Feed-forward surrogate `f_ψ(ω)` for the log posterior fitness, the
//! certainty-adjusted TrueFitness target and the MSE training loss.
//!
//! All fitness values live in log space: TrueFitness is a product of up to
//! `n·k + k` Gaussian densities, which underflows `f64` long before realistic
//! survey sizes.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::GaussianBelief;
use crate::phenotyping::AdjustedMatrix;

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("variance must be positive and finite, got {0}")]
    Variance(f64),
    #[error("no prior belief for indicator {0}")]
    MissingBelief(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("loss needs at least one sample")]
    EmptySamples,
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FitnessError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

/// Architecture of the surrogate: `input_dim → hidden_layers… → 1`, with
/// `hidden_activation` on hidden layers and identity on the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: Activation,
    #[serde(default = "one")]
    pub output_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![16, 16]
}

fn one() -> usize {
    1
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>) -> Self {
        MlpSpec { input_dim, hidden_layers, hidden_activation: Activation::Tanh, output_dim: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FitnessError::InvalidNetwork("input_dim must be at least 1".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(FitnessError::InvalidNetwork("hidden layer widths must be at least 1".into()));
        }
        if self.output_dim != 1 {
            return Err(FitnessError::InvalidNetwork(format!("output_dim must be 1, got {}", self.output_dim)));
        }
        Ok(())
    }

    /// `[input, hidden…, output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.hidden_layers.len() + 2);
        v.push(self.input_dim);
        v.extend(&self.hidden_layers);
        v.push(self.output_dim);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One dense layer. `weights` is `outputs × inputs`, row-major: row `o` holds
/// the incoming weights of output unit `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetParams")]
pub struct NetParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct RawNetParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl TryFrom<RawNetParams> for NetParams {
    type Error = FitnessError;

    fn try_from(raw: RawNetParams) -> Result<Self> {
        let p = NetParams { spec: raw.spec, layers: raw.layers };
        p.validate()?;
        Ok(p)
    }
}

impl NetParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_sizes()
            .windows(2)
            .map(|w| Layer { inputs: w[0], outputs: w[1], weights: vec![0.0; w[0] * w[1]], biases: vec![0.0; w[1]] })
            .collect();
        NetParams { spec: spec.clone(), layers }
    }

    /// Every entry drawn from `uniform(−0.5, 0.5)`.
    pub fn random<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for layer in &mut p.layers {
            for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let sizes = self.spec.layer_sizes();
        if self.layers.len() != sizes.len() - 1 {
            return Err(FitnessError::InvalidNetwork(format!("expected {} layers, got {}", sizes.len() - 1, self.layers.len())));
        }
        for (i, (layer, w)) in self.layers.iter().zip(sizes.windows(2)).enumerate() {
            if layer.inputs != w[0] || layer.outputs != w[1] || layer.weights.len() != w[0] * w[1] || layer.biases.len() != w[1] {
                return Err(FitnessError::InvalidNetwork(format!("layer {i} shape does not match the network spec")));
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(FitnessError::InvalidNetwork(format!("layer {i} has a non-finite entry")));
            }
        }
        Ok(())
    }

    /// Predicted log-fitness for `omega`.
    pub fn forward(&self, omega: &[f64]) -> Result<f64> {
        if omega.len() != self.spec.input_dim {
            return Err(FitnessError::Shape(format!("omega has length {}, network expects {}", omega.len(), self.spec.input_dim)));
        }
        let last = self.layers.len() - 1;
        let mut current = omega.to_vec();
        let mut next = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let act = if li == last { Activation::Identity } else { self.spec.hidden_activation };
            next.clear();
            for (row, b) in layer.weights.chunks_exact(layer.inputs).zip(&layer.biases) {
                let z: f64 = row.iter().zip(&current).map(|(w, x)| w * x).sum::<f64>() + b;
                next.push(act.apply(z));
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current[0])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `ln N(x | mean, var)`.
pub fn gaussian_logpdf(x: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var.is_finite() && var > 0.0) {
        return Err(FitnessError::Variance(var));
    }
    let d = x - mean;
    Ok(-0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    /// Variance `τ²` of the certainty-adjusted likelihood.
    pub tau_sq: f64,
    pub prior_beliefs: BTreeMap<String, GaussianBelief>,
}

/// Log TrueFitness: `Σ_observed ln N(y_ij | ω_j, τ²) + Σ_j ln N(ω_j | μ_j, σ_j²)`.
/// The columns of `y` define the order of `omega`; missing cells are skipped.
pub fn true_log_fitness(omega: &[f64], y: &AdjustedMatrix, cfg: &LikelihoodConfig) -> Result<f64> {
    if omega.len() != y.n_cols() {
        return Err(FitnessError::Shape(format!("omega has length {}, response matrix has {} columns", omega.len(), y.n_cols())));
    }
    if !(cfg.tau_sq.is_finite() && cfg.tau_sq > 0.0) {
        return Err(FitnessError::Variance(cfg.tau_sq));
    }
    let mut total = 0.0;
    for row in &y.values {
        if row.len() != omega.len() {
            return Err(FitnessError::Shape("ragged response matrix".into()));
        }
        for (cell, &w) in row.iter().zip(omega) {
            if let Some(v) = cell {
                total += gaussian_logpdf(*v, w, cfg.tau_sq)?;
            }
        }
    }
    for (id, &w) in y.indicators.iter().zip(omega) {
        let b = cfg.prior_beliefs.get(id).ok_or_else(|| FitnessError::MissingBelief(id.clone()))?;
        total += gaussian_logpdf(w, b.mean, b.variance)?;
    }
    Ok(total)
}

/// One training pair `(ω, ln TrueFitness(ω))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessSample {
    pub omega: Vec<f64>,
    pub log_true_fitness: f64,
}

/// `(1/N) Σ (f_ψ(ω) − target)²`.
pub fn mse_loss(params: &NetParams, samples: &[FitnessSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(FitnessError::EmptySamples);
    }
    let mut sum = 0.0;
    for s in samples {
        let d = params.forward(&s.omega)? - s.log_true_fitness;
        sum += d * d;
    }
    Ok(sum / samples.len() as f64)
}

/// Draws `n` weight vectors from the prior beliefs (one draw per column of
/// `y`, in column order) and labels each with [`true_log_fitness`].
pub fn build_training_set<R: Rng + ?Sized>(
    rng: &mut R,
    y: &AdjustedMatrix,
    cfg: &LikelihoodConfig,
    n: usize,
) -> Result<Vec<FitnessSample>> {
    let dists = y
        .indicators
        .iter()
        .map(|id| {
            let b = cfg.prior_beliefs.get(id).ok_or_else(|| FitnessError::MissingBelief(id.clone()))?;
            Normal::new(b.mean, b.variance.sqrt()).map_err(|_| FitnessError::Variance(b.variance))
        })
        .collect::<Result<Vec<_>>>()?;
    (0..n)
        .map(|_| {
            let omega: Vec<f64> = dists.iter().map(|d| d.sample(rng)).collect();
            let log_true_fitness = true_log_fitness(&omega, y, cfg)?;
            Ok(FitnessSample { omega, log_true_fitness })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn belief(id: &str, mean: f64, variance: f64) -> (String, GaussianBelief) {
        (id.to_string(), GaussianBelief { indicator_id: id.into(), mean, variance })
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = NetParams::zeros(&MlpSpec::new(4, vec![5, 3]));
        assert_eq!(p.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn linear_network() {
        let spec = MlpSpec::new(3, vec![]);
        let mut p = NetParams::zeros(&spec);
        p.layers[0].weights = vec![0.5, -1.0, 2.0];
        p.layers[0].biases = vec![0.25];
        assert_eq!(p.forward(&[2.0, 1.0, 0.5]).unwrap(), 0.5 * 2.0 - 1.0 + 2.0 * 0.5 + 0.25);
        assert!(matches!(p.forward(&[1.0]), Err(FitnessError::Shape(_))));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(MlpSpec::new(2, vec![]).parameter_count(), 3);
        assert_eq!(MlpSpec::new(2, vec![3]).parameter_count(), 13);
        assert_eq!(MlpSpec::new(29, vec![16, 16]).parameter_count(), 29 * 16 + 16 + 16 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn logpdf_values() {
        let base = gaussian_logpdf(1.0, 1.0, 1.0).unwrap();
        assert_eq!(base, -0.5 * (2.0 * PI).ln());
        let v: f64 = 2.25;
        let one_sd = gaussian_logpdf(1.0 + v.sqrt(), 1.0, v).unwrap();
        assert!((one_sd - (gaussian_logpdf(1.0, 1.0, v).unwrap() - 0.5)).abs() < 1e-15);
        assert!((gaussian_logpdf(2.0, 0.0, 4.0).unwrap() - (-0.5 * (8.0 * PI).ln() - 0.5)).abs() < 1e-15);
        assert!(gaussian_logpdf(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_logpdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn fitness_of_empty_matrix_is_prior_only() {
        let cfg = LikelihoodConfig { tau_sq: 1.0, prior_beliefs: [belief("a", 3.0, 0.5), belief("b", 1.0, 2.0)].into_iter().collect() };
        let y = AdjustedMatrix { respondents: vec![], indicators: vec!["a".into(), "b".into()], values: vec![] };
        let f = true_log_fitness(&[2.0, 2.0], &y, &cfg).unwrap();
        let expected = gaussian_logpdf(2.0, 3.0, 0.5).unwrap() + gaussian_logpdf(2.0, 1.0, 2.0).unwrap();
        assert_eq!(f, expected);
    }

    #[test]
    fn fitness_single_cell_at_peak() {
        let cfg = LikelihoodConfig { tau_sq: 0.7, prior_beliefs: [belief("a", 3.0, 0.5)].into_iter().collect() };
        let y = AdjustedMatrix { respondents: vec!["r".into()], indicators: vec!["a".into()], values: vec![vec![Some(2.5)]] };
        let f = true_log_fitness(&[2.5], &y, &cfg).unwrap();
        let expected = gaussian_logpdf(2.5, 3.0, 0.5).unwrap() - 0.5 * (2.0 * PI * 0.7).ln();
        assert!((f - expected).abs() < 1e-15);
    }

    #[test]
    fn fitness_errors() {
        let cfg = LikelihoodConfig { tau_sq: 1.0, prior_beliefs: [belief("a", 3.0, 0.5)].into_iter().collect() };
        let y = AdjustedMatrix { respondents: vec![], indicators: vec!["a".into(), "b".into()], values: vec![] };
        assert!(matches!(true_log_fitness(&[1.0], &y, &cfg), Err(FitnessError::Shape(_))));
        assert!(matches!(true_log_fitness(&[1.0, 1.0], &y, &cfg), Err(FitnessError::MissingBelief(_))));
        let bad = LikelihoodConfig { tau_sq: 0.0, ..cfg };
        let y1 = AdjustedMatrix { respondents: vec![], indicators: vec!["a".into()], values: vec![] };
        assert!(matches!(true_log_fitness(&[1.0], &y1, &bad), Err(FitnessError::Variance(_))));
    }

    #[test]
    fn mse_examples() {
        let spec = MlpSpec::new(1, vec![]);
        let zero = NetParams::zeros(&spec);
        let samples = vec![
            FitnessSample { omega: vec![0.3], log_true_fitness: 1.0 },
            FitnessSample { omega: vec![-0.3], log_true_fitness: -1.0 },
        ];
        assert_eq!(mse_loss(&zero, &samples).unwrap(), 1.0);
        let mut exact = zero.clone();
        exact.layers[0].weights = vec![2.0];
        exact.layers[0].biases = vec![1.0];
        let fit: Vec<_> = [0.0, 1.5, -2.0].iter().map(|&w| FitnessSample { omega: vec![w], log_true_fitness: 2.0 * w + 1.0 }).collect();
        assert_eq!(mse_loss(&exact, &fit).unwrap(), 0.0);
        assert!(matches!(mse_loss(&zero, &[]), Err(FitnessError::EmptySamples)));
    }

    #[test]
    fn training_set_is_seeded_and_concentrates() {
        let y = AdjustedMatrix { respondents: vec!["r".into()], indicators: vec!["a".into(), "b".into()], values: vec![vec![Some(1.0), None]] };
        let cfg = LikelihoodConfig { tau_sq: 1.0, prior_beliefs: [belief("a", 3.0, 1e-12), belief("b", -1.0, 1e-12)].into_iter().collect() };
        let a = build_training_set(&mut ChaCha8Rng::seed_from_u64(9), &y, &cfg, 1).unwrap();
        let b = build_training_set(&mut ChaCha8Rng::seed_from_u64(9), &y, &cfg, 1).unwrap();
        assert_eq!(a, b);
        let many = build_training_set(&mut ChaCha8Rng::seed_from_u64(1), &y, &cfg, 50).unwrap();
        for s in &many {
            assert!((s.omega[0] - 3.0).abs() < 1e-4 && (s.omega[1] + 1.0).abs() < 1e-4);
            assert_eq!(s.log_true_fitness, true_log_fitness(&s.omega, &y, &cfg).unwrap());
        }
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NetParams::random(&MlpSpec::new(3, vec![4, 2]), &mut rng);
        let back = NetParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
        let bad = p.to_json().unwrap().replacen("\"inputs\": 3", "\"inputs\": 4", 1);
        assert!(NetParams::from_json(&bad).is_err());
    }
}
