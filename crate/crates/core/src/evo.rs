//! Genetic algorithm over flattened surrogate-network parameters.
//!
//! Gene order is canonical: for each layer in turn, the row-major weight
//! matrix followed by the bias vector. Fitness is the negative MSE loss.
//! Selection, crossover and mutation draw from a single seeded ChaCha stream
//! in a fixed order; fitness evaluation runs in parallel but is pure, so runs
//! are reproducible bit for bit.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::{self, FitnessSample, Layer, MlpSpec, NetParams};

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("chromosome has {found} genes, spec needs {expected}")]
    Length { expected: usize, found: usize },
    #[error("parents differ in length: {0} vs {1}")]
    ParentLength(usize, usize),
    #[error("crossover alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("invalid GA config: {0}")]
    Config(String),
    #[error("empty population")]
    EmptyPopulation,
    #[error(transparent)]
    Fitness(#[from] fitness::FitnessError),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvoError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chromosome {
    pub genes: Vec<f64>,
}

impl Chromosome {
    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }
}

pub fn encode(params: &NetParams) -> Chromosome {
    let mut genes = Vec::with_capacity(params.spec.parameter_count());
    for layer in &params.layers {
        genes.extend_from_slice(&layer.weights);
        genes.extend_from_slice(&layer.biases);
    }
    Chromosome { genes }
}

pub fn decode(c: &Chromosome, spec: &MlpSpec) -> Result<NetParams> {
    let expected = spec.parameter_count();
    if c.len() != expected {
        return Err(EvoError::Length { expected, found: c.len() });
    }
    let mut rest = c.genes.as_slice();
    let mut layers = Vec::new();
    for w in spec.layer_sizes().windows(2) {
        let (inputs, outputs) = (w[0], w[1]);
        let (weights, tail) = rest.split_at(inputs * outputs);
        let (biases, tail) = tail.split_at(outputs);
        layers.push(Layer { inputs, outputs, weights: weights.to_vec(), biases: biases.to_vec() });
        rest = tail;
    }
    Ok(NetParams { spec: spec.clone(), layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Selection {
    Tournament { size: usize },
    /// Rank-weighted roulette wheel: the worst individual has weight 1, the
    /// best has weight `population_size`.
    Roulette,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "snake_case")]
pub enum CrossoverAlpha {
    Fixed(f64),
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population_size: usize,
    pub selection: Selection,
    pub crossover_alpha: CrossoverAlpha,
    /// Standard deviation of the additive Gaussian mutation noise.
    pub mutation_sigma: f64,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    pub elitism_count: usize,
    pub max_generations: usize,
    pub stagnation_window: usize,
    pub stagnation_epsilon: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: 64,
            selection: Selection::Tournament { size: 3 },
            crossover_alpha: CrossoverAlpha::UniformRandom,
            mutation_sigma: 0.05,
            mutation_rate: 0.1,
            elitism_count: 2,
            max_generations: 500,
            stagnation_window: 50,
            stagnation_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EvoError::Config(m));
        if self.elitism_count == 0 || self.elitism_count >= self.population_size {
            return fail(format!("need 0 < elitism_count ({}) < population_size ({})", self.elitism_count, self.population_size));
        }
        if !(self.mutation_sigma.is_finite() && self.mutation_sigma > 0.0) {
            return fail(format!("mutation_sigma = {}", self.mutation_sigma));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return fail(format!("mutation_rate = {}", self.mutation_rate));
        }
        if let CrossoverAlpha::Fixed(a) = self.crossover_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(EvoError::Alpha(a));
            }
        }
        if let Selection::Tournament { size } = self.selection {
            if size == 0 {
                return fail("tournament size must be at least 1".into());
            }
        }
        if self.max_generations == 0 {
            return fail("max_generations must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    /// Best fitness in this generation.
    pub best_fitness: f64,
    /// Mean over individuals with finite fitness.
    pub mean_fitness: f64,
    pub best_ever_fitness: f64,
    /// Individuals whose fitness was NaN / non-finite and were quarantined.
    pub nan_count: usize,
    pub best_chromosome: Chromosome,
}

/// `−mse_loss(decode(c), samples)`.
pub fn evaluate_fitness(c: &Chromosome, spec: &MlpSpec, samples: &[FitnessSample]) -> Result<f64> {
    let params = decode(c, spec)?;
    Ok(-fitness::mse_loss(&params, samples)?)
}

/// Picks two parent indices. Non-finite fitness never wins a tournament
/// against a finite one and has zero roulette weight.
pub fn select<R: Rng + ?Sized>(fitnesses: &[f64], selection: Selection, rng: &mut R) -> Result<(usize, usize)> {
    if fitnesses.is_empty() {
        return Err(EvoError::EmptyPopulation);
    }
    let n = fitnesses.len();
    match selection {
        Selection::Tournament { size } => {
            let mut pick = || {
                let mut best = rng.random_range(0..n);
                for _ in 1..size.max(1) {
                    let c = rng.random_range(0..n);
                    if better(fitnesses[c], c, fitnesses[best], best) {
                        best = c;
                    }
                }
                best
            };
            let a = pick();
            let b = pick();
            Ok((a, b))
        }
        Selection::Roulette => {
            let finite: Vec<usize> = (0..n).filter(|&i| fitnesses[i].is_finite()).collect();
            let first = fitnesses.iter().find(|f| f.is_finite());
            let all_equal = finite.iter().all(|&i| Some(&fitnesses[i]) == first);
            let weights: Vec<f64> = if finite.is_empty() {
                vec![1.0; n]
            } else if all_equal {
                (0..n).map(|i| if fitnesses[i].is_finite() { 1.0 } else { 0.0 }).collect()
            } else {
                // ascending fitness; among ties the lower index ranks higher
                let mut order = finite.clone();
                order.sort_by(|&a, &b| fitnesses[a].total_cmp(&fitnesses[b]).then(b.cmp(&a)));
                let mut w = vec![0.0; n];
                for (rank, &i) in order.iter().enumerate() {
                    w[i] = (rank + 1) as f64;
                }
                w
            };
            let dist = WeightedIndex::new(&weights).map_err(|e| EvoError::Config(e.to_string()))?;
            Ok((dist.sample(rng), dist.sample(rng)))
        }
    }
}

fn better(fa: f64, ia: usize, fb: f64, ib: usize) -> bool {
    fa > fb || (fa == fb && ia < ib)
}

/// Gene-wise `alpha·p1 + (1 − alpha)·p2`.
pub fn crossover(p1: &Chromosome, p2: &Chromosome, alpha: f64) -> Result<Chromosome> {
    if p1.len() != p2.len() {
        return Err(EvoError::ParentLength(p1.len(), p2.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EvoError::Alpha(alpha));
    }
    let genes = p1.genes.iter().zip(&p2.genes).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    Ok(Chromosome { genes })
}

/// Each gene, with probability `mutation_rate`, gets `N(0, σ²)` noise added.
pub fn mutate<R: Rng + ?Sized>(c: &Chromosome, cfg: &GaConfig, rng: &mut R) -> Chromosome {
    let noise = Normal::new(0.0, cfg.mutation_sigma).expect("validated sigma");
    let genes = c
        .genes
        .iter()
        .map(|&g| if rng.random_bool(cfg.mutation_rate) { g + noise.sample(rng) } else { g })
        .collect();
    Chromosome { genes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxGenerations,
    Stagnation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionResult {
    pub best: NetParams,
    pub best_fitness: f64,
    pub history: Vec<GenerationStats>,
    pub stop_reason: StopReason,
    pub total_nan: usize,
}

pub fn evolve(samples: &[FitnessSample], spec: &MlpSpec, cfg: &GaConfig) -> Result<EvolutionResult> {
    evolve_with_population(samples, spec, cfg, Vec::new())
}

/// Like [`evolve`], with `initial` occupying the first population slots; the
/// rest is drawn uniformly from (−0.5, 0.5).
pub fn evolve_with_population(
    samples: &[FitnessSample],
    spec: &MlpSpec,
    cfg: &GaConfig,
    initial: Vec<Chromosome>,
) -> Result<EvolutionResult> {
    cfg.validate()?;
    spec.validate()?;
    if samples.is_empty() {
        return Err(fitness::FitnessError::EmptySamples.into());
    }
    let len = spec.parameter_count();
    if initial.len() > cfg.population_size {
        return Err(EvoError::Config(format!("{} seed individuals exceed population size", initial.len())));
    }
    for c in &initial {
        if c.len() != len {
            return Err(EvoError::Length { expected: len, found: c.len() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut population = initial;
    while population.len() < cfg.population_size {
        population.push(encode(&NetParams::random(spec, &mut rng)));
    }

    let mut history: Vec<GenerationStats> = Vec::new();
    let mut best_ever: Option<(f64, Chromosome)> = None;
    let mut total_nan = 0;
    let mut stop_reason = StopReason::MaxGenerations;

    for generation in 0..cfg.max_generations {
        let raw: Vec<f64> = population
            .par_iter()
            .map(|c| evaluate_fitness(c, spec, samples))
            .collect::<Result<_>>()?;
        let nan_count = raw.iter().filter(|f| !f.is_finite()).count();
        total_nan += nan_count;
        let fitnesses: Vec<f64> = raw.iter().map(|&f| if f.is_finite() { f } else { f64::NEG_INFINITY }).collect();

        let order = ranked(&fitnesses);
        let gen_best = order[0];
        let finite: Vec<f64> = fitnesses.iter().copied().filter(|f| f.is_finite()).collect();
        let mean_fitness = if finite.is_empty() { f64::NEG_INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        if best_ever.as_ref().is_none_or(|(f, _)| fitnesses[gen_best] > *f) {
            best_ever = Some((fitnesses[gen_best], population[gen_best].clone()));
        }
        let best_ever_fitness = best_ever.as_ref().map(|b| b.0).unwrap_or(f64::NEG_INFINITY);
        history.push(GenerationStats {
            generation,
            best_fitness: fitnesses[gen_best],
            mean_fitness,
            best_ever_fitness,
            nan_count,
            best_chromosome: population[gen_best].clone(),
        });

        if generation >= cfg.stagnation_window && cfg.stagnation_window > 0 {
            let then = history[generation - cfg.stagnation_window].best_ever_fitness;
            let gain = best_ever_fitness - then;
            // NaN gain (all-NaN history) also counts as stagnation
            if gain.is_nan() || gain < cfg.stagnation_epsilon {
                stop_reason = StopReason::Stagnation;
                break;
            }
        }
        if generation + 1 == cfg.max_generations {
            break;
        }

        let mut next: Vec<Chromosome> = order
            .iter()
            .filter(|&&i| fitnesses[i].is_finite())
            .take(cfg.elitism_count)
            .map(|&i| population[i].clone())
            .collect();
        while next.len() < cfg.population_size {
            let (a, b) = select(&fitnesses, cfg.selection, &mut rng)?;
            let alpha = match cfg.crossover_alpha {
                CrossoverAlpha::Fixed(a) => a,
                CrossoverAlpha::UniformRandom => rng.random_range(0.0..=1.0),
            };
            let child = crossover(&population[a], &population[b], alpha)?;
            next.push(mutate(&child, cfg, &mut rng));
        }
        population = next;
    }

    let (best_fitness, best_chromosome) = best_ever.expect("at least one generation");
    Ok(EvolutionResult { best: decode(&best_chromosome, spec)?, best_fitness, history, stop_reason, total_nan })
}

/// Indices by descending fitness, ties to the lower index.
fn ranked(fitnesses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitnesses.len()).collect();
    order.sort_by(|&a, &b| fitnesses[b].total_cmp(&fitnesses[a]).then(a.cmp(&b)));
    order
}

/// `generation,best_fitness,mean_fitness`.
pub fn write_history_csv<W: Write>(w: W, history: &[GenerationStats]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["generation", "best_fitness", "mean_fitness"])?;
    for s in history {
        wtr.write_record([s.generation.to_string(), s.best_fitness.to_string(), s.mean_fitness.to_string()])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_samples(n: usize) -> Vec<FitnessSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|_| {
                let omega: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                FitnessSample { log_true_fitness: 0.7 * omega[0] - 0.4 * omega[1] + 0.1, omega }
            })
            .collect()
    }

    #[test]
    fn chromosome_lengths() {
        let p = NetParams::zeros(&MlpSpec::new(2, vec![]));
        assert_eq!(encode(&p).len(), 3);
        let spec = MlpSpec::new(2, vec![3]);
        assert_eq!(encode(&NetParams::zeros(&spec)).len(), 13);
        assert!(matches!(decode(&Chromosome { genes: vec![0.0; 12] }, &spec), Err(EvoError::Length { expected: 13, found: 12 })));
    }

    #[test]
    fn canonical_gene_order() {
        let spec = MlpSpec::new(2, vec![1]);
        let mut p = NetParams::zeros(&spec);
        p.layers[0].weights = vec![1.0, 2.0];
        p.layers[0].biases = vec![3.0];
        p.layers[1].weights = vec![4.0];
        p.layers[1].biases = vec![5.0];
        assert_eq!(encode(&p).genes, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn crossover_examples() {
        let p1 = Chromosome { genes: vec![0.0, 0.0] };
        let p2 = Chromosome { genes: vec![2.0, 2.0] };
        assert_eq!(crossover(&p1, &p2, 1.0).unwrap(), p1);
        assert_eq!(crossover(&p1, &p2, 0.5).unwrap().genes, vec![1.0, 1.0]);
        assert_eq!(crossover(&Chromosome { genes: vec![4.0] }, &Chromosome { genes: vec![0.0] }, 0.25).unwrap().genes, vec![1.0]);
        assert!(crossover(&p1, &Chromosome { genes: vec![1.0] }, 0.5).is_err());
        assert!(crossover(&p1, &p2, 1.5).is_err());
    }

    #[test]
    fn mutation_limits() {
        let c = Chromosome { genes: (0..50).map(|i| i as f64 * 0.1).collect() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let off = GaConfig { mutation_rate: 0.0, ..Default::default() };
        assert_eq!(mutate(&c, &off, &mut rng), c);
        let tiny = GaConfig { mutation_rate: 1.0, mutation_sigma: 1e-300, ..Default::default() };
        let m = mutate(&c, &tiny, &mut rng);
        assert!(m.genes.iter().zip(&c.genes).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn mutation_rate_fraction() {
        let c = Chromosome { genes: vec![0.0; 1000] };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let m = mutate(&c, &GaConfig::default(), &mut rng);
        let frac = m.genes.iter().filter(|&&g| g != 0.0).count() as f64 / 1000.0;
        assert!(frac > 0.05 && frac < 0.15, "{frac}");
    }

    #[test]
    fn selection_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select(&[-3.0], Selection::Tournament { size: 3 }, &mut rng).unwrap(), (0, 0));
        assert_eq!(select(&[-3.0], Selection::Roulette, &mut rng).unwrap(), (0, 0));
        assert!(select(&[], Selection::Roulette, &mut rng).is_err());
        // a tournament of the whole population with replacement always contains the dominant one often
        let f = [-5.0, -0.1, -4.0, -9.0];
        for _ in 0..100 {
            let (a, b) = select(&f, Selection::Tournament { size: 64 }, &mut rng).unwrap();
            assert_eq!((a, b), (1, 1));
        }
        // quarantined individuals never win roulette
        for _ in 0..200 {
            let (a, b) = select(&[f64::NEG_INFINITY, -1.0, -2.0], Selection::Roulette, &mut rng).unwrap();
            assert!(a != 0 && b != 0);
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert!(better(-1.0, 2, -1.0, 5));
        assert!(!better(-1.0, 5, -1.0, 2));
        assert_eq!(ranked(&[-1.0, -0.5, -0.5, f64::NEG_INFINITY]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn selection_is_deterministic() {
        let f: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
        for sel in [Selection::Tournament { size: 3 }, Selection::Roulette] {
            let mut a = ChaCha8Rng::seed_from_u64(42);
            let mut b = ChaCha8Rng::seed_from_u64(42);
            let sa: Vec<_> = (0..50).map(|_| select(&f, sel, &mut a).unwrap()).collect();
            let sb: Vec<_> = (0..50).map(|_| select(&f, sel, &mut b).unwrap()).collect();
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn fitness_is_negative_loss() {
        let spec = MlpSpec::new(2, vec![]);
        let samples = linear_samples(10);
        let perfect = Chromosome { genes: vec![0.7, -0.4, 0.1] };
        assert!(evaluate_fitness(&perfect, &spec, &samples).unwrap().abs() < 1e-15);
        let worse = Chromosome { genes: vec![0.0, 0.0, 0.0] };
        let fw = evaluate_fitness(&worse, &spec, &samples).unwrap();
        assert!(fw < 0.0);
    }

    #[test]
    fn elitism_preserves_seeded_optimum() {
        let spec = MlpSpec::new(2, vec![]);
        let samples: Vec<_> = linear_samples(20)
            .into_iter()
            .map(|s| FitnessSample { log_true_fitness: 0.5 * s.omega[0] + 0.25 * s.omega[1] - 1.0, ..s })
            .collect();
        let perfect = Chromosome { genes: vec![0.5, 0.25, -1.0] };
        let cfg = GaConfig { population_size: 16, max_generations: 30, ..Default::default() };
        let res = evolve_with_population(&samples, &spec, &cfg, vec![perfect.clone()]).unwrap();
        assert_eq!(res.best_fitness, 0.0);
        assert_eq!(encode(&res.best), perfect);
    }

    #[test]
    fn evolve_deterministic_and_monotone() {
        let spec = MlpSpec::new(2, vec![3]);
        let samples = linear_samples(30);
        let cfg = GaConfig { population_size: 20, max_generations: 40, seed: 8, ..Default::default() };
        let a = evolve(&samples, &spec, &cfg).unwrap();
        let b = evolve(&samples, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.history.windows(2) {
            assert!(w[1].best_ever_fitness >= w[0].best_ever_fitness);
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        for s in &a.history {
            assert!(s.best_fitness >= s.mean_fitness);
            assert_eq!(s.best_chromosome.len(), spec.parameter_count());
        }
    }

    #[test]
    fn stagnation_stops_early() {
        let spec = MlpSpec::new(2, vec![]);
        let samples = linear_samples(5);
        let cfg = GaConfig {
            population_size: 8,
            max_generations: 500,
            stagnation_window: 5,
            stagnation_epsilon: 1e9,
            ..Default::default()
        };
        let res = evolve(&samples, &spec, &cfg).unwrap();
        assert_eq!(res.stop_reason, StopReason::Stagnation);
        assert_eq!(res.history.len(), 6);
    }

    #[test]
    fn nan_individuals_are_quarantined() {
        let spec = MlpSpec::new(1, vec![]);
        let samples = vec![FitnessSample { omega: vec![1.0], log_true_fitness: 0.0 }];
        let nan = Chromosome { genes: vec![f64::NAN, 0.0] };
        let cfg = GaConfig { population_size: 4, max_generations: 3, ..Default::default() };
        let res = evolve_with_population(&samples, &spec, &cfg, vec![nan]).unwrap();
        assert_eq!(res.history[0].nan_count, 1);
        assert!(res.best_fitness.is_finite());
        assert!(res.history.iter().all(|s| s.best_chromosome.genes.iter().all(|g| g.is_finite())));
    }

    #[test]
    fn config_validation() {
        assert!(GaConfig::default().validate().is_ok());
        assert!(GaConfig { elitism_count: 0, ..Default::default() }.validate().is_err());
        assert!(GaConfig { elitism_count: 64, ..Default::default() }.validate().is_err());
        assert!(GaConfig { mutation_sigma: 0.0, ..Default::default() }.validate().is_err());
        assert!(GaConfig { crossover_alpha: CrossoverAlpha::Fixed(1.2), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn history_csv() {
        let s = GenerationStats {
            generation: 0,
            best_fitness: -0.5,
            mean_fitness: -1.25,
            best_ever_fitness: -0.5,
            nan_count: 0,
            best_chromosome: Chromosome { genes: vec![] },
        };
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &[s]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "generation,best_fitness,mean_fitness\n0,-0.5,-1.25\n");
    }
}
