//! Independent oracles and instance generators shared by the integration
//! tests. Nothing here calls the aggregation, likelihood or network code it
//! is used to check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{DateTime, TimeZone, Utc};
use num::{BigRational, ToPrimitive, Zero};
use rand::Rng;

use micg::hierarchy::{self, AllWeights, Level, WeightSet};
use micg::{HierarchyConfig, IndicatorVector};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub fn observation(cfg: &HierarchyConfig, child: &str, f: impl Fn(usize) -> u8) -> IndicatorVector {
    IndicatorVector {
        child_id: child.to_string(),
        values: cfg.indicators.iter().enumerate().map(|(j, i)| (i.id.clone(), f(j))).collect(),
        observed_at: t0(),
    }
}

pub fn random_observation<R: Rng>(rng: &mut R, cfg: &HierarchyConfig, child: &str) -> IndicatorVector {
    let p: f64 = rng.random();
    let draws: Vec<u8> = (0..cfg.indicators.len()).map(|_| u8::from(rng.random::<f64>() < p)).collect();
    observation(cfg, child, |j| draws[j])
}

fn random_level<R: Rng>(rng: &mut R, cfg: &HierarchyConfig, level: Level) -> WeightSet {
    let g = cfg.grouping(level);
    let raw: BTreeMap<String, f64> =
        g.groups.iter().flat_map(|gr| gr.members.iter()).map(|m| (m.clone(), rng.random_range(0.01..10.0))).collect();
    hierarchy::normalize_weights(&raw, &g).unwrap()
}

pub fn random_weights<R: Rng>(rng: &mut R, cfg: &HierarchyConfig) -> AllWeights {
    AllWeights {
        indicator: random_level(rng, cfg, Level::Indicator),
        construct: random_level(rng, cfg, Level::Construct),
        broad: random_level(rng, cfg, Level::Broad),
        overarching: random_level(rng, cfg, Level::Overarching),
    }
}

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// Scores at every level, computed as exact rational nested sums of the
/// (binary-exact) weights and values, rounded once at the end.
pub struct ExactScores {
    pub construct: BTreeMap<String, f64>,
    pub broad: BTreeMap<String, f64>,
    pub overarching: BTreeMap<String, f64>,
    pub overall: f64,
}

pub fn exact_scores(x: &IndicatorVector, w: &AllWeights, cfg: &HierarchyConfig) -> ExactScores {
    let sum = |members: &[String], weights: &WeightSet, lower: &BTreeMap<String, BigRational>| -> BigRational {
        members.iter().fold(BigRational::zero(), |acc, m| acc + q(weights.weights[m]) * lower[m].clone())
    };
    let xs: BTreeMap<String, BigRational> = x.values.iter().map(|(k, v)| (k.clone(), BigRational::from_integer((*v).into()))).collect();
    let d: BTreeMap<String, BigRational> = cfg.constructs.iter().map(|g| (g.id.clone(), sum(&g.members, &w.indicator, &xs))).collect();
    let g: BTreeMap<String, BigRational> = cfg.broad_dimensions.iter().map(|b| (b.id.clone(), sum(&b.members, &w.construct, &d))).collect();
    let h: BTreeMap<String, BigRational> = cfg.overarching.iter().map(|o| (o.id.clone(), sum(&o.members, &w.broad, &g))).collect();
    let ids: Vec<String> = cfg.overarching.iter().map(|o| o.id.clone()).collect();
    let overall = sum(&ids, &w.overarching, &h);
    let f = |m: BTreeMap<String, BigRational>| m.into_iter().map(|(k, v)| (k, v.to_f64().unwrap())).collect();
    ExactScores { construct: f(d), broad: f(g), overarching: f(h), overall: overall.to_f64().unwrap() }
}

/// Normal density written out directly.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// TrueFitness as the plain product of densities over observed cells and
/// prior terms.
pub fn naive_true_fitness(omega: &[f64], y: &[Vec<Option<f64>>], tau_sq: f64, prior: &[(f64, f64)]) -> f64 {
    let mut p = 1.0;
    for row in y {
        for (cell, &w) in row.iter().zip(omega) {
            if let Some(v) = cell {
                p *= normal_pdf(*v, w, tau_sq);
            }
        }
    }
    for (&w, &(m, v)) in omega.iter().zip(prior) {
        p *= normal_pdf(w, m, v);
    }
    p
}

/// Plain Bernoulli log-likelihood of a child × indicator matrix.
pub fn naive_loglik(x: &[Vec<u8>], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for row in x {
        for (&xi, &wj) in row.iter().zip(w) {
            let p = 1.0 / (1.0 + (-wj).exp());
            s += if xi == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    s
}

/// Closed-form update as printed, evaluated independently of the library.
pub fn hand_posterior(mean: f64, var: f64, col: &[u8]) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-mean).exp());
    let sum_x: f64 = col.iter().map(|&x| x as f64).sum();
    let resid: f64 = col.iter().map(|&x| x as f64 - s).sum();
    ((var * resid + mean * var) / (sum_x + var), 1.0 / (1.0 / var + sum_x))
}
