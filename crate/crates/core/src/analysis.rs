//! Scaled advantage of repeated poisoned completions, in closed form and by
//! Monte Carlo over Gaussian honest rewards.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::group_advantages;
use crate::seed;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("poisoned ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("group size {0} must be at least 2")]
    BadGroupSize(usize),
    #[error("poisoned count {c} infeasible for group size {g}")]
    BadCount { c: usize, g: usize },
    #[error("need at least {min} trials, got {got}")]
    TooFewTrials { min: usize, got: usize },
    #[error("honest reward spread must be finite and non-negative, got {0}")]
    BadSpread(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub const MIN_TRIALS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationPoint {
    #[serde(rename = "G")]
    pub g: usize,
    pub c: usize,
    pub p: f64,
    pub mu_h: f64,
    pub scaled_advantage: f64,
    pub stderr: f64,
}

/// `p(1 − p) / sqrt(p(1 − p))` for poisoned reward 1 against honest reward 0.
pub fn scaled_advantage_zero_honest(p: f64) -> Result<f64, AnalysisError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(AnalysisError::BadRatio(p));
    }
    Ok((p * (1.0 - p)).sqrt())
}

/// Advantage of one poisoned copy times its share `c/G` of the group,
/// computed from an explicit reward vector.
pub fn scaled_advantage_discrete(c: usize, g: usize) -> Result<f64, AnalysisError> {
    if g < 2 {
        return Err(AnalysisError::BadGroupSize(g));
    }
    if c == 0 || c >= g {
        return Err(AnalysisError::BadCount { c, g });
    }
    let mut rewards = vec![0.0; g];
    rewards[..c].iter_mut().for_each(|r| *r = 1.0);
    let adv = group_advantages(&rewards).expect("g >= 2");
    Ok(adv[0] * c as f64 / g as f64)
}

/// Every feasible `c = 1..G−1` for each group size, with zero honest reward.
pub fn amplification_curve(
    group_sizes: &[usize],
) -> Result<Vec<AmplificationPoint>, AnalysisError> {
    let mut points = Vec::new();
    for &g in group_sizes {
        if g < 2 {
            return Err(AnalysisError::BadGroupSize(g));
        }
        for c in 1..g {
            points.push(AmplificationPoint {
                g,
                c,
                p: c as f64 / g as f64,
                mu_h: 0.0,
                scaled_advantage: scaled_advantage_discrete(c, g)?,
                stderr: 0.0,
            });
        }
    }
    Ok(points)
}

/// Point with the largest scaled advantage for group size `g`; ties go to
/// the smaller `c`.
pub fn argmax(points: &[AmplificationPoint], g: usize) -> Option<AmplificationPoint> {
    points.iter().filter(|p| p.g == g).fold(
        None,
        |best: Option<AmplificationPoint>, p| match best {
            Some(b) if b.scaled_advantage >= p.scaled_advantage => Some(b),
            _ => Some(*p),
        },
    )
}

/// How the second parameter of `N(μ_h, s)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GaussianParam {
    #[default]
    Std,
    Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStudy {
    pub group_size: usize,
    pub spread: f64,
    pub param: GaussianParam,
    /// Clamp honest rewards into [0, 1].
    pub clamp: bool,
    pub trials: usize,
    pub seed: u64,
}

impl Default for GaussianStudy {
    fn default() -> Self {
        Self {
            group_size: 12,
            spread: 0.25,
            param: GaussianParam::Std,
            clamp: true,
            trials: 100_000,
            seed: 0,
        }
    }
}

impl GaussianStudy {
    pub fn std_dev(&self) -> f64 {
        match self.param {
            GaussianParam::Std => self.spread,
            GaussianParam::Var => self.spread.sqrt(),
        }
    }
}

/// Monte Carlo mean and standard error of the poisoned scaled advantage, with
/// `G − c` honest rewards drawn from the Gaussian and `c` rewards fixed at 1.
pub fn gaussian_honest_curve(
    mu_values: &[f64],
    counts: &[usize],
    study: &GaussianStudy,
) -> Result<Vec<AmplificationPoint>, AnalysisError> {
    let g = study.group_size;
    if g < 2 {
        return Err(AnalysisError::BadGroupSize(g));
    }
    if study.trials < MIN_TRIALS {
        return Err(AnalysisError::TooFewTrials {
            min: MIN_TRIALS,
            got: study.trials,
        });
    }
    let sd = study.std_dev();
    if !(sd.is_finite() && sd >= 0.0) {
        return Err(AnalysisError::BadSpread(study.spread));
    }
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c >= g) {
        return Err(AnalysisError::BadCount { c, g });
    }
    let cells: Vec<(usize, f64, usize, usize)> = mu_values
        .iter()
        .enumerate()
        .flat_map(|(mi, &mu)| {
            counts
                .iter()
                .enumerate()
                .map(move |(ci, &c)| (mi, mu, ci, c))
        })
        .collect();
    let points = cells
        .par_iter()
        .map(|&(mi, mu, ci, c)| {
            let mut rng = seed::rng(seed::derive(&[
                seed::stream::ANALYSIS,
                study.seed,
                mi as u64,
                ci as u64,
            ]));
            let normal = Normal::new(mu, sd).expect("finite spread");
            let mut rewards = vec![1.0; g];
            // Welford running moments
            let (mut mean, mut m2) = (0.0, 0.0);
            for t in 0..study.trials {
                for r in rewards[c..].iter_mut() {
                    let x = normal.sample(&mut rng);
                    *r = if study.clamp { x.clamp(0.0, 1.0) } else { x };
                }
                let adv = group_advantages(&rewards).expect("g >= 2");
                let v = adv[0] * c as f64 / g as f64;
                let delta = v - mean;
                mean += delta / (t + 1) as f64;
                m2 += delta * (v - mean);
            }
            let n = study.trials as f64;
            let var = m2 / (n - 1.0);
            AmplificationPoint {
                g,
                c,
                p: c as f64 / g as f64,
                mu_h: mu,
                scaled_advantage: mean,
                stderr: (var / n).sqrt(),
            }
        })
        .collect();
    Ok(points)
}

pub fn write_csv<W: Write>(points: &[AmplificationPoint], out: W) -> Result<(), AnalysisError> {
    let mut writer = csv::Writer::from_writer(out);
    for p in points {
        writer.serialize(p)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<AmplificationPoint>, AnalysisError> {
    let mut reader = csv::Reader::from_reader(input);
    reader
        .deserialize()
        .map(|r| r.map_err(AnalysisError::from))
        .collect()
}
