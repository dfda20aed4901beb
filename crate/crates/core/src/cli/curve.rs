//! Metric-versus-training-fraction protocol: every (fraction, mode) cell is
//! trained on several re-sampled subsets and scored on the test split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{subset_fraction, DatasetSplit};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::TrainMode;
use crate::metrics::{evaluate, EvalOptions, SentenceMatch};
use crate::trainer::{train, TrainConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRun {
    pub seed_index: usize,
    pub subset_seed: u64,
    pub train_seed: u64,
    pub train_size: usize,
    pub best_epoch: usize,
    pub intent_accuracy: f64,
    pub slot_f1: f64,
    pub sentence_accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub intent_accuracy: f64,
    pub slot_f1: f64,
    pub sentence_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub fraction: f64,
    pub mode: TrainMode,
    pub runs: Vec<CurveRun>,
    pub mean: MetricSummary,
    /// Sample standard deviation (n − 1 denominator; 0 for a single run).
    pub std: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub fractions: Vec<f64>,
    pub seeds_per_fraction: usize,
    pub modes: Vec<TrainMode>,
    pub cells: Vec<CurveCell>,
}

impl LearningCurve {
    pub fn cell(&self, fraction: f64, mode: TrainMode) -> Option<&CurveCell> {
        self.cells.iter().find(|c| c.fraction == fraction && c.mode == mode)
    }
}

#[derive(Clone, Debug)]
pub struct CurveSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fractions: Vec<f64>,
    pub seeds_per_fraction: usize,
    pub modes: Vec<TrainMode>,
    pub lowercase: bool,
    pub sentence_match: SentenceMatch,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Subset seed for (fraction, seed index); shared by all modes so that the
/// modes are compared on identical subsets.
pub fn subset_seed(base: u64, fraction: f64, seed_index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ fraction.to_bits()) ^ seed_index as u64)
}

/// Training seed for one cell run.
pub fn train_seed(base: u64, fraction: f64, seed_index: usize, mode: TrainMode) -> u64 {
    let code = TrainMode::ALL.iter().position(|&m| m == mode).expect("known mode") as u64;
    splitmix64(subset_seed(base, fraction, seed_index) ^ splitmix64(code + 1))
}

fn summarize(runs: &[CurveRun]) -> (MetricSummary, MetricSummary) {
    let n = runs.len() as f64;
    let pick = |f: fn(&CurveRun) -> f64| -> (f64, f64) {
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let std = if runs.len() > 1 {
            (runs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let (im, is) = pick(|r| r.intent_accuracy);
    let (sm, ss) = pick(|r| r.slot_f1);
    let (em, es) = pick(|r| r.sentence_accuracy);
    (
        MetricSummary {
            intent_accuracy: im,
            slot_f1: sm,
            sentence_accuracy: em,
        },
        MetricSummary {
            intent_accuracy: is,
            slot_f1: ss,
            sentence_accuracy: es,
        },
    )
}

/// Runs every (fraction, mode, seed) cell on a pool of `threads` workers.
/// The result does not depend on `threads`.
pub fn learning_curve(data: &DatasetSplit, spec: &CurveSpec, threads: usize) -> Result<LearningCurve> {
    if spec.seeds_per_fraction == 0 || spec.fractions.is_empty() || spec.modes.is_empty() {
        return Err(Error::config("learning curve needs fractions, modes and at least one seed"));
    }
    if data.test.is_empty() {
        return Err(Error::input("learning curve needs a nonempty test split"));
    }
    let mut tasks = Vec::new();
    for &fraction in &spec.fractions {
        for &mode in &spec.modes {
            for seed_index in 0..spec.seeds_per_fraction {
                tasks.push((fraction, mode, seed_index));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let base = spec.train.seed;
    let runs: Vec<Result<CurveRun>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(fraction, mode, seed_index)| {
                let s_seed = subset_seed(base, fraction, seed_index);
                let t_seed = train_seed(base, fraction, seed_index, mode);
                let subset = subset_fraction(&data.train, fraction, s_seed)?;
                let config = TrainConfig {
                    seed: t_seed,
                    ..spec.train.clone()
                };
                let options = TrainOptions {
                    mode,
                    lowercase: spec.lowercase,
                    init_from: None,
                    sentence_match: spec.sentence_match,
                };
                let outcome = train(&subset, &data.valid, &spec.model, &config, &options)?;
                let eval = EvalOptions {
                    sentence_match: spec.sentence_match,
                    per_language: false,
                };
                let (report, _) = evaluate(&outcome.archive, &data.test, eval)?;
                Ok(CurveRun {
                    seed_index,
                    subset_seed: s_seed,
                    train_seed: t_seed,
                    train_size: subset.len(),
                    best_epoch: outcome.best_epoch,
                    intent_accuracy: report.intent_accuracy,
                    slot_f1: report.slot_f1,
                    sentence_accuracy: report.sentence_accuracy,
                })
            })
            .collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let cells = runs
        .chunks(spec.seeds_per_fraction)
        .zip(tasks.chunks(spec.seeds_per_fraction))
        .map(|(runs, tasks)| {
            let (mean, std) = summarize(runs);
            CurveCell {
                fraction: tasks[0].0,
                mode: tasks[0].1,
                runs: runs.to_vec(),
                mean,
                std,
            }
        })
        .collect();
    Ok(LearningCurve {
        fractions: spec.fractions.clone(),
        seeds_per_fraction: spec.seeds_per_fraction,
        modes: spec.modes.clone(),
        cells,
    })
}
