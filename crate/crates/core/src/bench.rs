//! Ablation harness on the planted synthetic suite: recall against sparsity
//! for trained, sampled and random selectors, distillation losses, and
//! indexer input features.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attention::{attention_recall, full_attention, AttentionInputs};
use crate::datagen::{generate_dataset, PlantSpec, SyntheticSample};
use crate::error::{Error, Result};
use crate::indexer::{
    evaluate, predict, train, IndexerParams, IndexerSample, InputFeatures, LossFn, TrainConfig,
};
use crate::numerics::{Matrix, Rng};
use crate::sparsity::{density_within_pairs, pair_budget, random_at_sparsity, sampling_estimate};
use crate::vsaggregate::VSScores;

pub const SPARSITY_LEVELS: [f64; 4] = [0.50, 0.90, 0.95, 0.99];
pub const LOSS_ABLATION_SPARSITY: f64 = 0.70;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub plant: PlantSpec,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub train: TrainConfig,
    /// Query rows sampled by the estimator baseline are `n / sampling_divisor`.
    pub sampling_divisor: usize,
    pub seeds: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            plant: PlantSpec::default(),
            train_samples: 32,
            eval_samples: 16,
            train: TrainConfig::default(),
            sampling_divisor: 16,
            seeds: 5,
        }
    }
}

/// One evaluation head with its dense attention weights.
pub struct EvalHead {
    pub sample: SyntheticSample,
    pub inputs: AttentionInputs,
    pub weights: Matrix,
}

pub struct Suite {
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<EvalHead>,
}

impl Suite {
    /// Training and evaluation heads drawn from disjoint seed streams.
    pub fn build(plant: &PlantSpec, train_samples: usize, eval_samples: usize, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let train = generate_dataset(
            &PlantSpec {
                seed: root.derive(1).seed(),
                ..plant.clone()
            },
            train_samples,
        )?;
        let eval = generate_dataset(
            &PlantSpec {
                seed: root.derive(2).seed(),
                ..plant.clone()
            },
            eval_samples,
        )?
        .into_par_iter()
        .map(|sample| {
            let inputs = sample.inputs()?;
            let weights = full_attention(&inputs, true)?.a.expect("weights requested");
            Ok(EvalHead {
                sample,
                inputs,
                weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { train, eval })
    }

    pub fn indexer_samples(samples: &[&SyntheticSample], features: InputFeatures) -> Result<Vec<IndexerSample>> {
        samples
            .iter()
            .map(|s| IndexerSample::new(features.build(&s.q, &s.k, &s.v)?, s.target.clone()))
            .collect()
    }

    pub fn train_set(&self, features: InputFeatures) -> Result<Vec<IndexerSample>> {
        Self::indexer_samples(&self.train.iter().collect::<Vec<_>>(), features)
    }

    pub fn eval_set(&self, features: InputFeatures) -> Result<Vec<IndexerSample>> {
        Self::indexer_samples(&self.eval.iter().map(|h| &h.sample).collect::<Vec<_>>(), features)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Recall of the density-greedy pattern built from `scores` at `sparsity`.
pub fn recall_of_scores(weights: &Matrix, scores: &VSScores, sparsity: f64) -> Result<f64> {
    let pattern = density_within_pairs(scores, pair_budget(weights.rows(), sparsity))?.to_pattern();
    attention_recall(weights, &pattern)
}

/// Mean recall of a trained indexer's selections at `sparsity`.
pub fn recall_trained(params: &IndexerParams, suite: &Suite, features: InputFeatures, sparsity: f64, cfg: &TrainConfig) -> Result<f64> {
    let r: Vec<f64> = suite
        .eval
        .iter()
        .map(|h| {
            let x = features.build(&h.sample.q, &h.sample.k, &h.sample.v)?;
            let pred = predict(params, &x, cfg.mapping)?;
            recall_of_scores(&h.weights, &pred, sparsity)
        })
        .collect::<Result<_>>()?;
    Ok(mean(&r))
}

/// Mean recall when the selector is fed exact scores from `rows` sampled queries.
pub fn recall_sampling(suite: &Suite, rows: usize, sparsity: f64, seed: u64) -> Result<f64> {
    let r: Vec<f64> = suite
        .eval
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut rng = Rng::new(seed).derive(i as u64);
            let est = sampling_estimate(&h.inputs, rows, &mut rng)?;
            recall_of_scores(&h.weights, &est, sparsity)
        })
        .collect::<Result<_>>()?;
    Ok(mean(&r))
}

/// Mean recall of random patterns with `draws` draws per head.
pub fn recall_random(weights: &[&Matrix], sparsity: f64, draws: usize, seed: u64) -> Result<f64> {
    let mut r = Vec::with_capacity(weights.len() * draws);
    for (i, a) in weights.iter().enumerate() {
        let mut rng = Rng::new(seed).derive(i as u64);
        for _ in 0..draws {
            let pattern = random_at_sparsity(a.rows(), sparsity, &mut rng).to_pattern();
            r.push(attention_recall(a, &pattern)?);
        }
    }
    Ok(mean(&r))
}

/// Causal attention weights of a head whose queries are all zero.
pub fn uniform_weights(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 })
}

fn train_on(suite: &Suite, features: InputFeatures, cfg: &TrainConfig) -> Result<IndexerParams> {
    Ok(train(&suite.train_set(features)?, cfg)?.params)
}

#[derive(Clone, Debug)]
pub struct SparsityRow {
    pub sparsity: f64,
    pub random: f64,
    pub sampling: f64,
    pub trained: f64,
    /// Random-pattern recall on uniform attention.
    pub random_uniform: f64,
}

pub fn sparsity_ablation(cfg: &BenchConfig, seed: u64) -> Result<Vec<SparsityRow>> {
    let suite = Suite::build(&cfg.plant, cfg.train_samples, cfg.eval_samples, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let params = train_on(&suite, InputFeatures::KV, &train_cfg)?;
    let rows = (cfg.plant.n / cfg.sampling_divisor.max(1)).max(1);
    let weights: Vec<&Matrix> = suite.eval.iter().map(|h| &h.weights).collect();
    let uniform = uniform_weights(cfg.plant.n);
    SPARSITY_LEVELS
        .iter()
        .map(|&s| {
            Ok(SparsityRow {
                sparsity: s,
                random: recall_random(&weights, s, 4, seed ^ 0x5EED)?,
                sampling: recall_sampling(&suite, rows, s, seed ^ 0x5A3D)?,
                trained: recall_trained(&params, &suite, InputFeatures::KV, s, &train_cfg)?,
                random_uniform: recall_random(&[&uniform], s, 32, seed ^ 0x0F0F)?,
            })
        })
        .collect()
}

pub fn sparsity_table(rows: &[SparsityRow]) -> String {
    let mut out = String::from("method");
    for r in rows {
        write!(out, "\t{:.0}%", 100.0 * r.sparsity).unwrap();
    }
    out.push('\n');
    let mut line = |name: &str, f: &dyn Fn(&SparsityRow) -> f64| {
        out.push_str(name);
        for r in rows {
            write!(out, "\t{:.4}", f(r)).unwrap();
        }
        out.push('\n');
    };
    line("Random", &|r| r.random);
    line("Sampling", &|r| r.sampling);
    line("Trained", &|r| r.trained);
    line("Random(uniform)", &|r| r.random_uniform);
    line("Retention", &|r| 1.0 - r.sparsity);
    out
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn median(&self) -> f64 {
        median(&self.per_seed)
    }
}

pub const LOSS_VARIANTS: [LossFn; 4] = [
    LossFn::Kl { eps: crate::indexer::DEFAULT_EPS },
    LossFn::Mse,
    LossFn::Msle,
    LossFn::Cosine,
];

/// Recall at the fixed sparsity point for each training loss, per seed.
pub fn loss_ablation(cfg: &BenchConfig) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = LOSS_VARIANTS
        .iter()
        .map(|l| AblationRow {
            name: l.name(),
            per_seed: Vec::new(),
        })
        .collect();
    for seed in 0..cfg.seeds as u64 {
        let suite = Suite::build(&cfg.plant, cfg.train_samples, cfg.eval_samples, seed)?;
        let data = suite.train_set(InputFeatures::KV)?;
        for (row, &loss) in rows.iter_mut().zip(&LOSS_VARIANTS) {
            let tc = TrainConfig {
                seed,
                loss,
                ..cfg.train.clone()
            };
            let params = train(&data, &tc)?.params;
            row.per_seed
                .push(recall_trained(&params, &suite, InputFeatures::KV, LOSS_ABLATION_SPARSITY, &tc)?);
        }
    }
    Ok(rows)
}

/// Held-out distillation loss for each input combination, per seed. Hidden
/// widths follow [`InputFeatures::normalized_hidden`].
pub fn input_ablation(cfg: &BenchConfig) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = InputFeatures::ALL
        .iter()
        .map(|f| AblationRow {
            name: f.name(),
            per_seed: Vec::new(),
        })
        .collect();
    for seed in 0..cfg.seeds as u64 {
        let suite = Suite::build(&cfg.plant, cfg.train_samples, cfg.eval_samples, seed)?;
        for (row, &features) in rows.iter_mut().zip(&InputFeatures::ALL) {
            let tc = TrainConfig {
                seed,
                d_h: features.normalized_hidden(cfg.train.d_h),
                ..cfg.train.clone()
            };
            let params = train(&suite.train_set(features)?, &tc)?.params;
            row.per_seed
                .push(evaluate(&params, &suite.eval_set(features)?, LossFn::default(), tc.mapping)?);
        }
    }
    Ok(rows)
}

pub fn ablation_table(header: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("{header}\tmedian");
    let seeds = rows.first().map_or(0, |r| r.per_seed.len());
    for s in 0..seeds {
        write!(out, "\tseed{s}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{}\t{:.4}", r.name, r.median()).unwrap();
        for v in &r.per_seed {
            write!(out, "\t{v:.4}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Sparsity,
    Loss,
    Inputs,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsity" => Ok(Self::Sparsity),
            "loss" => Ok(Self::Loss),
            "inputs" => Ok(Self::Inputs),
            _ => Err(Error::config(format!(
                "unknown ablation {s:?} (expected sparsity, loss or inputs)"
            ))),
        }
    }
}

pub fn run_ablation(which: Ablation, cfg: &BenchConfig, seed: u64) -> Result<String> {
    match which {
        Ablation::Sparsity => Ok(sparsity_table(&sparsity_ablation(cfg, seed)?)),
        Ablation::Loss => Ok(ablation_table("loss", &loss_ablation(cfg)?)),
        Ablation::Inputs => Ok(ablation_table("inputs", &input_ablation(cfg)?)),
    }
}
