//! Single-seed experiment runs shared by `train`, `sweep` and the
//! acceptance suite.

use std::time::Instant;

use mist_core::datagen::{sample_k_shot, LabeledFeatureSet, SupportSet};
use mist_core::encoders::Backbone;
use mist_core::trainer::{evaluate, LossRecord, Metrics, MistModel, RunSeeds, TrainConfig, Trainer};
use mist_core::Result;

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub config: TrainConfig,
    pub support: SupportSet,
    pub model: MistModel,
    pub history: Vec<LossRecord>,
    pub metrics: Metrics,
    pub wall_clock_ms: u128,
}

/// `base` with the data, init and noise seeds of run seed `seed`.
pub fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seeds: RunSeeds::from_run(seed),
        ..base.clone()
    }
}

/// Trains on `support` and evaluates on `test`.
pub fn train_and_evaluate(
    backbone: &Backbone,
    support: SupportSet,
    test: &LabeledFeatureSet,
    config: TrainConfig,
    seed: u64,
) -> Result<SeedRun> {
    let start = Instant::now();
    let model = MistModel::new(backbone, &config, support.set.class_tokens())?;
    let mut trainer = Trainer::new(backbone, model, config.clone())?;
    let history = trainer.fit(&support.set)?;
    let model = trainer.into_model();
    let metrics = evaluate(test, backbone, &model, &config)?;
    Ok(SeedRun {
        seed,
        config,
        support,
        model,
        history,
        metrics,
        wall_clock_ms: start.elapsed().as_millis(),
    })
}

/// Draws a `shots`-per-class support set from `train` with the run's data
/// seed, then trains and evaluates.
pub fn run_seed(
    backbone: &Backbone,
    train: &LabeledFeatureSet,
    test: &LabeledFeatureSet,
    base: &TrainConfig,
    shots: usize,
    seed: u64,
) -> Result<SeedRun> {
    let config = seeded(base, seed);
    let support = sample_k_shot(train, shots, config.seeds.data)?;
    train_and_evaluate(backbone, support, test, config, seed)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
