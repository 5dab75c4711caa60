//! Central finite-difference check of the full training objective.
//!
//! The noise draw and the nearest-prototype assignments are taken once and
//! held fixed, so the objective is a smooth function of the parameters and
//! the tape gradient can be compared entry by entry.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::encoders::{Backbone, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::trainer::{batch_objective, BoundModel, MistModel, ParamGroup, RunSeeds, StepNoise, StochasticMode, TrainConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub threshold: f64,
    /// Denominator floor of the relative error, guarding entries whose true
    /// gradient is zero.
    pub floor: f64,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of one group.
    pub corrupt: Option<ParamGroup>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

/// Problem instance checked by default: two classes, two prompts each, deep
/// prompting over both blocks.
pub struct TinyProblem {
    pub backbone: Backbone,
    pub model: MistModel,
    pub config: TrainConfig,
    pub batch: Vec<(Vec<f64>, usize)>,
}

impl TinyProblem {
    pub fn new(seed: u64, stochastic_deep: bool) -> Result<Self> {
        let encoder = EncoderConfig {
            token_dim: 6,
            num_blocks: 2,
            prompt_depth: 2,
            num_patches: 2,
            vocab_size: 24,
            weight_seed: seed,
        };
        let config = TrainConfig {
            prompt_length: 2,
            prompt_count: 2,
            temperature: 0.5,
            stochastic: StochasticMode::Mist,
            stochastic_deep,
            seeds: RunSeeds::from_run(seed),
            encoder,
            ..TrainConfig::default()
        };
        let feature_dim = 3;
        let backbone = Backbone::new(config.encoder.clone(), feature_dim)?;
        let mut model = MistModel::new(&backbone, &config, &[vec![16], vec![17]])?;

        // Spread the parameters out so no gradient entry is accidentally
        // tiny; frozen means keep their anchor values.
        let mut r = rng::stream(rng::derive_seed(seed, "gradcheck/params"));
        let slots = model.params().into_iter().map(|(s, _)| s).collect::<Vec<_>>();
        for (slot, t) in slots.iter().zip(model.params_mut()) {
            let (rows, cols) = t.shape();
            match slot.group {
                ParamGroup::FrozenMeans => {}
                ParamGroup::LogScales => {
                    let jitter = rng::normal_tensor(&mut r, rows, cols, 0.2);
                    *t = jitter.map(|j| (0.3f64).ln() + j);
                }
                ParamGroup::Projections => {
                    let jitter = rng::normal_tensor(&mut r, rows, cols, 0.3);
                    *t = t.zip_map(&jitter, |a, b| a + b);
                }
                ParamGroup::Means | ParamGroup::DeepPrompts => {
                    *t = rng::normal_tensor(&mut r, rows, cols, 0.5);
                }
            }
        }
        let batch = (0..3)
            .map(|i| (rng::normal_tensor(&mut r, 1, feature_dim, 1.0).into_data(), i % 2))
            .collect();
        Ok(Self {
            backbone,
            model,
            config,
            batch,
        })
    }
}

fn objective(
    problem: &TinyProblem,
    model: &MistModel,
    noise: &StepNoise,
    assignments: Option<&[usize]>,
) -> Result<(f64, Vec<usize>, Tape, BoundModel, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model);
    let batch: Vec<(&[f64], usize)> = problem.batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let obj = batch_objective(
        &mut tape,
        &problem.backbone,
        model,
        &bound,
        noise,
        &batch,
        &problem.config,
        assignments,
    )?;
    Ok((obj.record.total, obj.assignments, tape, bound, obj.total))
}

/// Compares the tape gradient of every learnable entry with central
/// differences. Each learnable group appears exactly once in the report.
pub fn check(problem: &TinyProblem, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut noise_rng = rng::stream(rng::derive_seed(options.seed, "gradcheck/eps"));
    let noise = problem.model.draw_noise(Some(&mut noise_rng));
    let (_, assignments, tape, bound, total) = objective(problem, &problem.model, &noise, None)?;
    let mut grads = tape.backward(total)?;
    drop(tape);

    let mut groups: BTreeMap<ParamGroup, GroupReport> = BTreeMap::new();
    for (idx, (slot, var)) in bound.slots.iter().zip(&bound.vars).enumerate() {
        if !slot.learnable {
            continue;
        }
        let mut analytic: Tensor = grads
            .take(*var)
            .ok_or_else(|| Error::Contract(format!("no gradient for {}", slot.name)))?;
        if options.corrupt == Some(slot.group) {
            analytic = analytic.map(|g| g * 1.01 + 1e-3);
        }
        let report = groups.entry(slot.group).or_insert_with(|| GroupReport {
            group: slot.group,
            entries: 0,
            max_rel_error: 0.0,
            worst_param: slot.name.clone(),
            passed: true,
        });
        for k in 0..analytic.data().len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = problem.model.clone();
                shifted.params_mut()[idx].data_mut()[k] += delta;
                Ok(objective(problem, &shifted, &noise, Some(&assignments))?.0)
            };
            let numeric = (eval(options.step)? - eval(-options.step)?) / (2.0 * options.step);
            let err = relative_error(analytic.data()[k], numeric, options.floor);
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = slot.name.clone();
            }
        }
    }
    let groups = groups
        .into_values()
        .map(|mut g| {
            g.passed = g.max_rel_error < options.threshold;
            g
        })
        .collect();
    Ok(GradCheckReport {
        groups,
        threshold: options.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
    }

    #[test]
    fn tiny_model_passes_and_covers_groups() {
        for deep in [false, true] {
            let problem = TinyProblem::new(3, deep).unwrap();
            let report = check(&problem, &GradCheckOptions::default()).unwrap();
            let groups: Vec<ParamGroup> = report.groups.iter().map(|g| g.group).collect();
            assert_eq!(
                groups,
                [ParamGroup::Means, ParamGroup::LogScales, ParamGroup::Projections, ParamGroup::DeepPrompts]
            );
            assert!(report.passed(), "{report:#?}");
        }
    }

    #[test]
    fn corrupted_group_is_named() {
        let problem = TinyProblem::new(4, false).unwrap();
        let options = GradCheckOptions {
            corrupt: Some(ParamGroup::Projections),
            ..GradCheckOptions::default()
        };
        let report = check(&problem, &options).unwrap();
        let failed: Vec<ParamGroup> = report.failures().map(|g| g.group).collect();
        assert_eq!(failed, [ParamGroup::Projections]);
    }
}
