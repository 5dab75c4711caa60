//! Multiple stochastic prompt training and max-logit inference.
//!
//! Each class owns `P` prompt distributions. Every iteration draws one noise
//! block per prompt, encodes all `P * C` text prototypes, and encodes each
//! image of the batch with visual prompts projected from the mean text
//! prompt block of every depth. Each image is assigned to its nearest
//! same-class prototype (no gradient through the assignment), then the
//! assignment cross-entropy and the centroid alignment term are minimized
//! with plain SGD.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, NORM_EPS};
use crate::datagen::LabeledFeatureSet;
use crate::encoders::{project_prompts, Backbone, EncoderConfig, Projection};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::stochastic::{
    anchor_tokens, read_checkpoint, reparameterize, write_checkpoint, PromptDistribution, PromptNoise, SampleMode,
};

/// Sampling regime of the prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StochasticMode {
    /// Point-estimate prompts, never sampled.
    None,
    /// Every prompt sampled around the frozen anchor mean.
    FixedMean,
    /// Every prompt sampled from a fully learnable Gaussian.
    Full,
    /// Prompt 0 fixed-mean, all others fully learnable.
    Mist,
}

impl StochasticMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StochasticMode::None => "none",
            StochasticMode::FixedMean => "fixed-mean",
            StochasticMode::Full => "full",
            StochasticMode::Mist => "mist",
        }
    }

    pub fn kind(self, prompt: usize) -> PromptKind {
        match self {
            StochasticMode::None => PromptKind::Deterministic,
            StochasticMode::FixedMean => PromptKind::FixedMean,
            StochasticMode::Full => PromptKind::Full,
            StochasticMode::Mist if prompt == 0 => PromptKind::FixedMean,
            StochasticMode::Mist => PromptKind::Full,
        }
    }
}

impl std::str::FromStr for StochasticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "fixed-mean" => Ok(Self::FixedMean),
            "full" => Ok(Self::Full),
            "mist" => Ok(Self::Mist),
            other => Err(Error::Config(format!("unknown stochastic mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Deterministic,
    FixedMean,
    Full,
}

impl PromptKind {
    pub fn is_sampled(self) -> bool {
        self != PromptKind::Deterministic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub init: u64,
    pub eps: u64,
}

impl RunSeeds {
    /// Independent data, init and noise streams derived from one run seed.
    pub fn from_run(seed: u64) -> Self {
        Self {
            data: rng::derive_seed(seed, "data"),
            init: rng::derive_seed(seed, "init"),
            eps: rng::derive_seed(seed, "eps"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Temperature of the assignment cross-entropy.
    pub temperature: f64,
    pub prompt_length: usize,
    pub prompt_count: usize,
    pub reg_weight: f64,
    /// 0 predicts with distribution means, otherwise similarities are
    /// averaged over this many draws.
    pub infer_samples: usize,
    pub stochastic: StochasticMode,
    pub stochastic_deep: bool,
    pub seeds: RunSeeds,
    /// Frozen encoder shape, prompt depth and weight seed.
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0035,
            epochs: 150,
            batch_size: 4,
            temperature: 1.0,
            prompt_length: 2,
            prompt_count: 2,
            reg_weight: 1.0,
            infer_samples: 0,
            stochastic: StochasticMode::Mist,
            stochastic_deep: false,
            seeds: RunSeeds::from_run(0),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.prompt_length == 0 || self.prompt_count == 0 {
            return Err(Error::Config(
                "prompt length and prompt count must be at least 1".into(),
            ));
        }
        if !self.reg_weight.is_finite() {
            return Err(Error::Config("regularization weight must be finite".into()));
        }
        self.encoder.validate()
    }
}

/// Prompts of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptSet {
    pub class_id: usize,
    pub prompts: Vec<PromptDistribution>,
    pub classname_tokens: Vec<u32>,
    /// Deterministic deep prompts for depths `1..D`, shared by the class's
    /// prompts. Empty when deep prompts are stochastic.
    pub deep: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Means of distributions whose mean is not pinned.
    Means,
    /// Means pinned to the anchor embedding; never updated.
    FrozenMeans,
    LogScales,
    Projections,
    DeepPrompts,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Means => "means",
            ParamGroup::FrozenMeans => "frozen-means",
            ParamGroup::LogScales => "log-scales",
            ParamGroup::Projections => "projections",
            ParamGroup::DeepPrompts => "deep-prompts",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub group: ParamGroup,
    pub learnable: bool,
}

/// All prompt-side parameters of a model. The frozen encoders live apart in
/// a [`Backbone`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MistModel {
    pub classes: Vec<ClassPromptSet>,
    pub projection: Projection,
    pub stochastic: StochasticMode,
    pub stochastic_deep: bool,
}

impl MistModel {
    pub fn new(backbone: &Backbone, config: &TrainConfig, class_tokens: &[Vec<u32>]) -> Result<Self> {
        config.validate()?;
        if backbone.config() != &config.encoder {
            return Err(Error::Config(
                "backbone was built from a different encoder configuration".into(),
            ));
        }
        if class_tokens.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        let m = config.prompt_length;
        let d = config.encoder.token_dim;
        let deep_count = config.encoder.prompt_depth - 1;
        let init = config.seeds.init;
        let anchor = anchor_tokens(m);

        let mut classes = Vec::with_capacity(class_tokens.len());
        for (c, tokens) in class_tokens.iter().enumerate() {
            // Validate classname ids up front.
            backbone.text.embed(tokens)?;
            let mut prompts = Vec::with_capacity(config.prompt_count);
            for i in 0..config.prompt_count {
                let mut dist = match config.stochastic.kind(i) {
                    PromptKind::FixedMean => PromptDistribution::fixed_mean(&anchor, m, &backbone.text)?,
                    PromptKind::Full | PromptKind::Deterministic => PromptDistribution::learnable(
                        m,
                        d,
                        rng::derive_seed(init, &format!("mean/{c}/{i}")),
                    ),
                };
                if config.stochastic_deep {
                    dist = dist.with_stochastic_deep(
                        deep_count,
                        rng::derive_seed(init, &format!("deep/{c}/{i}")),
                    );
                }
                prompts.push(dist);
            }
            let deep = if config.stochastic_deep {
                Vec::new()
            } else {
                let mut r = rng::stream(rng::derive_seed(init, &format!("deep/{c}")));
                (0..deep_count)
                    .map(|_| rng::normal_tensor(&mut r, m, d, crate::stochastic::INIT_MEAN_STD))
                    .collect()
            };
            classes.push(ClassPromptSet {
                class_id: c,
                prompts,
                classname_tokens: tokens.clone(),
                deep,
            });
        }
        Ok(Self {
            classes,
            projection: Projection::identity(config.encoder.prompt_depth, d),
            stochastic: config.stochastic,
            stochastic_deep: config.stochastic_deep,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn prompt_count(&self) -> usize {
        self.classes[0].prompts.len()
    }

    pub fn depth(&self) -> usize {
        self.projection.matrices.len()
    }

    fn kind(&self, prompt: usize) -> PromptKind {
        self.stochastic.kind(prompt)
    }

    /// Every parameter tensor with its slot, in the canonical order: per
    /// class, per prompt mean, log-scale and stochastic deep blocks; then the
    /// class deep prompts; finally the projections.
    pub fn params(&self) -> Vec<(ParamSlot, &Tensor)> {
        let mut out = Vec::new();
        for (c, class) in self.classes.iter().enumerate() {
            for (i, p) in class.prompts.iter().enumerate() {
                let sampled = self.kind(i).is_sampled();
                let (group, learnable) = if p.mean_frozen {
                    (ParamGroup::FrozenMeans, false)
                } else {
                    (ParamGroup::Means, true)
                };
                out.push((slot(format!("c{c}.p{i}.mean"), group, learnable), &p.mean));
                out.push((
                    slot(format!("c{c}.p{i}.log_scale"), ParamGroup::LogScales, sampled),
                    &p.log_scale,
                ));
                for (b, (mean, ls)) in p.deep_means.iter().zip(&p.deep_log_scales).enumerate() {
                    let depth = b + 1;
                    out.push((
                        slot(format!("c{c}.p{i}.deep{depth}.mean"), ParamGroup::DeepPrompts, true),
                        mean,
                    ));
                    out.push((
                        slot(format!("c{c}.p{i}.deep{depth}.log_scale"), ParamGroup::LogScales, sampled),
                        ls,
                    ));
                }
            }
            for (b, t) in class.deep.iter().enumerate() {
                out.push((
                    slot(format!("c{c}.deep{}", b + 1), ParamGroup::DeepPrompts, true),
                    t,
                ));
            }
        }
        for (b, t) in self.projection.matrices.iter().enumerate() {
            out.push((slot(format!("proj{b}"), ParamGroup::Projections, true), t));
        }
        out
    }

    /// Mutable views in the same order as [`MistModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for class in &mut self.classes {
            for p in &mut class.prompts {
                out.push(&mut p.mean);
                out.push(&mut p.log_scale);
                for (mean, ls) in p.deep_means.iter_mut().zip(p.deep_log_scales.iter_mut()) {
                    out.push(mean);
                    out.push(ls);
                }
            }
            out.extend(class.deep.iter_mut());
        }
        out.extend(self.projection.matrices.iter_mut());
        out
    }

    /// Draws the per-prompt noise of one iteration in class-major order.
    /// Deterministic prompts draw nothing.
    pub fn draw_noise(&self, rng: Option<&mut Stream>) -> StepNoise {
        let mut rng = rng;
        let prompts = self
            .classes
            .iter()
            .map(|class| {
                class
                    .prompts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| match (&mut rng, self.kind(i).is_sampled()) {
                        (Some(r), true) => Some(p.draw_noise(&mut SampleMode::Sample(&mut **r))),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        StepNoise { prompts }
    }
}

fn slot(name: String, group: ParamGroup, learnable: bool) -> ParamSlot {
    ParamSlot {
        name,
        group,
        learnable,
    }
}

/// Noise for every prompt of one iteration; `None` means the distribution
/// mean is used.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub prompts: Vec<Vec<Option<PromptNoise>>>,
}

/// Model parameters bound as tape leaves, in [`MistModel::params`] order.
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub slots: Vec<ParamSlot>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, model: &MistModel) -> Self {
        let mut vars = Vec::new();
        let mut slots = Vec::new();
        for (s, t) in model.params() {
            let v = if s.learnable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            slots.push(s);
        }
        Self { vars, slots }
    }
}

/// Text prototypes `[class][prompt]` and the visual prompts of one forward.
pub struct PrototypeGraph {
    pub text: Vec<Vec<Var>>,
    pub visual: Vec<Var>,
}

/// Builds all `P * C` text prototypes and the shared visual prompts.
pub fn forward_prototypes(
    tape: &mut Tape,
    backbone: &Backbone,
    model: &MistModel,
    bound: &BoundModel,
    noise: &StepNoise,
) -> Result<PrototypeGraph> {
    let depth = model.depth();
    let mut cursor = 0usize;
    let mut next = || {
        let v = bound.vars[cursor];
        cursor += 1;
        v
    };

    let mut text = Vec::with_capacity(model.num_classes());
    let mut depth_sums: Vec<Option<Var>> = vec![None; depth];
    let mut blocks_seen = 0usize;
    let mut class_blocks: Vec<Vec<Vec<Var>>> = Vec::with_capacity(model.num_classes());

    for (c, class) in model.classes.iter().enumerate() {
        let mut per_prompt = Vec::with_capacity(class.prompts.len());
        for (i, p) in class.prompts.iter().enumerate() {
            let mean = next();
            let log_scale = next();
            let draw = noise.prompts[c][i].as_ref();
            let theta0 = match draw {
                Some(n) => reparameterize(tape, mean, log_scale, &n.eps)?,
                None => mean,
            };
            let mut blocks = vec![theta0];
            for b in 0..p.deep_means.len() {
                let dm = next();
                let dl = next();
                let theta = match draw {
                    Some(n) => reparameterize(tape, dm, dl, &n.deep[b])?,
                    None => dm,
                };
                blocks.push(theta);
            }
            per_prompt.push(blocks);
        }
        let class_deep: Vec<Var> = class.deep.iter().map(|_| next()).collect();
        for blocks in &mut per_prompt {
            blocks.extend(class_deep.iter().copied());
        }
        class_blocks.push(per_prompt);
    }
    let proj: Vec<Var> = (0..depth).map(|_| next()).collect();

    for (class, per_prompt) in model.classes.iter().zip(&class_blocks) {
        let mut protos = Vec::with_capacity(per_prompt.len());
        for blocks in per_prompt {
            protos.push(backbone.text.encode(tape, &class.classname_tokens, blocks)?);
            for (b, &block) in blocks.iter().enumerate().take(depth) {
                depth_sums[b] = Some(match depth_sums[b] {
                    Some(acc) => tape.add(acc, block)?,
                    None => block,
                });
            }
            blocks_seen += 1;
        }
        text.push(protos);
    }

    let mut mean_blocks = Vec::with_capacity(depth);
    for sum in depth_sums {
        let sum = sum.ok_or_else(|| Error::Contract("missing prompt block".into()))?;
        mean_blocks.push(tape.scale(sum, 1.0 / blocks_seen as f64)?);
    }
    let visual = project_prompts(tape, &mean_blocks, &proj)?;
    Ok(PrototypeGraph { text, visual })
}

/// Index of the most similar prototype; ties go to the lowest index.
pub fn assign(similarities: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in similarities.iter().enumerate() {
        if s > similarities[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(sims / temperature)[target]` over every prototype, where
/// `sims` is the 1 x N row of cosine similarities.
pub fn loss_mp_from_sims(tape: &mut Tape, sims: Var, target: usize, temperature: f64) -> Result<Var> {
    let logp = tape.row_log_softmax(sims, temperature)?;
    let picked = tape.select(logp, 0, target)?;
    tape.scale(picked, -1.0)
}

/// Row of cosine similarities between `image` and every prototype.
pub fn similarity_row(tape: &mut Tape, image: Var, prototypes: &[Var]) -> Result<Var> {
    let sims = prototypes
        .iter()
        .map(|&p| tape.cosine_sim(p, image))
        .collect::<Result<Vec<_>>>()?;
    let col = tape.concat_rows(&sims)?;
    tape.transpose(col)
}

/// Assignment loss for one image; `target` indexes the flattened
/// class-major prototype list.
pub fn loss_mp(
    tape: &mut Tape,
    image: Var,
    prototypes: &[Var],
    target: usize,
    temperature: f64,
) -> Result<Var> {
    let sims = similarity_row(tape, image, prototypes)?;
    loss_mp_from_sims(tape, sims, target, temperature)
}

/// `-cos(image, mean of the class prototypes)`.
pub fn loss_reg(tape: &mut Tape, image: Var, class_prototypes: &[Var], class: usize) -> Result<Var> {
    let mut sum = class_prototypes[0];
    for &p in &class_prototypes[1..] {
        sum = tape.add(sum, p)?;
    }
    let centroid = tape.scale(sum, 1.0 / class_prototypes.len() as f64)?;
    if tape.value(centroid).norm() < NORM_EPS {
        return Err(Error::DegenerateCentroid { class });
    }
    let cos = tape.cosine_sim(image, centroid)?;
    tape.scale(cos, -1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub mp: f64,
    pub reg: f64,
    pub total: f64,
}

/// Graph of one batch objective.
pub struct BatchObjective {
    pub total: Var,
    pub record: LossRecord,
    pub assignments: Vec<usize>,
}

/// Mean over the batch of `L_mp + reg_weight * L_reg`.
///
/// With `fixed_assignments` the nearest-prototype step is skipped and the
/// given indices are used instead.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    tape: &mut Tape,
    backbone: &Backbone,
    model: &MistModel,
    bound: &BoundModel,
    noise: &StepNoise,
    batch: &[(&[f64], usize)],
    config: &TrainConfig,
    fixed_assignments: Option<&[usize]>,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let graph = forward_prototypes(tape, backbone, model, bound, noise)?;
    let p = model.prompt_count();
    let flat: Vec<Var> = graph.text.iter().flatten().copied().collect();

    let mut terms = Vec::with_capacity(batch.len());
    let mut assignments = Vec::with_capacity(batch.len());
    let (mut mp_sum, mut reg_sum) = (0.0, 0.0);
    for (n, &(x, label)) in batch.iter().enumerate() {
        if label >= model.num_classes() {
            return Err(Error::Input(format!("label {label} has no prompts")));
        }
        let image = backbone.image.encode(tape, x, &graph.visual)?;
        let sims = similarity_row(tape, image, &flat)?;
        let own = &tape.value(sims).data()[label * p..(label + 1) * p];
        let best = match fixed_assignments {
            Some(fixed) => fixed[n],
            None => assign(own),
        };
        assignments.push(best);
        let mp = loss_mp_from_sims(tape, sims, label * p + best, config.temperature)?;
        let reg = loss_reg(tape, image, &graph.text[label], label)?;
        mp_sum += tape.value(mp).get(0, 0);
        reg_sum += tape.value(reg).get(0, 0);
        let weighted = tape.scale(reg, config.reg_weight)?;
        terms.push(tape.add(mp, weighted)?);
    }
    let stacked = tape.concat_rows(&terms)?;
    let total = tape.mean_rows(stacked)?;
    let n = batch.len() as f64;
    let record = LossRecord {
        mp: mp_sum / n,
        reg: reg_sum / n,
        total: tape.value(total).get(0, 0),
    };
    Ok(BatchObjective {
        total,
        record,
        assignments,
    })
}

/// Stateful SGD driver for one run.
pub struct Trainer<'a> {
    backbone: &'a Backbone,
    model: MistModel,
    config: TrainConfig,
    eps_rng: Stream,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(backbone: &'a Backbone, model: MistModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let eps_rng = rng::stream(config.seeds.eps);
        Ok(Self {
            backbone,
            model,
            config,
            eps_rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &MistModel {
        &self.model
    }

    pub fn into_model(self) -> MistModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One SGD update on the learnable parameters.
    pub fn train_step(&mut self, batch: &[(&[f64], usize)]) -> Result<LossRecord> {
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Divergence { step },
            other => other,
        };
        let noise = self.model.draw_noise(Some(&mut self.eps_rng));
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &self.model);
        let objective = batch_objective(
            &mut tape,
            self.backbone,
            &self.model,
            &bound,
            &noise,
            batch,
            &self.config,
            None,
        )
        .map_err(diverged)?;
        if !objective.record.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        let mut grads = tape.backward(objective.total)?;
        let lr = self.config.learning_rate;
        for ((param, var), slot) in self
            .model
            .params_mut()
            .into_iter()
            .zip(&bound.vars)
            .zip(&bound.slots)
        {
            if !slot.learnable {
                continue;
            }
            let g = grads
                .take(*var)
                .ok_or_else(|| Error::Contract(format!("no gradient for {}", slot.name)))?;
            for (w, dw) in param.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * dw;
            }
            if !param.is_finite() {
                return Err(Error::Divergence { step });
            }
        }
        self.step += 1;
        Ok(objective.record)
    }

    /// Runs every epoch over `support`, reshuffling it each epoch with the
    /// data stream. Returns the mean loss of each epoch.
    pub fn fit(&mut self, support: &LabeledFeatureSet) -> Result<Vec<LossRecord>> {
        if support.is_empty() {
            return Err(Error::Input("empty support set".into()));
        }
        let mut data_rng = rng::stream(rng::derive_seed(self.config.seeds.data, "shuffle"));
        let mut order: Vec<usize> = (0..support.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut data_rng);
            let mut acc = LossRecord {
                mp: 0.0,
                reg: 0.0,
                total: 0.0,
            };
            let mut batches = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<(&[f64], usize)> = chunk
                    .iter()
                    .map(|&i| (support.feature(i), support.label(i)))
                    .collect();
                let r = self.train_step(&batch)?;
                acc.mp += r.mp;
                acc.reg += r.reg;
                acc.total += r.total;
                batches += 1.0;
            }
            history.push(LossRecord {
                mp: acc.mp / batches,
                reg: acc.reg / batches,
                total: acc.total / batches,
            });
        }
        Ok(history)
    }
}

/// Unit-norm prototype and visual prompt values for one draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeValues {
    pub text: Vec<Vec<Tensor>>,
    pub visual: Vec<Tensor>,
}

pub fn prototype_values(backbone: &Backbone, model: &MistModel, noise: &StepNoise) -> Result<PrototypeValues> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model);
    let graph = forward_prototypes(&mut tape, backbone, model, &bound, noise)?;
    Ok(PrototypeValues {
        text: graph
            .text
            .iter()
            .map(|ps| ps.iter().map(|&v| tape.value(v).clone()).collect())
            .collect(),
        visual: graph.visual.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Frozen inference path: either the mean prototypes or a fixed set of
/// sampled draws whose similarities are averaged.
pub struct Classifier<'a> {
    backbone: &'a Backbone,
    draws: Vec<PrototypeValues>,
}

impl<'a> Classifier<'a> {
    pub fn new(backbone: &'a Backbone, model: &MistModel, config: &TrainConfig) -> Result<Self> {
        let draws = if config.infer_samples == 0 {
            vec![prototype_values(backbone, model, &model.draw_noise(None))?]
        } else {
            let mut r = rng::stream(rng::derive_seed(config.seeds.eps, "infer"));
            (0..config.infer_samples)
                .map(|_| prototype_values(backbone, model, &model.draw_noise(Some(&mut r))))
                .collect::<Result<_>>()?
        };
        Ok(Self { backbone, draws })
    }

    pub fn draws(&self) -> &[PrototypeValues] {
        &self.draws
    }

    /// Unit-norm image embedding under the visual prompts of draw `draw`.
    pub fn embed_image(&self, x: &[f64], draw: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let visual: Vec<Var> = self.draws[draw]
            .visual
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let z = self.backbone.image.encode(&mut tape, x, &visual)?;
        Ok(tape.value(z).clone())
    }

    /// Cosine similarity to every prototype `[class][prompt]`, averaged over
    /// the draws.
    pub fn similarities(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut acc: Vec<Vec<f64>> = self.draws[0]
            .text
            .iter()
            .map(|ps| vec![0.0; ps.len()])
            .collect();
        for (k, draw) in self.draws.iter().enumerate() {
            let z = self.embed_image(x, k)?;
            for (row, protos) in acc.iter_mut().zip(&draw.text) {
                for (a, p) in row.iter_mut().zip(protos) {
                    *a += cosine(z.data(), p.data());
                }
            }
        }
        let n = self.draws.len() as f64;
        acc.iter_mut().flatten().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(predict_from_similarities(&self.similarities(x)?))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Class score is the max over its prompts; ties go to the lowest class id.
pub fn predict_from_similarities(sims: &[Vec<f64>]) -> usize {
    let scores: Vec<f64> = sims
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    assign(&scores)
}

pub fn predict(backbone: &Backbone, model: &MistModel, config: &TrainConfig, x: &[f64]) -> Result<usize> {
    Classifier::new(backbone, model, config)?.predict(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean accuracy of the lower and upper half of the sorted class
    /// accuracies.
    pub bins: (f64, f64),
    pub worst_class_accuracy: f64,
    /// Per class, the fraction of its samples nearest to each prompt.
    pub assignment_balance: Vec<Option<Vec<f64>>>,
}

impl Metrics {
    /// Smallest prompt share of each present class.
    pub fn min_prompt_shares(&self) -> Vec<f64> {
        self.assignment_balance
            .iter()
            .flatten()
            .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// Lower and upper bin means of the ascending-sorted accuracies. The lower
/// bin holds the first `n / 2` classes; a single class fills both bins.
pub fn sorted_bins(accuracies: &[f64]) -> (f64, f64) {
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    match sorted.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (sorted[0], sorted[0]),
        n => (mean(&sorted[..n / 2]), mean(&sorted[n / 2..])),
    }
}

/// Accuracy summaries from predicted and true labels plus the per-sample
/// same-class assignments.
pub fn summarize(
    predictions: &[usize],
    labels: &[usize],
    assignments: &[usize],
    num_classes: usize,
    prompt_count: usize,
) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    let mut shares = vec![vec![0usize; prompt_count]; num_classes];
    for ((&pred, &y), &a) in predictions.iter().zip(labels).zip(assignments) {
        if y >= num_classes {
            return Err(Error::Input(format!("label {y} outside [0, {num_classes})")));
        }
        total[y] += 1;
        correct[y] += usize::from(pred == y);
        shares[y][a] += 1;
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&k, &n)| (n > 0).then(|| k as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let balance = shares
        .iter()
        .zip(&total)
        .map(|(row, &n)| (n > 0).then(|| row.iter().map(|&k| k as f64 / n as f64).collect()))
        .collect();
    Ok(Metrics {
        accuracy: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        worst_class_accuracy: present.iter().cloned().fold(f64::INFINITY, f64::min),
        bins: sorted_bins(&present),
        per_class_accuracy: per_class,
        assignment_balance: balance,
    })
}

pub fn evaluate(
    test: &LabeledFeatureSet,
    backbone: &Backbone,
    model: &MistModel,
    config: &TrainConfig,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    if test.num_classes() > model.num_classes() {
        return Err(Error::Input(format!(
            "test set has {} classes, model has {}",
            test.num_classes(),
            model.num_classes()
        )));
    }
    let classifier = Classifier::new(backbone, model, config)?;
    let mut predictions = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut assignments = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let sims = classifier.similarities(test.feature(i))?;
        let y = test.label(i);
        predictions.push(predict_from_similarities(&sims));
        assignments.push(assign(&sims[y]));
        labels.push(y);
    }
    summarize(
        &predictions,
        &labels,
        &assignments,
        model.num_classes(),
        model.prompt_count(),
    )
}

/// Everything besides the tensors needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub class_tokens: Vec<Vec<u32>>,
}

pub fn save_model(w: impl std::io::Write, model: &MistModel, meta: &CheckpointMeta) -> Result<()> {
    let params = model.params();
    let named: Vec<(String, &Tensor)> = params.iter().map(|(s, t)| (s.name.clone(), *t)).collect();
    write_checkpoint(w, meta, &named)
}

/// Rebuilds the backbone from the stored encoder configuration and restores
/// every parameter by name.
pub fn load_model(r: impl std::io::Read) -> Result<(Backbone, MistModel, CheckpointMeta)> {
    let (meta, tensors): (CheckpointMeta, _) = read_checkpoint(r)?;
    let backbone = Backbone::new(meta.config.encoder.clone(), meta.feature_dim)?;
    let mut model = MistModel::new(&backbone, &meta.config, &meta.class_tokens)?;
    let names: Vec<String> = model.params().into_iter().map(|(s, _)| s.name).collect();
    if names.len() != tensors.len() {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected {} tensors, found {}", names.len(), tensors.len()),
        });
    }
    for ((name, slot), (stored_name, tensor)) in names.iter().zip(model.params_mut()).zip(tensors) {
        if *name != stored_name || slot.shape() != tensor.shape() {
            return Err(Error::Format {
                offset: 0,
                message: format!("tensor {stored_name:?} does not match parameter {name:?}"),
            });
        }
        *slot = tensor;
    }
    Ok((backbone, model, meta))
}
