//! Two-phase training: pooled pretraining of the whole detector, then
//! per-domain fine-tuning of expert branches on top of frozen shared stages.
//!
//! The domain-agnostic baseline runs the same pretraining and then keeps
//! training on pooled data with the same schedule and step budget as the
//! expert phase, so the two differ only in how data is partitioned and in
//! what is frozen.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Dataset};
use crate::detector::{compute_loss, image_tensor, DetectorParams, Gradients};
use crate::domain::DomainSchema;
use crate::error::{Error, Result};
use crate::expert::{ExpertDetector, ExpertInit};
use crate::scenes::quota_allocation;
use crate::tensor::Tensor;

/// How expert-phase gradient steps relate to the baseline's.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// The expert phase takes as many steps in total as the baseline's
    /// continuation, split across domains in proportion to their image counts.
    #[default]
    MatchedTotal,
    /// Every branch gets the whole continuation budget.
    MatchedPerExpert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_expert: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of the expert phase and of the baseline's continuation.
    /// Falls back to `learning_rate`.
    pub expert_learning_rate: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of a phase's steps after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub expert_init: ExpertInit,
    pub budget_mode: BudgetMode,
    /// Draw pooled batches uniformly over domains instead of over images.
    pub balanced_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_pretrain: 12,
            epochs_expert: 6,
            batch_size: 16,
            learning_rate: 0.02,
            expert_learning_rate: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![0.7],
            lr_decay: 0.1,
            grad_clip: Some(10.0),
            seed: 0,
            expert_init: ExpertInit::Clone,
            budget_mode: BudgetMode::MatchedTotal,
            balanced_sampling: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.epochs_pretrain == 0 && self.epochs_expert == 0 {
            return Err(Error::invalid("at least one of epochs_pretrain and epochs_expert must be positive"));
        }
        let rates = [Some(self.learning_rate), self.expert_learning_rate];
        if rates.iter().flatten().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0 and lr_decay > 0"));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::invalid("lr_milestones must lie in [0, 1]"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }

    fn expert_lr(&self) -> f64 {
        self.expert_learning_rate.unwrap_or(self.learning_rate)
    }

    fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let progress = step as f64 / total.max(1) as f64;
        let drops = self.lr_milestones.iter().filter(|&&m| progress >= m).count();
        base * self.lr_decay.powi(drops as i32)
    }
}

/// Planned gradient steps of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub mode: BudgetMode,
    pub pretrain_steps: usize,
    /// Steps of the baseline's pooled continuation.
    pub continuation_steps: usize,
    /// Expert-phase steps per domain key, in key order.
    pub expert_steps: Vec<(String, usize)>,
}

impl BudgetPlan {
    pub fn baseline_total(&self) -> usize {
        self.pretrain_steps + self.continuation_steps
    }

    pub fn expert_total(&self) -> usize {
        self.pretrain_steps + self.expert_steps.iter().map(|(_, s)| s).sum::<usize>()
    }
}

/// Steps per pass over `n` images.
fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Budget for a dataset whose domains, named by `keys`, hold `domain_counts`
/// training images.
pub fn plan_budget(keys: Vec<String>, domain_counts: &[usize], config: &TrainConfig) -> BudgetPlan {
    let n: usize = domain_counts.iter().sum();
    let pooled = steps_per_epoch(n, config.batch_size);
    let continuation = config.epochs_expert * pooled;
    let per_domain = match config.budget_mode {
        BudgetMode::MatchedTotal if n > 0 => {
            quota_allocation(&domain_counts.iter().map(|&c| c as f64).collect::<Vec<_>>(), continuation)
        }
        BudgetMode::MatchedTotal => vec![0; domain_counts.len()],
        BudgetMode::MatchedPerExpert => domain_counts.iter().map(|&c| if c > 0 { continuation } else { 0 }).collect(),
    };
    BudgetPlan {
        mode: config.budget_mode,
        pretrain_steps: config.epochs_pretrain * pooled,
        continuation_steps: continuation,
        expert_steps: keys.into_iter().zip(per_domain).collect(),
    }
}

/// Per-image domain indices, failing on the first image that does not bin.
pub fn domain_indices(dataset: &Dataset, schema: &DomainSchema) -> Result<Vec<usize>> {
    dataset
        .images
        .iter()
        .map(|img| {
            schema.bin_index(&img.metadata).map_err(|e| match e {
                Error::SchemaMismatch { field } => Error::SchemaMismatch {
                    field: format!("{field} (image {})", img.id),
                },
                other => other,
            })
        })
        .collect()
}

pub fn key_names(schema: &DomainSchema) -> Vec<String> {
    schema.enumerate_keys().iter().map(|k| k.to_string()).collect()
}

pub fn domain_counts(indices: &[usize], key_count: usize) -> Vec<usize> {
    let mut counts = vec![0; key_count];
    for &d in indices {
        counts[d] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// `pretrain`, `continue`, or `expert/<key>`.
    pub name: String,
    pub steps: usize,
    pub images_seen: usize,
    /// Mean per-image loss of each pass over the phase's data.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub config: TrainConfig,
    pub budget: BudgetPlan,
    pub phases: Vec<PhaseRecord>,
    pub total_steps: usize,
    /// Images consumed by each branch during the expert phase.
    pub branch_images: BTreeMap<String, usize>,
    /// Images consumed by a branch they do not bin to. Always zero.
    pub foreign_images: usize,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.phases.iter().rev().find_map(|p| p.epoch_losses.last().copied())
    }
}

/// One training example: the input to the first trained stage plus targets.
struct Example<'a> {
    input: Tensor,
    objects: &'a [Annotation],
    image_size: (usize, usize),
}

enum Sampling<'a> {
    /// Shuffled passes over all examples.
    Shuffled,
    /// Each draw picks a nonempty domain uniformly, then an image in it.
    DomainUniform(&'a [Vec<usize>]),
}

struct BatchSampler<'a> {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    sampling: Sampling<'a>,
}

impl<'a> BatchSampler<'a> {
    fn new(n: usize, batch: usize, seed: u64, stream: u64, sampling: Sampling<'a>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        BatchSampler {
            n,
            batch,
            rng,
            order: (0..n).collect(),
            pos: n,
            sampling,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        match self.sampling {
            Sampling::Shuffled => {
                if self.pos >= self.n {
                    for i in (1..self.n).rev() {
                        let j = self.rng.random_range(0..=i);
                        self.order.swap(i, j);
                    }
                    self.pos = 0;
                }
                let end = (self.pos + self.batch).min(self.n);
                let out = self.order[self.pos..end].to_vec();
                self.pos = end;
                out
            }
            Sampling::DomainUniform(groups) => {
                let nonempty: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();
                (0..self.batch)
                    .map(|_| {
                        let g = nonempty[self.rng.random_range(0..nonempty.len())];
                        g[self.rng.random_range(0..g.len())]
                    })
                    .collect()
            }
        }
    }
}

/// Momentum SGD state for one parameter set.
struct Optimizer {
    velocity: Gradients,
}

impl Optimizer {
    fn new(params: &DetectorParams) -> Self {
        Optimizer {
            velocity: Gradients::zeros_like(params),
        }
    }

    fn step(&mut self, params: &mut DetectorParams, grads: &Gradients, lr: f64, config: &TrainConfig) {
        let frozen = params.frozen().clone();
        let grads = grads.tensors();
        let velocity = self.velocity.tensors_mut();
        for (((name, p), (_, g)), v) in params.tensors_mut().into_iter().zip(grads).zip(velocity) {
            if frozen.contains(&name) {
                continue;
            }
            let decay = if name.ends_with(".weight") { config.weight_decay } else { 0.0 };
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = config.momentum * *vv + gv + decay * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

struct PhasePlan<'a> {
    name: String,
    steps: usize,
    base_lr: f64,
    from_stage: usize,
    stream: u64,
    sampling: Sampling<'a>,
}

/// Runs `plan.steps` optimizer steps over `examples`. Per-image gradients are
/// computed in parallel and summed in batch order, so results do not depend
/// on the thread count.
fn run_phase(
    params: &mut DetectorParams,
    examples: &[Example],
    plan: PhasePlan,
    config: &TrainConfig,
    mut on_batch: impl FnMut(&[usize]),
) -> Result<PhaseRecord> {
    let mut record = PhaseRecord {
        name: plan.name.clone(),
        steps: 0,
        images_seen: 0,
        epoch_losses: Vec::new(),
    };
    if plan.steps == 0 || examples.is_empty() {
        return Ok(record);
    }
    let per_epoch = steps_per_epoch(examples.len(), config.batch_size);
    let mut sampler = BatchSampler::new(examples.len(), config.batch_size, config.seed, plan.stream, plan.sampling);
    let mut optimizer = Optimizer::new(params);
    let (mut epoch_loss, mut epoch_images) = (0.0, 0usize);
    for step in 0..plan.steps {
        let epoch = step / per_epoch + 1;
        let diverged = || Error::Divergence {
            phase: plan.name.clone(),
            epoch,
        };
        let batch = sampler.next_batch();
        on_batch(&batch);
        let results: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|&i| {
                let ex = &examples[i];
                compute_loss(params, &ex.input, plan.from_stage, ex.objects, ex.image_size)
            })
            .collect();
        let mut total = Gradients::zeros_like(params);
        let mut batch_loss = 0.0;
        for r in results {
            let (loss, g) = r.map_err(|e| match e {
                Error::Divergence { .. } => diverged(),
                other => other,
            })?;
            batch_loss += loss;
            total.add_assign(&g);
        }
        total.scale(1.0 / batch.len() as f64);
        let norm = total.norm();
        if !batch_loss.is_finite() || !norm.is_finite() {
            return Err(diverged());
        }
        if let Some(clip) = config.grad_clip {
            if norm > clip {
                total.scale(clip / norm);
            }
        }
        let lr = config.lr_at(plan.base_lr, step, plan.steps);
        optimizer.step(params, &total, lr, config);
        if !params.all_finite() {
            return Err(diverged());
        }
        record.steps += 1;
        record.images_seen += batch.len();
        epoch_loss += batch_loss;
        epoch_images += batch.len();
        if (step + 1) % per_epoch == 0 || step + 1 == plan.steps {
            record.epoch_losses.push(epoch_loss / epoch_images as f64);
            epoch_loss = 0.0;
            epoch_images = 0;
        }
    }
    Ok(record)
}

fn pooled_examples(dataset: &Dataset) -> Vec<Example<'_>> {
    dataset
        .images
        .par_iter()
        .map(|img| Example {
            input: image_tensor(&img.image),
            objects: &img.objects,
            image_size: (img.image.width(), img.image.height()),
        })
        .collect()
}

fn check_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    Ok(())
}

fn group_by_domain(indices: &[usize], key_count: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); key_count];
    for (i, &d) in indices.iter().enumerate() {
        groups[d].push(i);
    }
    groups
}

const PRETRAIN_STREAM: u64 = 1;
const CONTINUE_STREAM: u64 = 2;
const EXPERT_STREAM_BASE: u64 = 1 << 20;

/// Phase 1: trains a freshly initialized detector on pooled data.
///
/// `schema` is only consulted when `balanced_sampling` is on.
pub fn pretrain(
    dataset: &Dataset,
    init: DetectorParams,
    schema: Option<&DomainSchema>,
    config: &TrainConfig,
) -> Result<(DetectorParams, PhaseRecord)> {
    check_dataset(dataset, config)?;
    let mut params = init;
    params.unfreeze_all();
    let groups = match (config.balanced_sampling, schema) {
        (true, Some(schema)) => Some(group_by_domain(&domain_indices(dataset, schema)?, schema.key_count())),
        (true, None) => return Err(Error::invalid("balanced sampling needs a domain schema")),
        (false, _) => None,
    };
    let examples = pooled_examples(dataset);
    let plan = PhasePlan {
        name: "pretrain".into(),
        steps: config.epochs_pretrain * steps_per_epoch(dataset.len(), config.batch_size),
        base_lr: config.learning_rate,
        from_stage: 0,
        stream: PRETRAIN_STREAM,
        sampling: groups.as_deref().map_or(Sampling::Shuffled, Sampling::DomainUniform),
    };
    let record = run_phase(&mut params, &examples, plan, config, |_| {})?;
    Ok((params, record))
}

/// Baseline continuation: keeps training all stages on pooled data for the
/// expert-phase budget.
pub fn continue_baseline(
    dataset: &Dataset,
    pretrained: &DetectorParams,
    pretrain_record: &PhaseRecord,
    config: &TrainConfig,
) -> Result<(DetectorParams, RunRecord)> {
    check_dataset(dataset, config)?;
    let start = Instant::now();
    let mut params = pretrained.clone();
    params.unfreeze_all();
    let examples = pooled_examples(dataset);
    let continuation = config.epochs_expert * steps_per_epoch(dataset.len(), config.batch_size);
    let plan = PhasePlan {
        name: "continue".into(),
        steps: continuation,
        base_lr: config.expert_lr(),
        from_stage: 0,
        stream: CONTINUE_STREAM,
        sampling: Sampling::Shuffled,
    };
    let phase = run_phase(&mut params, &examples, plan, config, |_| {})?;
    let budget = plan_budget(vec!["all".into()], &[dataset.len()], config);
    let phases = vec![pretrain_record.clone(), phase];
    Ok((
        params,
        RunRecord {
            model: "baseline".into(),
            config: config.clone(),
            total_steps: phases.iter().map(|p| p.steps).sum(),
            budget,
            phases,
            branch_images: BTreeMap::new(),
            foreign_images: 0,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            manifest_digest: None,
        },
    ))
}

/// Domain-agnostic baseline: pretraining followed by pooled continuation.
pub fn train_baseline(
    dataset: &Dataset,
    init: DetectorParams,
    config: &TrainConfig,
) -> Result<(DetectorParams, RunRecord)> {
    let start = Instant::now();
    let (pretrained, phase) = pretrain(dataset, init, None, config)?;
    let (params, mut record) = continue_baseline(dataset, &pretrained, &phase, config)?;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((params, record))
}

/// Phase 2: splits a pretrained detector at `split`, freezes the shared
/// stages and fine-tunes each branch on its own domain's images only.
pub fn train_expert_phase(
    dataset: &Dataset,
    pretrained: &DetectorParams,
    pretrain_record: &PhaseRecord,
    schema: &DomainSchema,
    split: usize,
    config: &TrainConfig,
) -> Result<(ExpertDetector, RunRecord)> {
    check_dataset(dataset, config)?;
    let indices = domain_indices(dataset, schema)?;
    let start = Instant::now();
    let mut model = ExpertDetector::split_with(pretrained, schema, split, config.expert_init, config.seed)?;
    model.freeze_shared();
    let groups = group_by_domain(&indices, schema.key_count());
    let budget = plan_budget(key_names(schema), &domain_counts(&indices, schema.key_count()), config);

    let mut phases = vec![pretrain_record.clone()];
    let mut branch_images = BTreeMap::new();
    let mut foreign_images = 0;
    for (d, group) in groups.iter().enumerate() {
        let key = schema.key_at(d).to_string();
        let steps = budget.expert_steps[d].1;
        if group.is_empty() {
            log::warn!("domain {key} has no training images; its branch keeps the post-split weights");
        }
        if group.is_empty() || steps == 0 {
            phases.push(PhaseRecord {
                name: format!("expert/{key}"),
                steps: 0,
                images_seen: 0,
                epoch_losses: Vec::new(),
            });
            branch_images.insert(key, 0);
            continue;
        }
        // Shared stages are frozen, so their output is computed once.
        let examples: Vec<Example> = group
            .par_iter()
            .map(|&i| {
                let img = &dataset.images[i];
                Ok(Example {
                    input: model.shared_features(&img.image)?,
                    objects: &img.objects,
                    image_size: (img.image.width(), img.image.height()),
                })
            })
            .collect::<Result<_>>()?;
        let mut params = model.branch_detector(d);
        let plan = PhasePlan {
            name: format!("expert/{key}"),
            steps,
            base_lr: config.expert_lr(),
            from_stage: split,
            stream: EXPERT_STREAM_BASE + d as u64,
            sampling: Sampling::Shuffled,
        };
        let mut seen = 0usize;
        let phase = run_phase(&mut params, &examples, plan, config, |batch| {
            for &local in batch {
                let img = &dataset.images[group[local]];
                if schema.bin_index(&img.metadata).ok() == Some(d) {
                    seen += 1;
                } else {
                    foreign_images += 1;
                }
            }
        })?;
        model.set_branch(d, &params)?;
        branch_images.insert(key, seen);
        phases.push(phase);
    }
    Ok((
        model.clone(),
        RunRecord {
            model: model.name(),
            config: config.clone(),
            total_steps: phases.iter().map(|p| p.steps).sum(),
            budget,
            phases,
            branch_images,
            foreign_images,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            manifest_digest: None,
        },
    ))
}

/// Full expert protocol: pooled pretraining, split, freeze, fine-tune.
pub fn train_experts(
    dataset: &Dataset,
    init: DetectorParams,
    schema: &DomainSchema,
    split: usize,
    config: &TrainConfig,
) -> Result<(ExpertDetector, RunRecord)> {
    check_dataset(dataset, config)?;
    // Fail on unbinnable metadata before spending any compute.
    domain_indices(dataset, schema)?;
    if split > init.stage_count() {
        return Err(Error::invalid(format!("split stage {split} outside [0, {}]", init.stage_count())));
    }
    let start = Instant::now();
    let (pretrained, phase) = pretrain(dataset, init, Some(schema), config)?;
    let (model, mut record) = train_expert_phase(dataset, &pretrained, &phase, schema, split, config)?;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, StageSpec};
    use crate::domain::{DomainDimension, MetadataField};
    use crate::scenes::{generate_split, Balance, SceneSpec, Split};

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            stages: StageSpec {
                channels: vec![4, 6, 8],
                input_channels: 1,
            },
            ..DetectorConfig::default()
        }
    }

    fn data(n: usize) -> Dataset {
        let spec = SceneSpec {
            image_size: 32,
            focal_length_px: 60.0,
            ..SceneSpec::default()
        };
        let layout = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        generate_split(&spec, &layout, n, &Balance::Imbalanced(vec![0.5, 0.5, 0.0]), Split::Train).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs_pretrain: 2,
            epochs_expert: 2,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn budget_arithmetic() {
        let schema = DomainSchema::altitude(0.0, 1.0, 3).unwrap();
        let config = TrainConfig {
            epochs_pretrain: 3,
            epochs_expert: 2,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let plan = plan_budget(key_names(&schema), &[70, 20, 11], &config);
        assert_eq!(plan.pretrain_steps, 33);
        assert_eq!(plan.continuation_steps, 22);
        assert_eq!(plan.expert_total(), plan.baseline_total());
        let steps: Vec<usize> = plan.expert_steps.iter().map(|s| s.1).collect();
        // 22 steps over 70:20:11 is 15.25, 4.36, 2.40; the spare step goes to the last.
        assert_eq!(steps, vec![15, 4, 3]);

        let per = plan_budget(key_names(&schema), &[70, 0, 11], &TrainConfig {
            budget_mode: BudgetMode::MatchedPerExpert,
            ..config
        });
        assert_eq!(per.expert_steps.iter().map(|s| s.1).collect::<Vec<_>>(), vec![18, 0, 18]);
    }

    #[test]
    fn schedule_steps_down() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1.0, 0, 10), 1.0);
        assert_eq!(c.lr_at(1.0, 6, 10), 1.0);
        assert!((c.lr_at(1.0, 7, 10) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { epochs_pretrain: 0, epochs_expert: 0, ..cfg() }.validate().is_err());
        let empty = Dataset {
            categories: vec![],
            images: vec![],
        };
        let init = DetectorParams::init(small_config(), 0).unwrap();
        assert!(train_baseline(&empty, init, &cfg()).unwrap_err().is_input_error());
    }

    #[test]
    fn baseline_is_deterministic_and_learns() {
        let d = data(24);
        let init = DetectorParams::init(small_config(), 3).unwrap();
        let config = TrainConfig {
            epochs_pretrain: 4,
            ..cfg()
        };
        let (a, rec) = train_baseline(&d, init.clone(), &config).unwrap();
        let (b, _) = train_baseline(&d, init, &config).unwrap();
        assert!(a.bit_eq(&b));
        let losses: Vec<f64> = rec.phases.iter().flat_map(|p| p.epoch_losses.clone()).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
        assert_eq!(rec.total_steps, rec.budget.baseline_total());
    }

    #[test]
    fn experts_freeze_isolate_and_skip_empty() {
        let d = data(24);
        let schema = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        let init = DetectorParams::init(small_config(), 5).unwrap();
        let config = cfg();
        let (pretrained, phase) = pretrain(&d, init, None, &config).unwrap();
        let (model, rec) = train_expert_phase(&d, &pretrained, &phase, &schema, 2, &config).unwrap();
        for i in 1..=2 {
            assert!(model.shared()[i - 1].bit_eq(pretrained.stage(i)));
        }
        assert_eq!(rec.foreign_images, 0);
        assert_eq!(rec.total_steps, rec.budget.expert_total());
        assert_eq!(rec.total_steps, rec.budget.baseline_total());
        // The third altitude bin has no images: its branch is still the clone.
        let clone = ExpertDetector::split_model(&pretrained, &schema, 2).unwrap();
        assert!(model.branch(2).bit_eq(clone.branch(2)));
        assert!(!model.branch(0).bit_eq(clone.branch(0)));
        assert_eq!(rec.branch_images["bin2"], 0);
        assert!(rec.branch_images["bin0"] > 0);
    }

    #[test]
    fn zero_expert_epochs_equal_base() {
        let d = data(12);
        let schema = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        let init = DetectorParams::init(small_config(), 5).unwrap();
        let config = TrainConfig {
            epochs_expert: 0,
            ..cfg()
        };
        let (pretrained, phase) = pretrain(&d, init, None, &config).unwrap();
        let (model, _) = train_expert_phase(&d, &pretrained, &phase, &schema, 1, &config).unwrap();
        for img in &d.images {
            assert_eq!(
                model.route_forward(&img.image, &img.metadata, 0.01, 0.5).unwrap(),
                pretrained.detect(&img.image, 0.01, 0.5).unwrap()
            );
        }
    }

    #[test]
    fn unbinnable_metadata_fails_before_training() {
        let mut d = data(8);
        d.images[3].metadata.altitude_m = None;
        let schema = DomainSchema::new(vec![DomainDimension::equidistant(
            "altitude",
            MetadataField::Altitude,
            5.0,
            100.0,
            3,
        )
        .unwrap()])
        .unwrap();
        let init = DetectorParams::init(small_config(), 0).unwrap();
        let err = train_experts(&d, init, &schema, 1, &cfg()).unwrap_err();
        assert!(err.to_string().contains("image 3"), "{err}");
    }

    #[test]
    fn divergence_carries_epoch() {
        let d = data(8);
        let init = DetectorParams::init(small_config(), 0).unwrap();
        let config = TrainConfig {
            learning_rate: 1e6,
            grad_clip: None,
            epochs_pretrain: 5,
            ..cfg()
        };
        match train_baseline(&d, init, &config) {
            Err(Error::Divergence { phase, epoch }) => {
                assert_eq!(phase, "pretrain");
                assert!(epoch >= 1);
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }
}
