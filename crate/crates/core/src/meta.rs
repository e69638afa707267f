//! First-order meta-learning of the knowledge base initialisation.
//!
//! Each meta-iteration samples a batch of task units and then
//!
//! 1. clones the live parameters into a working copy,
//! 2. takes one averaged gradient step on the copy over the batch's support
//!    samples (step size `inner_lr`),
//! 3. evaluates query loss plus the protection penalty *at the copy* and
//!    applies that gradient, unchanged, to the live parameters (step size
//!    `meta_lr`). Nothing is differentiated through step 2.
//!
//! [`kb_test_support`] then fine-tunes the learned initialisation on a new
//! unit with Adam.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Mode, ValueMap};
use crate::data::{sample_task_batch, TaskSample, TaskUnit};
use crate::error::{Error, Result};
use crate::knowledge_base::{self, KbArchitecture};
use crate::optim::{sgd_step, Adam, Proximal};
use crate::params::ParamSet;
use crate::ppm::{ppm_penalty, ImportanceMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner (support) step size.
    pub inner_lr: f64,
    /// Meta (query) step size.
    pub meta_lr: f64,
    /// Task units per meta-iteration.
    pub batch_size: usize,
    /// Minibatches each unit's support sample is cut into.
    pub inner_minibatches: usize,
    /// Records sampled per unit for support and for query.
    pub samples_per_unit: usize,
    /// Number of meta-iterations.
    pub meta_epochs: usize,
    pub inner_steps: usize,
    /// Adapt a separate copy per unit instead of one shared copy.
    pub per_task_adaptation: bool,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub support_fraction: f64,
    /// Multiplier on the protection penalty.
    pub ppm_weight: f64,
    /// Records used when measuring parameter sensitivity.
    pub importance_samples: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.3,
            meta_lr: 0.5,
            batch_size: 5,
            inner_minibatches: 1,
            samples_per_unit: 128,
            meta_epochs: 300,
            inner_steps: 1,
            per_task_adaptation: false,
            fine_tune_steps: 5,
            fine_tune_lr: 0.02,
            support_fraction: 0.8,
            ppm_weight: 1.0,
            importance_samples: 256,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.inner_lr) || !unit(self.meta_lr) {
            return Err(Error::invalid("inner_lr and meta_lr must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.samples_per_unit == 0 || self.inner_minibatches == 0 {
            return Err(Error::invalid(
                "batch_size, samples_per_unit and inner_minibatches must be >= 1",
            ));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::invalid("support_fraction must lie in (0, 1)"));
        }
        if !(self.fine_tune_lr > 0.0) || self.ppm_weight < 0.0 {
            return Err(Error::invalid(
                "fine_tune_lr must be positive and ppm_weight nonnegative",
            ));
        }
        Ok(())
    }
}

/// Loss over a set of records of one unit, with gradients.
pub trait Objective {
    fn loss_and_grad(
        &self,
        params: &ValueMap,
        unit: &TaskUnit,
        indices: &[usize],
        seed: u64,
    ) -> Result<(f64, GradMap)>;
}

/// Binary cross-entropy of the knowledge base, dropout active.
#[derive(Clone, Debug)]
pub struct KbObjective {
    pub arch: KbArchitecture,
    pub mode: Mode,
}

impl KbObjective {
    pub fn training(arch: &KbArchitecture) -> Self {
        KbObjective {
            arch: arch.clone(),
            mode: Mode::Train,
        }
    }
}

impl Objective for KbObjective {
    fn loss_and_grad(
        &self,
        params: &ValueMap,
        unit: &TaskUnit,
        indices: &[usize],
        seed: u64,
    ) -> Result<(f64, GradMap)> {
        knowledge_base::bce_loss(params, &self.arch, unit, indices, self.mode, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub ppm_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MetaState {
    /// θ_M
    pub live: ParamSet,
    /// θ_{M^c}
    pub copy: ParamSet,
    /// Per-unit copies when `per_task_adaptation` is on, keyed by pool index.
    pub task_copies: Vec<(usize, ParamSet)>,
    pub iteration: usize,
    pub history: Vec<IterationLog>,
}

impl MetaState {
    pub fn new(init: ParamSet) -> Self {
        MetaState {
            copy: init.snapshot(),
            live: init,
            task_copies: Vec::new(),
            iteration: 0,
            history: Vec::new(),
        }
    }

    pub fn clone_copy(&mut self) {
        self.copy = self.live.snapshot();
        self.task_copies.clear();
    }

    /// Writes `live.bin` and `state.json` into `dir`. Checkpoints are taken
    /// between iterations, where the copy is rebuilt from `live` anyway.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.live.save(&dir.join(CHECKPOINT_PARAMS))?;
        let meta = CheckpointMeta {
            iteration: self.iteration,
            history: self.history.clone(),
        };
        // write-then-rename so an interrupted save leaves the old state
        let tmp = dir.join("state.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&meta)?)?;
        std::fs::rename(tmp, dir.join(CHECKPOINT_STATE))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let live = ParamSet::load(&dir.join(CHECKPOINT_PARAMS))?;
        let path = dir.join(CHECKPOINT_STATE);
        let meta: CheckpointMeta =
            serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| Error::Checkpoint {
                path: path.clone(),
                message: e.to_string(),
            })?;
        if meta.history.len() != meta.iteration {
            return Err(Error::Checkpoint {
                path,
                message: format!(
                    "{} log rows for iteration {}",
                    meta.history.len(),
                    meta.iteration
                ),
            });
        }
        let mut state = MetaState::new(live);
        state.iteration = meta.iteration;
        state.history = meta.history;
        Ok(state)
    }
}

const CHECKPOINT_PARAMS: &str = "live.bin";
const CHECKPOINT_STATE: &str = "state.json";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    history: Vec<IterationLog>,
}

pub fn checkpoint_exists(dir: &Path) -> bool {
    dir.join(CHECKPOINT_PARAMS).is_file() && dir.join(CHECKPOINT_STATE).is_file()
}

/// splitmix64 finaliser; used to derive per-iteration seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D1_33C4_9D8E_A8DB);
    z ^ (z >> 31)
}

fn add_into(acc: &mut GradMap, g: GradMap, scale: f64) {
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => a.axpy(scale, &t),
            None => {
                let mut t = t;
                t.scale(scale);
                acc.insert(name, t);
            }
        }
    }
}

fn chunks(indices: &[usize], m: usize) -> Vec<&[usize]> {
    let size = indices.len().div_ceil(m).max(1);
    indices.chunks(size).collect()
}

/// Inner update on the working copy:
/// `θc ← θc − α · 1/(n·m) · Σ_i Σ_j ∇L(θc, support_ij)`.
///
/// Units with an empty support sample are skipped and the divisor shrinks
/// accordingly. Returns the mean support loss, or `None` if nothing was
/// usable.
pub fn kb_train_support(
    state: &mut MetaState,
    pool: &[TaskUnit],
    batch: &[TaskSample],
    config: &MetaConfig,
    objective: &dyn Objective,
    seed: u64,
) -> Result<Option<f64>> {
    let mut last_loss = None;
    if config.per_task_adaptation {
        state.task_copies = batch
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.support.is_empty())
            .map(|(_, s)| (s.unit, state.live.snapshot()))
            .collect();
    }
    for step in 0..config.inner_steps {
        let mut acc = GradMap::new();
        let mut count = 0usize;
        let mut loss_sum = 0.0;
        for (i, sample) in batch.iter().enumerate() {
            if sample.support.is_empty() {
                log::warn!(
                    "unit {} has no support records; skipped",
                    pool[sample.unit].id
                );
                continue;
            }
            let unit = &pool[sample.unit];
            let parts = chunks(&sample.support, config.inner_minibatches);
            if config.per_task_adaptation {
                let copy = &mut state
                    .task_copies
                    .iter_mut()
                    .find(|(u, _)| *u == sample.unit)
                    .expect("copy exists for every non-empty unit")
                    .1;
                let mut unit_acc = GradMap::new();
                for (j, part) in parts.iter().enumerate() {
                    let s = mix_seed(seed, (step * 1000 + i * 10 + j) as u64);
                    let (l, g) = objective.loss_and_grad(&copy.arrays, unit, part, s)?;
                    loss_sum += l;
                    count += 1;
                    add_into(&mut unit_acc, g, 1.0 / parts.len() as f64);
                }
                sgd_step(&mut copy.arrays, &unit_acc, config.inner_lr);
            } else {
                for (j, part) in parts.iter().enumerate() {
                    let s = mix_seed(seed, (step * 1000 + i * 10 + j) as u64);
                    let (l, g) = objective.loss_and_grad(&state.copy.arrays, unit, part, s)?;
                    loss_sum += l;
                    count += 1;
                    add_into(&mut acc, g, 1.0);
                }
            }
        }
        if count == 0 {
            return Ok(None);
        }
        if !config.per_task_adaptation {
            sgd_step(&mut state.copy.arrays, &acc, config.inner_lr / count as f64);
        }
        last_loss = Some(loss_sum / count as f64);
    }
    Ok(last_loss)
}

/// Meta update: `θ_M ← θ_M − β ∇_{θc}(L_query(θc) + L_PPM(θc))`.
///
/// The copy itself is left untouched. Returns `(query_loss, ppm_loss)`.
pub fn kb_train_query(
    state: &mut MetaState,
    pool: &[TaskUnit],
    batch: &[TaskSample],
    config: &MetaConfig,
    objective: &dyn Objective,
    ppm: Option<&ImportanceMap>,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut acc = GradMap::new();
    let mut loss_sum = 0.0;
    let mut ppm_sum = 0.0;
    let mut used = 0usize;
    for (i, sample) in batch.iter().enumerate() {
        if sample.query.is_empty() {
            log::warn!(
                "unit {} has no query records; skipped",
                pool[sample.unit].id
            );
            continue;
        }
        let at = if config.per_task_adaptation {
            match state.task_copies.iter().find(|(u, _)| *u == sample.unit) {
                Some((_, p)) => p,
                None => continue,
            }
        } else {
            &state.copy
        };
        let s = mix_seed(seed, 500_000 + i as u64);
        let (l, mut g) =
            objective.loss_and_grad(&at.arrays, &pool[sample.unit], &sample.query, s)?;
        if let Some(imp) = ppm {
            let (pl, pg) = ppm_penalty(&at.arrays, imp)?;
            ppm_sum += config.ppm_weight * pl;
            add_into(&mut g, pg, config.ppm_weight);
        }
        loss_sum += l;
        used += 1;
        add_into(&mut acc, g, 1.0);
    }
    if used == 0 {
        return Ok((f64::NAN, 0.0));
    }
    sgd_step(&mut state.live.arrays, &acc, config.meta_lr / used as f64);
    state.live.version += 1;
    Ok((loss_sum / used as f64, ppm_sum / used as f64))
}

/// Runs meta-iterations until `state.iteration == config.meta_epochs`.
/// Resuming a saved state continues from its iteration counter.
pub fn continue_training(
    state: &mut MetaState,
    pool: &[TaskUnit],
    config: &MetaConfig,
    objective: &dyn Objective,
    ppm: Option<&ImportanceMap>,
) -> Result<()> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::invalid("empty task pool"));
    }
    let n = config.batch_size.min(pool.len());
    let mut initial = state.history.first().map(|h| h.query_loss);
    let mut above = 0usize;
    while state.iteration < config.meta_epochs {
        let it = state.iteration;
        let seed = mix_seed(config.seed, it as u64);
        let batch = sample_task_batch(pool, n, config.samples_per_unit, seed)?;
        state.clone_copy();
        let support = kb_train_support(state, pool, &batch, config, objective, seed)?;
        let (query, ppm_loss) = kb_train_query(state, pool, &batch, config, objective, ppm, seed)?;
        state.iteration += 1;
        state.history.push(IterationLog {
            iteration: it,
            support_loss: support.unwrap_or(f64::NAN),
            query_loss: query,
            ppm_loss,
        });
        let init = *initial.get_or_insert(query);
        if !query.is_finite() || query > 10.0 * init {
            above += 1;
            if above >= 50 {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: query,
                    initial: init,
                });
            }
        } else {
            above = 0;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    /// θ_M*
    pub params: ParamSet,
    pub history: Vec<IterationLog>,
}

pub fn meta_train(
    pool: &[TaskUnit],
    config: &MetaConfig,
    init: ParamSet,
    objective: &dyn Objective,
    ppm: Option<&ImportanceMap>,
) -> Result<MetaOutcome> {
    let mut state = MetaState::new(init);
    continue_training(&mut state, pool, config, objective, ppm)?;
    Ok(MetaOutcome {
        params: state.live,
        history: state.history,
    })
}

/// Like [`continue_training`], saving a checkpoint to `dir` every `every`
/// iterations and at the end. Per-iteration seeds depend only on the
/// iteration number, so a resumed run matches an uninterrupted one.
pub fn train_with_checkpoints(
    state: &mut MetaState,
    pool: &[TaskUnit],
    config: &MetaConfig,
    objective: &dyn Objective,
    ppm: Option<&ImportanceMap>,
    every: usize,
    dir: &Path,
) -> Result<()> {
    let every = every.max(1);
    while state.iteration < config.meta_epochs {
        let stop = (state.iteration + every).min(config.meta_epochs);
        let chunk = MetaConfig {
            meta_epochs: stop,
            ..config.clone()
        };
        continue_training(state, pool, &chunk, objective, ppm)?;
        state.save_checkpoint(dir)?;
    }
    Ok(())
}

/// Meta-trains a knowledge base on `pool` from a seeded Xavier init.
pub fn meta_train_kb(
    pool: &[TaskUnit],
    arch: &KbArchitecture,
    config: &MetaConfig,
    ppm: Option<&ImportanceMap>,
) -> Result<MetaOutcome> {
    let init = knowledge_base::init_params(arch, config.seed)?;
    meta_train(pool, config, init, &KbObjective::training(arch), ppm)
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub params: ParamSet,
    /// Support loss (without the penalty) before each step.
    pub losses: Vec<f64>,
}

/// Fine-tunes `initial` on the unit's support set with Adam for
/// `fine_tune_steps` full-batch steps. When `ppm` is given its penalty is
/// applied as a proximal pull toward the anchor after every step.
pub fn kb_test_support(
    initial: &ParamSet,
    unit: &TaskUnit,
    config: &MetaConfig,
    ppm: Option<&ImportanceMap>,
) -> Result<FineTuneOutcome> {
    if unit.support.is_empty() {
        log::warn!(
            "unit {} has no support records; returning the initialisation",
            unit.id
        );
        return Ok(FineTuneOutcome {
            params: initial.snapshot(),
            losses: Vec::new(),
        });
    }
    let arch = initial.kb_arch()?.clone();
    let objective = KbObjective::training(&arch);
    let mut params = initial.snapshot();
    let mut opt = Adam::new(config.fine_tune_lr);
    let mut losses = Vec::with_capacity(config.fine_tune_steps);
    for step in 0..config.fine_tune_steps {
        let seed = mix_seed(config.seed ^ 0xF1E7, step as u64);
        let (loss, grads) = objective.loss_and_grad(&params.arrays, unit, &unit.support, seed)?;
        losses.push(loss);
        let prox = ppm.map(|imp| Proximal {
            phi: &imp.phi,
            anchor: &imp.anchor.arrays,
            weight: config.ppm_weight,
        });
        opt.step_with(&mut params.arrays, &grads, prox);
        params.version += 1;
    }
    Ok(FineTuneOutcome { params, losses })
}

pub fn write_loss_csv(history: &[IterationLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for h in history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<IterationLog>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
