//! Full-parameter pretraining with probe-based halting and resumable state.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::{epoch_order, full_step, make_batch, Example};
use super::{MethodId, StepRecord, TrainLog, TrainRecipe, TrainStatus};
use crate::datasets::QaPair;
use crate::error::{Error, Result};
use crate::eval::qa_accuracy;
use crate::model::checkpoint::{
    binary_path, decode_tensors, encode_tensors, read_json, write_atomic, TensorRecord, DTYPE,
};
use crate::model::{load_model, save_model, Decoder, GenerationSettings, ModelManifest, ModelWeights, Vocabulary};
use crate::numerics::{AdamConfig, OptimizerState, Rng};

/// Exact-match probe on a fixed sample of training questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub size: usize,
    pub target: f64,
    /// Steps between probes; 0 probes once per epoch.
    pub every_steps: usize,
    pub settings: GenerationSettings,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            size: 200,
            target: 0.95,
            every_steps: 0,
            settings: GenerationSettings::greedy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub recipe: TrainRecipe,
    pub probe: ProbeConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            recipe: TrainRecipe::for_method(MethodId::Pretrain),
            probe: ProbeConfig::default(),
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub weights: ModelWeights,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
}

impl TrainingState {
    pub fn fresh(weights: ModelWeights, recipe: &TrainRecipe) -> Self {
        let optimizer = OptimizerState::new(
            AdamConfig::with_lr(recipe.learning_rate),
            weights.entries().iter().map(|e| e.tensor()),
        );
        TrainingState {
            weights,
            optimizer,
            log: TrainLog::new(MethodId::Pretrain),
        }
    }

    pub fn step(&self) -> usize {
        self.optimizer.step() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub state: TrainingState,
    pub probe_em: f64,
}

/// A seeded sample of `size` pairs (all of them if the pool is smaller).
pub fn probe_subset(pool: &[QaPair], size: usize, seed: u64) -> Vec<QaPair> {
    let k = size.min(pool.len());
    let mut idx = Rng::derived(seed, "probe").sample_indices(pool.len(), k);
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// Trains all weights on `examples` until the probe reaches its target or
/// the step budget runs out. Probe results are passed to `on_probe` with
/// the current state, which is how callers checkpoint.
pub fn pretrain(
    mut state: TrainingState,
    vocab: &Vocabulary,
    examples: &[Example],
    probe: &[QaPair],
    cfg: &PretrainConfig,
    on_probe: &mut dyn FnMut(&TrainingState, f64) -> Result<()>,
) -> Result<PretrainOutcome> {
    let recipe = &cfg.recipe;
    recipe.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no pretraining examples".into()));
    }
    if probe.is_empty() {
        return Err(Error::InvalidInput("empty probe set".into()));
    }
    let started = Instant::now();
    let elapsed_before = state.log.wall_clock_secs;
    let n = examples.len();
    let per_epoch = n.div_ceil(recipe.batch_size);
    let epoch_budget = recipe.epochs * per_epoch;
    let total = if recipe.max_steps > 0 {
        epoch_budget.min(recipe.max_steps)
    } else {
        epoch_budget
    };
    let probe_every = if cfg.probe.every_steps > 0 {
        cfg.probe.every_steps
    } else {
        per_epoch
    };
    let mut step = state.step();
    let mut last_good = step;
    let mut order: Option<(usize, Vec<usize>)> = None;
    let mut probe_em = state
        .log
        .steps
        .iter()
        .rev()
        .find_map(|s| s.probe_em)
        .unwrap_or(0.0);
    state.log.status = if total < epoch_budget {
        TrainStatus::MaxSteps
    } else {
        TrainStatus::Completed
    };
    if probe_em >= cfg.probe.target {
        state.log.status = TrainStatus::TargetReached;
    }
    while step < total && state.log.status != TrainStatus::TargetReached {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(n, recipe.seed, epoch)));
        }
        let ord = &order.as_ref().expect("order set above").1;
        let idx = &ord[pos * recipe.batch_size..((pos + 1) * recipe.batch_size).min(n)];
        let batch = make_batch(examples, idx)?;
        let loss = full_step(&mut state.weights, &mut state.optimizer, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                last_good_step: last_good,
            });
        }
        step += 1;
        last_good = step;
        let mut record = StepRecord {
            step,
            epoch,
            loss,
            probe_em: None,
        };
        if step.is_multiple_of(probe_every) || step == total {
            let dec = Decoder::new(&state.weights, None)?;
            probe_em = qa_accuracy(&dec, vocab, probe, &cfg.probe.settings)?;
            record.probe_em = Some(probe_em);
            state.log.steps.push(record);
            state.log.wall_clock_secs = elapsed_before + started.elapsed().as_secs_f64();
            if probe_em >= cfg.probe.target {
                state.log.status = TrainStatus::TargetReached;
            }
            on_probe(&state, probe_em)?;
        } else {
            state.log.steps.push(record);
        }
    }
    state.log.wall_clock_secs = elapsed_before + started.elapsed().as_secs_f64();
    Ok(PretrainOutcome { state, probe_em })
}

pub const OPTIMIZER_FILE: &str = "optimizer.json";
pub const OPTIMIZER_BINARY: &str = "optimizer.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
const OPTIMIZER_FORMAT: &str = "ksan-optimizer";

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerManifest {
    format: String,
    version: u32,
    config: AdamConfig,
    step: u64,
    binary: String,
    first: Vec<TensorRecord>,
    second: Vec<TensorRecord>,
}

/// Writes weights, Adam moments and the training log under `dir`.
pub fn save_training_state(
    state: &TrainingState,
    dir: &Path,
    metadata: serde_json::Value,
) -> Result<()> {
    save_model(&state.weights, dir, metadata)?;
    let opt = &state.optimizer;
    let (bytes, offsets) =
        encode_tensors(opt.first_moments().iter().chain(opt.second_moments()));
    let names: Vec<&str> = state.weights.entries().iter().map(|e| e.name()).collect();
    let k = names.len();
    let records = |tensors: &[crate::numerics::Tensor], offs: &[u64]| -> Vec<TensorRecord> {
        tensors
            .iter()
            .zip(offs)
            .zip(&names)
            .map(|((t, &offset), name)| TensorRecord {
                name: name.to_string(),
                role: None,
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                offset,
            })
            .collect()
    };
    let manifest = OptimizerManifest {
        format: OPTIMIZER_FORMAT.into(),
        version: 1,
        config: opt.config,
        step: opt.step(),
        binary: OPTIMIZER_BINARY.into(),
        first: records(opt.first_moments(), &offsets[..k]),
        second: records(opt.second_moments(), &offsets[k..]),
    };
    write_atomic(&dir.join(OPTIMIZER_BINARY), &bytes)?;
    write_atomic(&dir.join(OPTIMIZER_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    write_atomic(&dir.join(TRAIN_LOG_FILE), &serde_json::to_vec(&state.log)?)
}

/// Restores a state written by [`save_training_state`].
pub fn load_training_state(dir: &Path) -> Result<(TrainingState, ModelManifest)> {
    let (weights, model_manifest) = load_model(dir)?;
    let path = dir.join(OPTIMIZER_FILE);
    let m: OptimizerManifest = read_json(&path)?;
    if m.format != OPTIMIZER_FORMAT {
        return Err(Error::CorruptCheckpoint {
            path,
            reason: format!("format `{}` is not optimizer state", m.format),
        });
    }
    let specs: Vec<_> = m
        .first
        .iter()
        .chain(&m.second)
        .map(|r| (r.shape.clone(), r.offset))
        .collect();
    let mut tensors = decode_tensors(&binary_path(dir, &m.binary)?, &specs)?;
    let second = tensors.split_off(m.first.len());
    let optimizer = OptimizerState::from_parts(m.config, m.step, tensors, second)?;
    let layout_ok = optimizer.first_moments().len() == weights.entries().len()
        && optimizer
            .first_moments()
            .iter()
            .zip(weights.entries())
            .all(|(t, e)| t.shape() == e.tensor().shape());
    if !layout_ok {
        return Err(Error::CorruptCheckpoint {
            path,
            reason: "optimizer moments do not match the model layout".into(),
        });
    }
    let log: TrainLog = read_json(&dir.join(TRAIN_LOG_FILE))?;
    Ok((
        TrainingState {
            weights,
            optimizer,
            log,
        },
        model_manifest,
    ))
}
