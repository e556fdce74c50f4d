//! Adapter-based methods: sanitization, standard fine-tuning, negative
//! gradient and negative task vector. The base weights are only borrowed.

use std::time::Instant;

use super::train::{adapter_step, epoch_order, make_batch, qa_example, Direction, Example};
use super::{EpochRecord, MethodId, StepRecord, TrainLog, TrainRecipe, TrainStatus};
use crate::adapters::{init_adapters, merge, negate, scale, AdapterSet, Provenance};
use crate::datasets::{KnowledgeSet, QaPair};
use crate::error::{Error, Result};
use crate::eval::qa_accuracy;
use crate::model::{Decoder, GenerationSettings, ModelWeights, Vocabulary};
use crate::numerics::{AdamConfig, OptimizerState, Rng};

/// Trained adapters and the log of their run.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuned {
    pub adapters: AdapterSet,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorOutcome {
    /// `θ − τ` as plain weights.
    pub weights: ModelWeights,
    /// The fine-tuned adapters standing for `τ`.
    pub task_vector: AdapterSet,
    pub log: TrainLog,
}

/// Most pairs checked after each epoch when monitoring is cheap.
const MONITOR_SAMPLE: usize = 64;

struct Monitor {
    pairs: Vec<QaPair>,
    settings: GenerationSettings,
    stop_at_zero: bool,
}

fn sample(pairs: &[QaPair], k: usize, seed: u64) -> Vec<QaPair> {
    let mut idx = Rng::derived(seed, "monitor").sample_indices(pairs.len(), k.min(pairs.len()));
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i].clone()).collect()
}

fn examples_for(
    vocab: &Vocabulary,
    weights: &ModelWeights,
    pairs: &[QaPair],
    recipe: &TrainRecipe,
) -> Result<Vec<Example>> {
    let ctx = weights.config().context;
    pairs
        .iter()
        .map(|p| qa_example(vocab, &p.question, p.canonical(), recipe.loss_mask, ctx))
        .collect()
}

fn tune(
    weights: &ModelWeights,
    vocab: &Vocabulary,
    examples: &[Example],
    recipe: &TrainRecipe,
    direction: Direction,
    monitor: Option<Monitor>,
) -> Result<Tuned> {
    recipe.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no training pairs", recipe.method)));
    }
    let started = Instant::now();
    let mut set = init_adapters(
        weights,
        &recipe.lora.roles,
        recipe.lora.rank,
        recipe.lora.alpha,
        recipe.seed,
    )?;
    set.provenance = Provenance {
        method: recipe.method.to_string(),
        seed: recipe.seed,
        config_hash: String::new(),
    };
    let mut opt = OptimizerState::new(AdamConfig::with_lr(recipe.learning_rate), set.tensors());
    let mut log = TrainLog::new(recipe.method);
    let n = examples.len();
    let bs = recipe.batch_size;
    let mut step = 0usize;
    'epochs: for epoch in 0..recipe.epochs {
        let order = epoch_order(n, recipe.seed, epoch);
        for chunk in order.chunks(bs) {
            if recipe.max_steps > 0 && step >= recipe.max_steps {
                log.status = TrainStatus::MaxSteps;
                break 'epochs;
            }
            let batch = make_batch(examples, chunk)?;
            let loss = adapter_step(weights, &mut set, &mut opt, &batch, direction)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step + 1,
                    last_good_step: step,
                });
            }
            step += 1;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                probe_em: None,
            });
        }
        if let Some(m) = &monitor {
            let dec = Decoder::new(weights, Some(&set))?;
            let acc = qa_accuracy(&dec, vocab, &m.pairs, &m.settings)?;
            log.epochs.push(EpochRecord {
                epoch,
                train_accuracy: acc,
            });
            if m.stop_at_zero && acc == 0.0 {
                log.status = TrainStatus::EarlyStopped;
                break;
            }
        }
    }
    set.check_finite()?;
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(Tuned { adapters: set, log })
}

fn with_method(recipe: &TrainRecipe, method: MethodId) -> TrainRecipe {
    TrainRecipe {
        method,
        ..recipe.clone()
    }
}

/// Fits adapters on the shuffled union of K_S and K_R.
pub fn sanitization_tune(
    weights: &ModelWeights,
    vocab: &Vocabulary,
    sanitized: &KnowledgeSet,
    retain: &KnowledgeSet,
    recipe: &TrainRecipe,
) -> Result<Tuned> {
    if sanitized.is_empty() {
        return Err(Error::InvalidInput("sanitized set K_S is empty".into()));
    }
    let pairs: Vec<QaPair> = sanitized.pairs.iter().chain(&retain.pairs).cloned().collect();
    let examples = examples_for(vocab, weights, &pairs, recipe)?;
    let monitor = Monitor {
        pairs: sample(&pairs, MONITOR_SAMPLE, recipe.seed),
        settings: GenerationSettings::greedy(),
        stop_at_zero: false,
    };
    tune(weights, vocab, &examples, recipe, Direction::Descent, Some(monitor))
}

/// Sanitization with K_S alone.
pub fn sanitize_without_retain(
    weights: &ModelWeights,
    vocab: &Vocabulary,
    sanitized: &KnowledgeSet,
    recipe: &TrainRecipe,
) -> Result<Tuned> {
    let empty = KnowledgeSet {
        label: crate::datasets::SetLabel::Retain,
        pairs: Vec::new(),
        seed: sanitized.seed,
    };
    sanitization_tune(
        weights,
        vocab,
        sanitized,
        &empty,
        &with_method(recipe, MethodId::SanitizeNoKr),
    )
}

/// Fits adapters on K_F with its true answers.
pub fn standard_finetune(
    weights: &ModelWeights,
    vocab: &Vocabulary,
    forget: &KnowledgeSet,
    recipe: &TrainRecipe,
) -> Result<Tuned> {
    if forget.is_empty() {
        return Err(Error::InvalidInput("forget set K_F is empty".into()));
    }
    let examples = examples_for(vocab, weights, &forget.pairs, recipe)?;
    let monitor = Monitor {
        pairs: sample(&forget.pairs, MONITOR_SAMPLE, recipe.seed),
        settings: GenerationSettings::greedy(),
        stop_at_zero: false,
    };
    tune(weights, vocab, &examples, recipe, Direction::Descent, Some(monitor))
}

/// Gradient ascent on K_F; stops early once no K_F question is answered
/// correctly under `settings`.
pub fn negative_gradient(
    weights: &ModelWeights,
    vocab: &Vocabulary,
    forget: &KnowledgeSet,
    recipe: &TrainRecipe,
    settings: &GenerationSettings,
) -> Result<Tuned> {
    if forget.is_empty() {
        return Err(Error::InvalidInput("forget set K_F is empty".into()));
    }
    let examples = examples_for(vocab, weights, &forget.pairs, recipe)?;
    let monitor = Monitor {
        pairs: forget.pairs.clone(),
        settings: *settings,
        stop_at_zero: true,
    };
    tune(weights, vocab, &examples, recipe, Direction::Ascent, Some(monitor))
}

/// Standard fine-tuning on K_F, then `merge(weights, negate(λ·τ))` with
/// `λ = recipe.task_vector_scale`.
pub fn negative_task_vector(
    weights: &ModelWeights,
    vocab: &Vocabulary,
    forget: &KnowledgeSet,
    recipe: &TrainRecipe,
) -> Result<TaskVectorOutcome> {
    let ft_recipe = with_method(recipe, MethodId::StandardFt);
    let tuned = standard_finetune(weights, vocab, forget, &ft_recipe)?;
    let merged = merge(weights, &negate(&scale(&tuned.adapters, recipe.task_vector_scale)))?;
    let mut log = tuned.log;
    log.method = MethodId::NegTaskVector;
    let mut task_vector = tuned.adapters;
    task_vector.provenance.method = MethodId::NegTaskVector.to_string();
    Ok(TaskVectorOutcome {
        weights: merged,
        task_vector,
        log,
    })
}
