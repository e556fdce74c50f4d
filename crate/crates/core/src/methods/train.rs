//! Token sequences, batching and single optimizer steps.

use super::LossMask;
use crate::adapters::AdapterSet;
use crate::datasets::{render_example, render_prompt};
use crate::error::{Error, Result};
use crate::model::{loss_on_tape, Batch, BoundParams, ModelWeights, Vocabulary, BOS, EOS};
use crate::numerics::{adam_step, OptimizerState, Rng, Tape};

/// A training sequence and its loss mask (one entry per predicted token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

/// `<bos>` prompt answer newline `<eos>`, the same layout pretraining uses.
pub fn qa_example(
    vocab: &Vocabulary,
    question: &str,
    answer: &str,
    policy: LossMask,
    context: usize,
) -> Result<Example> {
    let prompt_len = 1 + vocab.encode(&render_prompt(question)).len();
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(&render_example(question, answer)));
    ids.push(EOS);
    if ids.len() > context + 1 {
        return Err(Error::InvalidInput(format!(
            "QA sequence of {} tokens does not fit context {context}",
            ids.len()
        )));
    }
    let mask = (1..ids.len())
        .map(|t| policy == LossMask::FullSequence || t >= prompt_len)
        .collect();
    Ok(Example { ids, mask })
}

/// Documents as `<bos> text <eos>`, cut into windows of at most
/// `context + 1` tokens that overlap by one token.
pub fn doc_examples(vocab: &Vocabulary, docs: &[String], context: usize) -> Vec<Example> {
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(d));
        ids.push(EOS);
        let mut start = 0;
        while start + 1 < ids.len() {
            let end = (start + context + 1).min(ids.len());
            let window = ids[start..end].to_vec();
            out.push(Example {
                mask: vec![true; window.len() - 1],
                ids: window,
            });
            start += context;
        }
    }
    out
}

/// Example order for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derived(seed, &format!("epoch-{epoch}")).shuffle(&mut order);
    order
}

pub(crate) fn make_batch(examples: &[Example], idx: &[usize]) -> Result<Batch> {
    let seqs: Vec<(&[usize], &[bool])> = idx
        .iter()
        .map(|&i| (examples[i].ids.as_slice(), examples[i].mask.as_slice()))
        .collect();
    Batch::from_sequences(&seqs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Descent,
    Ascent,
}

/// Full-parameter step on the mean token loss. Returns the loss before the
/// update; nothing is updated when it is not finite.
pub(crate) fn full_step(
    weights: &mut ModelWeights,
    opt: &mut OptimizerState,
    batch: &Batch,
) -> Result<f64> {
    let count = batch.counted_tokens().max(1) as f64;
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, weights, true);
    let sum = loss_on_tape(&mut tape, weights.config(), &params, None, batch)?;
    let loss = tape.scalar(sum)? / count;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let mean = tape.scale(sum, 1.0 / count);
    let grads = tape.backward(mean)?;
    let ids = params.ordered(weights)?;
    let g: Vec<&[f64]> = ids
        .iter()
        .map(|&id| grads.get(id).expect("every parameter receives a gradient"))
        .collect();
    let mut tensors = weights.tensors_mut();
    adam_step(&mut tensors, &g, opt)?;
    Ok(loss)
}

/// Adapter-only step; the base weights enter the tape as constants.
pub(crate) fn adapter_step(
    weights: &ModelWeights,
    set: &mut AdapterSet,
    opt: &mut OptimizerState,
    batch: &Batch,
    direction: Direction,
) -> Result<f64> {
    let count = batch.counted_tokens().max(1) as f64;
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, weights, false);
    let (bound, ids) = set.bind(&mut tape, true);
    let sum = loss_on_tape(&mut tape, weights.config(), &params, Some(&bound), batch)?;
    let loss = tape.scalar(sum)? / count;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let sign = match direction {
        Direction::Descent => 1.0,
        Direction::Ascent => -1.0,
    };
    let objective = tape.scale(sum, sign / count);
    let grads = tape.backward(objective)?;
    let g: Vec<&[f64]> = ids
        .iter()
        .map(|&id| grads.get(id).expect("every adapter factor receives a gradient"))
        .collect();
    let mut tensors = set.tensors_mut();
    adam_step(&mut tensors, &g, opt)?;
    Ok(loss)
}
