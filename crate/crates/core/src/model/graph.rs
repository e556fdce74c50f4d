//! The decoder forward pass recorded on a [`Tape`], used for training.

use std::collections::HashMap;

use super::weights::names;
use super::{ModelWeights, TransformerConfig, PAD};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape};

/// Tape nodes standing for each named weight tensor.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    nodes: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn new() -> Self {
        BoundParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, node: NodeId) {
        self.nodes.insert(name.into(), node);
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Every weight as a leaf; `trainable` decides whether it receives gradients.
    pub fn bind(tape: &mut Tape, weights: &ModelWeights, trainable: bool) -> Self {
        let mut out = BoundParams::new();
        for e in weights.entries() {
            let id = if trainable {
                tape.param_tensor(e.tensor())
            } else {
                tape.constant_tensor(e.tensor())
            };
            out.insert(e.name(), id);
        }
        out
    }

    /// Node ids in weight storage order.
    pub fn ordered(&self, weights: &ModelWeights) -> Result<Vec<NodeId>> {
        weights.entries().iter().map(|e| self.get(e.name())).collect()
    }
}

/// Low-rank factors attached to one weight matrix on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLora {
    /// `r × in`.
    pub a: NodeId,
    /// `out × r`.
    pub b: NodeId,
    pub scale: f64,
}

pub type BoundAdapters = HashMap<String, BoundLora>;

/// Padded token batch with next-token targets and a loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Builds a batch from full sequences. `weights[i][t]` says whether the
    /// prediction of token `t + 1` of sequence `i` counts toward the loss.
    pub fn from_sequences(seqs: &[(&[usize], &[bool])]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut seq = 0;
        for (ids, mask) in seqs {
            if ids.len() < 2 {
                return Err(Error::InvalidInput("training sequence needs at least 2 tokens".into()));
            }
            if mask.len() != ids.len() - 1 {
                return Err(Error::shape(format!(
                    "loss mask of {} for a sequence of {} tokens",
                    mask.len(),
                    ids.len()
                )));
            }
            seq = seq.max(ids.len() - 1);
        }
        let n = seqs.len() * seq;
        let mut b = Batch {
            inputs: vec![PAD; n],
            targets: vec![PAD; n],
            mask: vec![false; n],
            batch: seqs.len(),
            seq,
        };
        for (i, (ids, mask)) in seqs.iter().enumerate() {
            let base = i * seq;
            let t = ids.len() - 1;
            b.inputs[base..base + t].copy_from_slice(&ids[..t]);
            b.targets[base..base + t].copy_from_slice(&ids[1..]);
            b.mask[base..base + t].copy_from_slice(mask);
        }
        Ok(b)
    }

    pub fn counted_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn linear(
    tape: &mut Tape,
    x: NodeId,
    params: &BoundParams,
    adapters: Option<&BoundAdapters>,
    name: &str,
) -> Result<NodeId> {
    let w = params.get(name)?;
    let y = tape.matmul(x, w, true)?;
    match adapters.and_then(|a| a.get(name)) {
        None => Ok(y),
        Some(l) => {
            let xa = tape.matmul(x, l.a, true)?;
            let xab = tape.matmul(xa, l.b, true)?;
            let delta = tape.scale(xab, l.scale);
            tape.add(y, delta)
        }
    }
}

/// Records the forward pass for `batch` sequences of `seq` tokens each and
/// returns the `(batch·seq) × V` logits node.
pub fn logits_on_tape(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    params: &BoundParams,
    adapters: Option<&BoundAdapters>,
    ids: &[usize],
    batch: usize,
    seq: usize,
) -> Result<NodeId> {
    if seq == 0 || ids.len() != batch * seq {
        return Err(Error::shape(format!(
            "{} ids for batch {batch} of length {seq}",
            ids.len()
        )));
    }
    if seq > cfg.context {
        return Err(Error::InvalidInput(format!(
            "sequence of {seq} tokens exceeds context {}",
            cfg.context
        )));
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.gather(params.get(names::TOK_EMB)?, ids)?;
    let pos = tape.gather(params.get(names::POS_EMB)?, &positions)?;
    let mut h = tape.add(tok, pos)?;
    for l in 0..cfg.layers {
        let a = tape.layer_norm(
            h,
            params.get(&names::ln1_gamma(l))?,
            params.get(&names::ln1_beta(l))?,
        )?;
        let qkv = linear(tape, a, params, adapters, &names::qkv(l))?;
        let att = tape.causal_attention(qkv, batch, seq, cfg.heads)?;
        let o = linear(tape, att, params, adapters, &names::attn_out(l))?;
        h = tape.add(h, o)?;
        let m = tape.layer_norm(
            h,
            params.get(&names::ln2_gamma(l))?,
            params.get(&names::ln2_beta(l))?,
        )?;
        let u = linear(tape, m, params, adapters, &names::mlp_in(l))?;
        let g = tape.gelu(u);
        let d = linear(tape, g, params, adapters, &names::mlp_out(l))?;
        h = tape.add(h, d)?;
    }
    let f = tape.layer_norm(
        h,
        params.get(names::LN_F_GAMMA)?,
        params.get(names::LN_F_BETA)?,
    )?;
    linear(tape, f, params, adapters, names::LM_HEAD)
}

/// Summed cross entropy of a batch; returns the scalar loss node.
pub fn loss_on_tape(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    params: &BoundParams,
    adapters: Option<&BoundAdapters>,
    batch: &Batch,
) -> Result<NodeId> {
    let logits = logits_on_tape(
        tape,
        cfg,
        params,
        adapters,
        &batch.inputs,
        batch.batch,
        batch.seq,
    )?;
    tape.cross_entropy(logits, &batch.targets, &batch.mask)
}
