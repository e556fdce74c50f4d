//! Greedy and beam-search decoding, and windowed perplexity.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::infer::{Decoder, KvCache};
use super::{ModelWeights, EOS, NL};
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::numerics::linalg::log_softmax_into;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// `<eos>` always stops; `<nl>` stops only when this is set.
    pub stop_on_newline: bool,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            strategy: Strategy::Beam,
            beam_width: 4,
            max_new_tokens: 32,
            stop_on_newline: true,
        }
    }
}

impl GenerationSettings {
    pub fn greedy() -> Self {
        GenerationSettings {
            strategy: Strategy::Greedy,
            ..GenerationSettings::default()
        }
    }

    pub fn beam(width: usize) -> Self {
        GenerationSettings {
            strategy: Strategy::Beam,
            beam_width: width,
            ..GenerationSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }

    fn is_stop(&self, tok: usize) -> bool {
        tok == EOS || (self.stop_on_newline && tok == NL)
    }
}

fn check_prompt(dec: &Decoder, prompt: &[usize]) -> Result<usize> {
    if prompt.is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let ctx = dec.config().context;
    if prompt.len() > ctx {
        return Err(Error::InvalidInput(format!(
            "prompt of {} tokens exceeds context {ctx}",
            prompt.len()
        )));
    }
    Ok(ctx - prompt.len() + 1)
}

fn log_probs(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, &mut out);
    out
}

/// Appends the argmax token (lowest id on ties) until a stop token, the
/// token budget or the context limit. The stop token is not returned.
pub fn greedy_decode(
    dec: &Decoder,
    prompt: &[usize],
    settings: &GenerationSettings,
) -> Result<Vec<usize>> {
    let max_steps = check_prompt(dec, prompt)?.min(settings.max_new_tokens);
    let mut caches = [dec.new_cache()];
    let entries: Vec<_> = prompt.iter().map(|&t| (0, t)).collect();
    let mut logits = dec.feed(&mut caches, &entries, false)?;
    let mut out = Vec::new();
    for step in 0..max_steps {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if settings.is_stop(best) {
            break;
        }
        out.push(best);
        if step + 1 < max_steps {
            logits = dec.feed(&mut caches, &[(0, best)], false)?;
        }
    }
    Ok(out)
}

struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    cache: KvCache,
    log_probs: Vec<f64>,
}

/// Higher score first, then lexicographically smaller sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search over summed log-probabilities without length normalization.
///
/// A candidate that ends in a stop token leaves the beam as a finished
/// hypothesis. The best finished hypothesis wins, else the best live one.
pub fn beam_decode(
    dec: &Decoder,
    prompt: &[usize],
    settings: &GenerationSettings,
) -> Result<Vec<usize>> {
    settings.validate()?;
    let width = settings.beam_width;
    let max_steps = check_prompt(dec, prompt)?.min(settings.max_new_tokens);
    let mut root = [dec.new_cache()];
    let entries: Vec<_> = prompt.iter().map(|&t| (0, t)).collect();
    let logits = dec.feed(&mut root, &entries, false)?;
    let [cache] = root;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        cache,
        log_probs: log_probs(&logits),
    }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();

    for step in 0..max_steps {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let mut ids: Vec<usize> = (0..h.log_probs.len()).collect();
            let by = |&a: &usize, &b: &usize| h.log_probs[b].total_cmp(&h.log_probs[a]).then(a.cmp(&b));
            if ids.len() > width {
                ids.select_nth_unstable_by(width - 1, by);
                ids.truncate(width);
            }
            for t in ids {
                let mut seq = h.tokens.clone();
                seq.push(t);
                cands.push((h.score + h.log_probs[t], seq, hi));
            }
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(width);

        let mut next: Vec<(Vec<usize>, f64, usize)> = Vec::new();
        for (score, seq, parent) in cands {
            if settings.is_stop(*seq.last().expect("nonempty")) {
                finished.push((score, seq));
            } else {
                next.push((seq, score, parent));
            }
        }
        if next.is_empty() {
            live.clear();
            break;
        }
        let extend = step + 1 < max_steps;
        let mut caches: Vec<KvCache> = next.iter().map(|n| live[n.2].cache.clone()).collect();
        let logits = if extend {
            let entries: Vec<_> = next
                .iter()
                .enumerate()
                .map(|(i, n)| (i, *n.0.last().expect("nonempty")))
                .collect();
            dec.feed(&mut caches, &entries, false)?
        } else {
            Vec::new()
        };
        let v = dec.vocab_size();
        live = next
            .into_iter()
            .zip(caches)
            .enumerate()
            .map(|(i, ((tokens, score, _), cache))| Hyp {
                tokens,
                score,
                cache,
                log_probs: if extend {
                    log_probs(&logits[i * v..(i + 1) * v])
                } else {
                    Vec::new()
                },
            })
            .collect();
        // live scores never increase, so a strictly better finished one is final
        let best_done = finished.iter().map(|f| f.0).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_done > best_live {
            break;
        }
    }

    let pick = if !finished.is_empty() {
        finished.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        let (_, mut seq) = finished.swap_remove(0);
        seq.pop();
        seq
    } else {
        live.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
        live.into_iter().next().map(|h| h.tokens).unwrap_or_default()
    };
    Ok(pick)
}

/// Dispatches on `settings.strategy`.
pub fn decode(dec: &Decoder, prompt: &[usize], settings: &GenerationSettings) -> Result<Vec<usize>> {
    match settings.strategy {
        Strategy::Greedy => greedy_decode(dec, prompt, settings),
        Strategy::Beam => beam_decode(dec, prompt, settings),
    }
}

pub fn greedy_generate(
    weights: &ModelWeights,
    adapters: Option<&AdapterSet>,
    prompt: &[usize],
    settings: &GenerationSettings,
) -> Result<Vec<usize>> {
    greedy_decode(&Decoder::new(weights, adapters)?, prompt, settings)
}

pub fn beam_generate(
    weights: &ModelWeights,
    adapters: Option<&AdapterSet>,
    prompt: &[usize],
    settings: &GenerationSettings,
) -> Result<Vec<usize>> {
    beam_decode(&Decoder::new(weights, adapters)?, prompt, settings)
}

/// Summed negative log-likelihood and predicted-token count of a stream,
/// scored in non-overlapping context-length windows. The first token of each
/// window is conditioning only.
pub fn stream_nll(dec: &Decoder, stream: &[usize]) -> Result<(f64, usize)> {
    if stream.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "perplexity needs at least 2 tokens, got {}",
            stream.len()
        )));
    }
    let v = dec.vocab_size();
    let mut lp = vec![0.0; v];
    let mut total = 0.0;
    let mut count = 0;
    for window in stream.chunks(dec.config().context) {
        if window.len() < 2 {
            continue;
        }
        let logits = dec.logits(&window[..window.len() - 1])?;
        for (i, &t) in window[1..].iter().enumerate() {
            log_softmax_into(&logits[i * v..(i + 1) * v], &mut lp);
            total -= lp[t];
            count += 1;
        }
    }
    Ok((total, count))
}

/// `exp` of the mean per-token negative log-likelihood over a stream.
pub fn perplexity_of(dec: &Decoder, stream: &[usize]) -> Result<f64> {
    let (nll, n) = stream_nll(dec, stream)?;
    let ppl = (nll / n as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric("perplexity overflowed".into()));
    }
    Ok(ppl)
}

pub fn perplexity(
    weights: &ModelWeights,
    adapters: Option<&AdapterSet>,
    stream: &[usize],
) -> Result<f64> {
    perplexity_of(&Decoder::new(weights, adapters)?, stream)
}
