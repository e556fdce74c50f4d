//! Inference-time decoder with per-sequence key/value caches.
//!
//! Weights are widened to 64 bits once at construction. Adapters stay
//! factored, so an all-zero `B` contributes an exact zero to every output.

use super::weights::names;
use super::{ModelWeights, TransformerConfig};
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::numerics::linalg::{gemm, log_softmax_into};
use crate::numerics::{gelu, Tensor, LN_EPS};

#[derive(Debug, Clone)]
struct Lora {
    rank: usize,
    scale: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Linear {
    out: usize,
    inp: usize,
    w: Vec<f64>,
    lora: Option<Lora>,
}

impl Linear {
    fn new(weights: &ModelWeights, adapters: Option<&AdapterSet>, name: &str) -> Result<Self> {
        let t = weights.get(name)?;
        let (out, inp) = (t.shape()[0], t.shape()[1]);
        let lora = match adapters.and_then(|s| s.get(name)) {
            None => None,
            Some(ad) => {
                if ad.a().shape() != [ad.rank(), inp] || ad.b().shape() != [out, ad.rank()] {
                    return Err(Error::shape(format!(
                        "adapter for `{name}` has A {:?} and B {:?} but target is {out}x{inp}",
                        ad.a().shape(),
                        ad.b().shape()
                    )));
                }
                Some(Lora {
                    rank: ad.rank(),
                    scale: ad.scale(),
                    a: ad.a().to_f64(),
                    b: ad.b().to_f64(),
                })
            }
        };
        Ok(Linear {
            out,
            inp,
            w: t.to_f64(),
            lora,
        })
    }

    /// `Y = X·Wᵀ + s·(X·Aᵀ)·Bᵀ` for `rows` input rows.
    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.out];
        gemm(rows, self.inp, self.out, x, false, &self.w, true, &mut y, 0.0);
        if let Some(l) = &self.lora {
            let mut xa = vec![0.0; rows * l.rank];
            gemm(rows, self.inp, l.rank, x, false, &l.a, true, &mut xa, 0.0);
            let mut d = vec![0.0; rows * self.out];
            gemm(rows, l.rank, self.out, &xa, false, &l.b, true, &mut d, 0.0);
            for (yv, dv) in y.iter_mut().zip(&d) {
                *yv += l.scale * dv;
            }
        }
        y
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl Norm {
    fn new(weights: &ModelWeights, gamma: &str, beta: &str) -> Result<Self> {
        Ok(Norm {
            gamma: weights.get(gamma)?.to_f64(),
            beta: weights.get(beta)?.to_f64(),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.gamma.len();
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..d {
                o[c] = (row[c] - mean) * rs * self.gamma[c] + self.beta[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    mlp_in: Linear,
    mlp_out: Linear,
}

/// Keys and values of the tokens already fed for one sequence.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Compiled decoder for evaluation and generation.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: TransformerConfig,
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
}

impl Decoder {
    pub fn new(weights: &ModelWeights, adapters: Option<&AdapterSet>) -> Result<Self> {
        if let Some(set) = adapters {
            set.check_targets(weights)?;
        }
        let cfg = *weights.config();
        let blocks = (0..cfg.layers)
            .map(|l| {
                Ok(Block {
                    ln1: Norm::new(weights, &names::ln1_gamma(l), &names::ln1_beta(l))?,
                    qkv: Linear::new(weights, adapters, &names::qkv(l))?,
                    out: Linear::new(weights, adapters, &names::attn_out(l))?,
                    ln2: Norm::new(weights, &names::ln2_gamma(l), &names::ln2_beta(l))?,
                    mlp_in: Linear::new(weights, adapters, &names::mlp_in(l))?,
                    mlp_out: Linear::new(weights, adapters, &names::mlp_out(l))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            cfg,
            tok_emb: weights.get(names::TOK_EMB)?.to_f64(),
            pos_emb: weights.get(names::POS_EMB)?.to_f64(),
            blocks,
            ln_f: Norm::new(weights, names::LN_F_GAMMA, names::LN_F_BETA)?,
            head: Linear::new(weights, adapters, names::LM_HEAD)?,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            len: 0,
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
        }
    }

    /// Feeds `(cache index, token)` entries and returns logits row-major.
    ///
    /// Entries for the same cache are consecutive positions in entry order.
    /// With `all_logits` every entry yields a row; otherwise only the last
    /// entry of each touched cache does, in entry order.
    pub fn feed(
        &self,
        caches: &mut [KvCache],
        entries: &[(usize, usize)],
        all_logits: bool,
    ) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let n = entries.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut next_pos: Vec<usize> = caches.iter().map(|c| c.len).collect();
        let mut positions = Vec::with_capacity(n);
        let mut x = vec![0.0; n * d];
        for (r, &(c, tok)) in entries.iter().enumerate() {
            if c >= caches.len() {
                return Err(Error::InvalidInput(format!("cache index {c} out of range")));
            }
            if tok >= v {
                return Err(Error::InvalidInput(format!(
                    "token id {tok} out of range for vocabulary of {v}"
                )));
            }
            let p = next_pos[c];
            if p >= self.cfg.context {
                return Err(Error::InvalidInput(format!(
                    "sequence exceeds context length {}",
                    self.cfg.context
                )));
            }
            next_pos[c] += 1;
            positions.push(p);
            let row = &mut x[r * d..(r + 1) * d];
            let te = &self.tok_emb[tok * d..(tok + 1) * d];
            let pe = &self.pos_emb[p * d..(p + 1) * d];
            for ((o, a), b) in row.iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }

        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; self.cfg.context];
        for (l, blk) in self.blocks.iter().enumerate() {
            let a = blk.ln1.apply(&x);
            let qkv = blk.qkv.apply(&a, n);
            for (r, &(c, _)) in entries.iter().enumerate() {
                let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
                caches[c].keys[l].extend_from_slice(&row[d..2 * d]);
                caches[c].values[l].extend_from_slice(&row[2 * d..]);
            }
            let mut att = vec![0.0; n * d];
            for (r, &(c, _)) in entries.iter().enumerate() {
                let p = positions[r];
                let keys = &caches[c].keys[l];
                let vals = &caches[c].values[l];
                for h in 0..heads {
                    let q = &qkv[r * 3 * d + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=p {
                        let k = &keys[j * d + h * dh..][..dh];
                        let s = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(p + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let o = &mut att[r * d + h * dh..][..dh];
                    for j in 0..=p {
                        let w = scores[j] / z;
                        let vj = &vals[j * d + h * dh..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
            }
            let o = blk.out.apply(&att, n);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let m = blk.ln2.apply(&x);
            let mut u = blk.mlp_in.apply(&m, n);
            u.iter_mut().for_each(|e| *e = gelu(*e));
            let dn = blk.mlp_out.apply(&u, n);
            x.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
        }
        for (c, cache) in caches.iter_mut().enumerate() {
            cache.len = next_pos[c];
        }

        let rows: Vec<usize> = if all_logits {
            (0..n).collect()
        } else {
            (0..n)
                .filter(|&r| entries[r + 1..].iter().all(|&(c, _)| c != entries[r].0))
                .collect()
        };
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            sel.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        let f = self.ln_f.apply(&sel);
        let logits = self.head.apply(&f, rows.len());
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Logits for every position of `ids`, as a `T × V` array.
    pub fn logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if ids.len() > self.cfg.context {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds context {}",
                ids.len(),
                self.cfg.context
            )));
        }
        let mut caches = [self.new_cache()];
        let entries: Vec<_> = ids.iter().map(|&t| (0, t)).collect();
        self.feed(&mut caches, &entries, true)
    }

    /// Summed `-log p` of `continuation` given `prompt`.
    pub fn continuation_nll(&self, prompt: &[usize], continuation: &[usize]) -> Result<f64> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        let full: Vec<usize> = prompt.iter().chain(continuation).copied().collect();
        let logits = self.logits(&full[..full.len() - 1])?;
        let v = self.cfg.vocab_size;
        let mut lp = vec![0.0; v];
        let mut total = 0.0;
        for (i, &t) in continuation.iter().enumerate() {
            let row = prompt.len() - 1 + i;
            log_softmax_into(&logits[row * v..(row + 1) * v], &mut lp);
            total -= lp[t];
        }
        Ok(total)
    }
}

/// `T × V` logits of a causal decoder, optionally with adapters.
pub fn forward_logits(
    weights: &ModelWeights,
    adapters: Option<&AdapterSet>,
    ids: &[usize],
) -> Result<Tensor> {
    let dec = Decoder::new(weights, adapters)?;
    let logits = dec.logits(ids)?;
    Tensor::from_f64(vec![ids.len(), dec.vocab_size()], &logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::graph::{logits_on_tape, BoundParams};
    use crate::numerics::Tape;

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            mlp_hidden: 12,
            context: 7,
            vocab_size: 10,
        }
    }

    #[test]
    fn matches_tape_forward() {
        let w = ModelWeights::init(cfg(), 5).unwrap();
        let ids = [1, 4, 9, 3, 3];
        let dec = Decoder::new(&w, None).unwrap();
        let fast = dec.logits(&ids).unwrap();
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &w, false);
        let node = logits_on_tape(&mut tape, &cfg(), &p, None, &ids, 1, ids.len()).unwrap();
        let slow = &tape.value(node).data;
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn incremental_feed_matches_block() {
        let w = ModelWeights::init(cfg(), 6).unwrap();
        let dec = Decoder::new(&w, None).unwrap();
        let ids = [2, 7, 5, 1];
        let full = dec.logits(&ids).unwrap();
        let mut caches = [dec.new_cache(), dec.new_cache()];
        dec.feed(&mut caches, &[(0, 2), (0, 7), (1, 2)], false).unwrap();
        let step = dec.feed(&mut caches, &[(1, 7), (0, 5)], false).unwrap();
        let v = dec.vocab_size();
        for c in 0..v {
            assert!((step[c] - full[v + c]).abs() < 1e-10);
            assert!((step[v + c] - full[2 * v + c]).abs() < 1e-10);
        }
        assert_eq!(caches[0].len(), 3);
    }

    #[test]
    fn context_and_range_errors() {
        let w = ModelWeights::init(cfg(), 6).unwrap();
        assert!(forward_logits(&w, None, &[1; 8]).is_err());
        assert!(forward_logits(&w, None, &[]).is_err());
        assert!(forward_logits(&w, None, &[10]).is_err());
        let t = forward_logits(&w, None, &[1, 2, 3]).unwrap();
        assert_eq!(t.shape(), &[3, 10]);
    }

    #[test]
    fn continuation_nll_matches_logits() {
        let w = ModelWeights::init(cfg(), 8).unwrap();
        let dec = Decoder::new(&w, None).unwrap();
        let logits = dec.logits(&[1, 4, 6]).unwrap();
        let v = dec.vocab_size();
        let mut expected = 0.0;
        for (row, t) in [(1usize, 6usize), (2, 8)] {
            let r = &logits[row * v..(row + 1) * v];
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            expected += z.ln() - r[t];
        }
        let got = dec.continuation_nll(&[1, 4], &[6, 8]).unwrap();
        assert!((got - expected).abs() < 1e-10);
    }
}
