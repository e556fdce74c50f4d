//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Tape`] is the computation record: every operation appends one node whose
//! inputs all have smaller ids, so the record is acyclic by construction and a
//! single reverse sweep accumulates gradients. Values are held at 64-bit
//! precision; parameters enter as leaves and are narrowed back to 32-bit
//! storage by the optimizer.

use super::linalg::{gemm, log_softmax_into};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A 64-bit working array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(self.shape.clone(), &self.data)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    CausalAttention {
        qkv: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// The computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::shape(format!(
                "leaf shape {shape:?} with {} values",
                data.len()
            )));
        }
        let id = self.push(Array { shape, data }, Op::Leaf, trainable);
        self.nodes[id.0].trainable = trainable;
        Ok(id)
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, data, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    pub fn param_tensor(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.shape().to_vec(), t.to_f64(), true)
            .expect("tensor shapes are valid")
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.shape().to_vec(), t.to_f64(), false)
            .expect("tensor shapes are valid")
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.nodes[id.0].value;
        if v.data.len() != 1 {
            return Err(Error::shape(format!("node {:?} is not scalar", v.shape)));
        }
        Ok(v.data[0])
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn matrix_dims(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let v = &self.nodes[id.0].value;
        if v.shape.len() != 2 {
            return Err(Error::shape(format!("{what}: expected matrix, got {:?}", v.shape)));
        }
        Ok((v.shape[0], v.shape[1]))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dims {m}x{k} vs {kb}x{n} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value.data,
            false,
            &self.nodes[b.0].value.data,
            trans_b,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Array {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(Error::shape(format!("add {:?} vs {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array { shape, data }, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let value = Array {
            shape: v.shape.clone(),
            data: v.data.iter().map(|e| e * factor).collect(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(
            Array {
                shape: vec![1],
                data: vec![s],
            },
            Op::Sum { x },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let value = Array {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| gelu(e)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (rows, d) = (xv.rows(), xv.cols());
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if g.data.len() != d || b.data.len() != d {
            return Err(Error::shape(format!(
                "layer norm width {d} vs gamma {:?} beta {:?}",
                g.shape, b.shape
            )));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g.data[c] + b.data[c];
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Array { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table.0].value;
        let (rows, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidInput(format!(
                    "gather index {id} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Array {
                shape: vec![ids.len(), d],
                data: out,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention.
    ///
    /// `qkv` is `(batch·seq) × 3d` with query, key and value blocks side by
    /// side; each block is split into `heads` contiguous slices. Returns the
    /// `(batch·seq) × d` attention output.
    pub fn causal_attention(
        &mut self,
        qkv: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let v = &self.nodes[qkv.0].value;
        let (n, w) = (v.rows(), v.cols());
        if n != batch * seq || w % 3 != 0 || (w / 3) % heads != 0 {
            return Err(Error::shape(format!(
                "attention input {:?} for batch {batch} seq {seq} heads {heads}",
                v.shape
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        let data = &v.data;
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &data[(b * seq + i) * w + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &data[(b * seq + j) * w + d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[base + i * seq + j] = p;
                        let vj = &data[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            Array {
                shape: vec![n, d],
                data: out,
            },
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Summed token cross entropy over unmasked rows; yields a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape(format!(
                "cross entropy: {n} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::InvalidInput("empty target sequence".into()));
        }
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::InvalidInput(format!(
                    "target id {t} out of range for vocabulary of {vocab}"
                )));
            }
            let row = &lv.data[r * vocab..(r + 1) * vocab];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            log_softmax_into(row, p);
            total -= p[t];
            p.iter_mut().for_each(|x| *x = x.exp());
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Array {
                shape: vec![1],
                data: vec![total],
            },
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(if node.trainable {
                Some(g.unwrap_or_else(|| vec![0.0; node.value.data.len()]))
            } else {
                None
            });
        }
        Ok(Gradients { grads: out })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.rg(id) {
            return None;
        }
        let len = self.nodes[id.0].value.data.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, value: &Array, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = value.shape[1];
                if let Some(ga) = self.accum(grads, a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, &bv.data, !trans_b, ga, 1.0);
                }
                if let Some(gb) = self.accum(grads, b) {
                    if trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, &av.data, false, gb, 1.0);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        gemm(k, m, n, &av.data, true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(acc) = self.accum(grads, id) {
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(acc) = self.accum(grads, x) {
                    acc.iter_mut().zip(g).for_each(|(p, y)| *p += factor * y);
                }
            }
            Op::Sum { x } => {
                if let Some(acc) = self.accum(grads, x) {
                    acc.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[x.0].value.data;
                if let Some(acc) = self.accum(grads, x) {
                    for ((p, &xe), &ge) in acc.iter_mut().zip(xv).zip(g) {
                        *p += ge * gelu_grad(xe);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let d = value.cols();
                let rows = value.rows();
                if let Some(gg) = self.accum(grads, gamma) {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, beta) {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                let gamma_v = &self.nodes[gamma.0].value.data;
                if let Some(gx) = self.accum(grads, x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            let v = g[r * d + c] * gamma_v[c];
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ref ids } => {
                let d = value.cols();
                if let Some(gt) = self.accum(grads, table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, s)| *p += s);
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                ref probs,
            } => {
                let data = &self.nodes[qkv.0].value.data;
                let w = self.nodes[qkv.0].value.cols();
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let Some(gq) = self.accum(grads, qkv) else { return };
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let go = &g[(b * seq + i) * d + h * dh..][..dh];
                            let p = &probs[base + i * seq..][..seq];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                let vj = &data[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                                dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dot += p[j] * dp[j];
                                let gvj = &mut gq[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                                for (gv, &o) in gvj.iter_mut().zip(go) {
                                    *gv += p[j] * o;
                                }
                            }
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let qrow = (b * seq + i) * w + h * dh;
                                let krow = (b * seq + j) * w + d + h * dh;
                                for c in 0..dh {
                                    let kc = data[krow + c];
                                    let qc = data[qrow + c];
                                    gq[qrow + c] += ds * kc;
                                    gq[krow + c] += ds * qc;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                ref mask,
                ref probs,
            } => {
                let vocab = self.nodes[logits.0].value.cols();
                if let Some(gl) = self.accum(grads, logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let dst = &mut gl[r * vocab..(r + 1) * vocab];
                        for (dv, &pv) in dst.iter_mut().zip(p) {
                            *dv += g[0] * pv;
                        }
                        dst[t] -= g[0];
                    }
                }
            }
        }
    }
}

/// Gradients of trainable leaves, keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a trainable leaf; zero-filled if the loss never touched it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_product_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let w = tape.param(vec![1, 3], vec![0.5, -2.0, 1.0]).unwrap();
        let v = tape.constant(vec![3, 1], vec![4.0, 5.0, -6.0]).unwrap();
        let loss = tape.matmul(w, v, false).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 2.0 - 10.0 - 6.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[4.0, 5.0, -6.0]);
        assert!(grads.get(v).is_none());
    }

    #[test]
    fn untouched_leaf_gets_zero() {
        let mut tape = Tape::new();
        let used = tape.param(vec![2], vec![1.0, 2.0]).unwrap();
        let unused = tape.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(used).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_first_position_copies_value() {
        // with one visible key the output is exactly v_0
        let mut tape = Tape::new();
        let qkv = tape
            .constant(vec![1, 6], vec![0.3, -0.1, 0.7, 0.2, 5.0, -4.0])
            .unwrap();
        let out = tape.causal_attention(qkv, 1, 1, 1).unwrap();
        assert_eq!(tape.value(out).data, vec![5.0, -4.0]);
    }
}
