//! Low-rank adapters on frozen weight matrices.
//!
//! An adapter on a `d × k` matrix `W0` holds `B` (`d × r`) and `A`
//! (`r × k`); the adapted matrix acts as `W0 + (alpha/r)·B·A`. Base weights
//! are never written by anything in this module: merging returns a copy.

mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundAdapters, BoundLora, MatrixRole, ModelWeights};
use crate::numerics::linalg::gemm;
use crate::numerics::{NodeId, Rng, Tape, Tensor};

pub use store::{load_adapters, load_adapters_for, save_adapters, ADAPTER_FORMAT};

/// Roles adapted unless configured otherwise.
pub const DEFAULT_ROLES: [MatrixRole; 2] = [MatrixRole::MlpIn, MatrixRole::MlpOut];
pub const DEFAULT_RANK: usize = 8;
const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    target: String,
    a: Tensor,
    b: Tensor,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    /// `a` is `r × k` and `b` is `d × r`.
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let target = target.into();
        if !a.is_matrix() || !b.is_matrix() {
            return Err(Error::shape(format!("adapter `{target}` factors must be matrices")));
        }
        let rank = a.shape()[0];
        if b.shape()[1] != rank {
            return Err(Error::shape(format!(
                "adapter `{target}`: A is {:?} but B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!("adapter alpha must be positive, got {alpha}")));
        }
        Ok(LoraAdapter {
            target,
            a,
            b,
            rank,
            alpha,
        })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Shape `[d, k]` of the adapted matrix.
    pub fn target_shape(&self) -> [usize; 2] {
        [self.b.shape()[0], self.a.shape()[1]]
    }

    /// `ΔW = (alpha/rank)·B·A` in 64-bit precision, row-major `d × k`.
    pub fn delta(&self) -> Vec<f64> {
        let [d, k] = self.target_shape();
        let mut out = vec![0.0; d * k];
        gemm(d, self.rank, k, &self.b.to_f64(), false, &self.a.to_f64(), false, &mut out, 0.0);
        let s = self.scale();
        out.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// Where an adapter set came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
}

/// One adapter per target, all sharing a rank and alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: BTreeMap<String, LoraAdapter>,
    rank: usize,
    alpha: f64,
    pub provenance: Provenance,
}

impl AdapterSet {
    pub fn new(adapters: Vec<LoraAdapter>, provenance: Provenance) -> Result<Self> {
        let first = adapters
            .first()
            .ok_or_else(|| Error::InvalidInput("adapter set has no targets".into()))?;
        let (rank, alpha) = (first.rank, first.alpha);
        let mut map = BTreeMap::new();
        for ad in adapters {
            if ad.rank != rank || ad.alpha != alpha {
                return Err(Error::InvalidInput(format!(
                    "adapter `{}` has rank {} alpha {}, set uses rank {rank} alpha {alpha}",
                    ad.target, ad.rank, ad.alpha
                )));
            }
            let name = ad.target.clone();
            if map.insert(name.clone(), ad).is_some() {
                return Err(Error::InvalidInput(format!("two adapters target `{name}`")));
            }
        }
        Ok(AdapterSet {
            adapters: map,
            rank,
            alpha,
            provenance,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    /// Adapters in target-name order.
    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    /// Each target must exist in `weights` with an adaptable role and the
    /// adapter's shape.
    pub fn check_targets(&self, weights: &ModelWeights) -> Result<()> {
        for ad in self.iter() {
            let t = weights
                .get(&ad.target)
                .map_err(|_| Error::MissingTensor(ad.target.clone()))?;
            let role = weights.role(&ad.target).expect("present");
            if !role.is_adaptable() {
                return Err(Error::InvalidInput(format!(
                    "tensor `{}` has role {role}, which cannot carry an adapter",
                    ad.target
                )));
            }
            if t.shape() != ad.target_shape() {
                return Err(Error::shape(format!(
                    "adapter `{}` expects {:?}, model tensor is {:?}",
                    ad.target,
                    ad.target_shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Factor tensors as `[A, B]` per adapter, in target-name order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.adapters.values().flat_map(|a| [&a.a, &a.b]).collect()
    }

    /// Mutable factors in the order of [`AdapterSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .values_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    /// Places the factors on a tape; returns bindings plus leaf ids in
    /// [`AdapterSet::tensors`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (BoundAdapters, Vec<NodeId>) {
        let mut bound = BoundAdapters::new();
        let mut ids = Vec::with_capacity(2 * self.len());
        for ad in self.iter() {
            let (a, b) = if trainable {
                (tape.param_tensor(&ad.a), tape.param_tensor(&ad.b))
            } else {
                (tape.constant_tensor(&ad.a), tape.constant_tensor(&ad.b))
            };
            ids.push(a);
            ids.push(b);
            bound.insert(
                ad.target.clone(),
                BoundLora {
                    a,
                    b,
                    scale: ad.scale(),
                },
            );
        }
        (bound, ids)
    }

    pub fn check_finite(&self) -> Result<()> {
        for ad in self.iter() {
            ad.a.check_finite(&format!("{}.A", ad.target))?;
            ad.b.check_finite(&format!("{}.B", ad.target))?;
        }
        Ok(())
    }
}

/// Fresh adapters on every tensor whose role is in `roles`: `A` Gaussian,
/// `B` zero, so the adapted model starts equal to the base model.
pub fn init_adapters(
    weights: &ModelWeights,
    roles: &[MatrixRole],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(Error::InvalidInput("adapter rank must be positive".into()));
    }
    if let Some(r) = roles.iter().find(|r| !r.is_adaptable()) {
        return Err(Error::InvalidInput(format!("role {r} cannot carry an adapter")));
    }
    let targets = weights.names_with_roles(roles);
    if targets.is_empty() {
        return Err(Error::InvalidInput("no tensors match the adapter roles".into()));
    }
    let mut rng = Rng::derived(seed, "adapter-init");
    let mut out = Vec::with_capacity(targets.len());
    for name in targets {
        let t = weights.get(name)?;
        let (d, k) = (t.shape()[0], t.shape()[1]);
        if rank > d.min(k) {
            return Err(Error::InvalidInput(format!(
                "rank {rank} exceeds min({d}, {k}) for `{name}`"
            )));
        }
        let a_data = (0..rank * k).map(|_| rng.normal(0.0, A_INIT_STD) as f32).collect();
        let a = Tensor::new(vec![rank, k], a_data)?;
        let b = Tensor::zeros(&[d, rank]);
        out.push(LoraAdapter::new(name, a, b, alpha)?);
    }
    AdapterSet::new(out, Provenance::default())
}

/// `h = W0·v + (alpha/rank)·B·(A·v)`.
pub fn adapted_matvec(w0: &Tensor, adapter: &LoraAdapter, v: &[f32]) -> Result<Vec<f32>> {
    if !w0.is_matrix() || w0.shape() != adapter.target_shape() {
        return Err(Error::shape(format!(
            "W0 {:?} does not match adapter target {:?}",
            w0.shape(),
            adapter.target_shape()
        )));
    }
    let [d, k] = adapter.target_shape();
    if v.len() != k {
        return Err(Error::shape(format!("vector of {} for a {d}x{k} matrix", v.len())));
    }
    let v64: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let mut h = vec![0.0; d];
    gemm(d, k, 1, &w0.to_f64(), false, &v64, false, &mut h, 0.0);
    let mut av = vec![0.0; adapter.rank];
    gemm(adapter.rank, k, 1, &adapter.a.to_f64(), false, &v64, false, &mut av, 0.0);
    let mut bav = vec![0.0; d];
    gemm(d, adapter.rank, 1, &adapter.b.to_f64(), false, &av, false, &mut bav, 0.0);
    let s = adapter.scale();
    Ok(h.iter().zip(&bav).map(|(x, y)| (x + s * y) as f32).collect())
}

/// Copy of `weights` with every target replaced by `W0 + ΔW`.
pub fn merge(weights: &ModelWeights, set: &AdapterSet) -> Result<ModelWeights> {
    set.check_targets(weights)?;
    let mut out = weights.clone();
    for ad in set.iter() {
        let w0 = weights.get(&ad.target)?;
        let delta = ad.delta();
        let merged: Vec<f64> = w0
            .data()
            .iter()
            .zip(&delta)
            .map(|(&w, d)| f64::from(w) + d)
            .collect();
        out.set(&ad.target, Tensor::from_f64(w0.shape().to_vec(), &merged)?)?;
    }
    Ok(out)
}

/// The same adapters with `B` negated, so the effective update is `−ΔW`.
pub fn negate(set: &AdapterSet) -> AdapterSet {
    scale(set, -1.0)
}

/// The same adapters with `B` multiplied by `factor`, so the effective
/// update is `factor · ΔW`.
pub fn scale(set: &AdapterSet, factor: f64) -> AdapterSet {
    let mut out = set.clone();
    for ad in out.adapters.values_mut() {
        ad.b = ad.b.scale(factor as f32);
    }
    out
}

/// An adapter set read as the task vector `τ = θ_ft − θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector(pub AdapterSet);

impl TaskVector {
    /// Weights `θ − τ`.
    pub fn subtract_from(&self, weights: &ModelWeights) -> Result<ModelWeights> {
        merge(weights, &negate(&self.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, names, TransformerConfig};

    fn one_by_one(w0: f32, b: f32, a: f32) -> (Tensor, LoraAdapter) {
        let w = Tensor::new(vec![1, 1], vec![w0]).unwrap();
        let ad = LoraAdapter::new(
            "m",
            Tensor::new(vec![1, 1], vec![a]).unwrap(),
            Tensor::new(vec![1, 1], vec![b]).unwrap(),
            1.0,
        )
        .unwrap();
        (w, ad)
    }

    #[test]
    fn hand_arithmetic() {
        let (w, ad) = one_by_one(2.0, 3.0, 4.0);
        assert_eq!(adapted_matvec(&w, &ad, &[1.0]).unwrap(), vec![14.0]);
        assert_eq!(adapted_matvec(&w, &ad, &[0.0]).unwrap(), vec![0.0]);
        let (w, zero) = one_by_one(2.0, 0.0, 4.0);
        assert_eq!(adapted_matvec(&w, &zero, &[1.5]).unwrap(), vec![3.0]);
        assert!(adapted_matvec(&w, &ad, &[1.0, 2.0]).is_err());
    }

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            mlp_hidden: 12,
            context: 6,
            vocab_size: 10,
        }
    }

    #[test]
    fn init_counts_and_identity() {
        let w = ModelWeights::init(cfg(), 1).unwrap();
        let set = init_adapters(&w, &DEFAULT_ROLES, 4, 4.0, 2).unwrap();
        assert_eq!(set.len(), 4);
        let ids = [1, 5, 7];
        assert_eq!(
            forward_logits(&w, None, &ids).unwrap(),
            forward_logits(&w, Some(&set), &ids).unwrap()
        );
        assert_eq!(merge(&w, &set).unwrap(), w);
        assert_eq!(negate(&negate(&set)), set);
        assert!(init_adapters(&w, &DEFAULT_ROLES, 9, 9.0, 2).is_err());
        assert!(init_adapters(&w, &[], 4, 4.0, 2).is_err());
        assert!(init_adapters(&w, &[MatrixRole::Norm], 4, 4.0, 2).is_err());
    }

    #[test]
    fn double_merge_shifts_twice() {
        let (w, ad) = one_by_one(2.0, 3.0, 4.0);
        let delta = ad.delta();
        assert_eq!(delta, vec![12.0]);
        let neg = negate(&AdapterSet::new(vec![ad], Provenance::default()).unwrap());
        let back = neg.get("m").unwrap();
        let h = adapted_matvec(&w, back, &[1.0]).unwrap();
        assert_eq!(h, vec![-10.0]);
    }

    #[test]
    fn merge_names_missing_target() {
        let w = ModelWeights::init(cfg(), 1).unwrap();
        let ad = LoraAdapter::new(
            "layers.9.mlp.in",
            Tensor::zeros(&[2, 8]),
            Tensor::zeros(&[12, 2]),
            2.0,
        )
        .unwrap();
        let set = AdapterSet::new(vec![ad], Provenance::default()).unwrap();
        assert!(matches!(merge(&w, &set), Err(Error::MissingTensor(n)) if n == "layers.9.mlp.in"));
        let wrong_role = LoraAdapter::new(
            names::TOK_EMB,
            Tensor::zeros(&[2, 8]),
            Tensor::zeros(&[10, 2]),
            2.0,
        )
        .unwrap();
        let set = AdapterSet::new(vec![wrong_role], Provenance::default()).unwrap();
        assert!(merge(&w, &set).is_err());
    }
}
