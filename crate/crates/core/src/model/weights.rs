use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Function of a tensor inside the decoder; fixed when the tensor is created.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixRole {
    Embedding,
    Positional,
    AttnQkv,
    AttnOut,
    MlpIn,
    MlpOut,
    Norm,
    LmHead,
}

impl MatrixRole {
    pub const ALL: [MatrixRole; 8] = [
        MatrixRole::Embedding,
        MatrixRole::Positional,
        MatrixRole::AttnQkv,
        MatrixRole::AttnOut,
        MatrixRole::MlpIn,
        MatrixRole::MlpOut,
        MatrixRole::Norm,
        MatrixRole::LmHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixRole::Embedding => "embedding",
            MatrixRole::Positional => "positional",
            MatrixRole::AttnQkv => "attn-qkv",
            MatrixRole::AttnOut => "attn-out",
            MatrixRole::MlpIn => "mlp-in",
            MatrixRole::MlpOut => "mlp-out",
            MatrixRole::Norm => "norm",
            MatrixRole::LmHead => "lm-head",
        }
    }

    /// Roles whose matrices act as `h = W·v` inside a block.
    pub fn is_adaptable(self) -> bool {
        matches!(
            self,
            MatrixRole::AttnQkv | MatrixRole::AttnOut | MatrixRole::MlpIn | MatrixRole::MlpOut
        )
    }
}

impl fmt::Display for MatrixRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical tensor names.
pub mod names {
    pub const TOK_EMB: &str = "tok_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const LN_F_GAMMA: &str = "ln_f.gamma";
    pub const LN_F_BETA: &str = "ln_f.beta";
    pub const LM_HEAD: &str = "lm_head";

    pub fn ln1_gamma(l: usize) -> String {
        format!("layers.{l}.ln1.gamma")
    }
    pub fn ln1_beta(l: usize) -> String {
        format!("layers.{l}.ln1.beta")
    }
    pub fn qkv(l: usize) -> String {
        format!("layers.{l}.attn.qkv")
    }
    pub fn attn_out(l: usize) -> String {
        format!("layers.{l}.attn.out")
    }
    pub fn ln2_gamma(l: usize) -> String {
        format!("layers.{l}.ln2.gamma")
    }
    pub fn ln2_beta(l: usize) -> String {
        format!("layers.{l}.ln2.beta")
    }
    pub fn mlp_in(l: usize) -> String {
        format!("layers.{l}.mlp.in")
    }
    pub fn mlp_out(l: usize) -> String {
        format!("layers.{l}.mlp.out")
    }
}

/// Expected `(name, role, shape)` of every tensor, in storage order.
pub fn layout(cfg: &TransformerConfig) -> Vec<(String, MatrixRole, Vec<usize>)> {
    let (d, h, v) = (cfg.d_model, cfg.mlp_hidden, cfg.vocab_size);
    let mut out = vec![
        (names::TOK_EMB.to_string(), MatrixRole::Embedding, vec![v, d]),
        (names::POS_EMB.to_string(), MatrixRole::Positional, vec![cfg.context, d]),
    ];
    for l in 0..cfg.layers {
        out.push((names::ln1_gamma(l), MatrixRole::Norm, vec![d]));
        out.push((names::ln1_beta(l), MatrixRole::Norm, vec![d]));
        out.push((names::qkv(l), MatrixRole::AttnQkv, vec![3 * d, d]));
        out.push((names::attn_out(l), MatrixRole::AttnOut, vec![d, d]));
        out.push((names::ln2_gamma(l), MatrixRole::Norm, vec![d]));
        out.push((names::ln2_beta(l), MatrixRole::Norm, vec![d]));
        out.push((names::mlp_in(l), MatrixRole::MlpIn, vec![h, d]));
        out.push((names::mlp_out(l), MatrixRole::MlpOut, vec![d, h]));
    }
    out.push((names::LN_F_GAMMA.to_string(), MatrixRole::Norm, vec![d]));
    out.push((names::LN_F_BETA.to_string(), MatrixRole::Norm, vec![d]));
    out.push((names::LM_HEAD.to_string(), MatrixRole::LmHead, vec![v, d]));
    out
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    name: String,
    role: MatrixRole,
    tensor: Tensor,
}

impl WeightEntry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> MatrixRole {
        self.role
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Named, role-tagged parameter registry of one decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: TransformerConfig,
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
}

impl ModelWeights {
    /// Gaussian(0, 0.02²) matrices and unit-gain, zero-shift norms.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derived(seed, "model-init");
        let entries = layout(&config)
            .into_iter()
            .map(|(name, role, shape)| {
                let numel: usize = shape.iter().product();
                let data = if role == MatrixRole::Norm {
                    let fill = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
                    vec![fill; numel]
                } else {
                    (0..numel).map(|_| rng.normal(0.0, INIT_STD) as f32).collect()
                };
                (name, role, Tensor::new(shape, data).expect("layout shapes are valid"))
            })
            .collect();
        ModelWeights::from_entries(config, entries)
    }

    /// Assembles weights, checking names, roles and shapes against the config.
    pub fn from_entries(
        config: TransformerConfig,
        entries: Vec<(String, MatrixRole, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut given: HashMap<String, (MatrixRole, Tensor)> = HashMap::new();
        for (name, role, tensor) in entries {
            if given.insert(name.clone(), (role, tensor)).is_some() {
                return Err(Error::InvalidInput(format!("duplicate tensor `{name}`")));
            }
        }
        let mut out = Vec::new();
        for (name, role, shape) in layout(&config) {
            let (got_role, tensor) = given
                .remove(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if got_role != role {
                return Err(Error::InvalidInput(format!(
                    "tensor `{name}` has role {got_role}, expected {role}"
                )));
            }
            if tensor.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            out.push(WeightEntry { name, role, tensor });
        }
        if let Some(extra) = given.keys().min() {
            return Err(Error::InvalidInput(format!("unexpected tensor `{extra}`")));
        }
        let index = out
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Ok(ModelWeights {
            config,
            entries: out,
            index,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn role(&self, name: &str) -> Option<MatrixRole> {
        self.index.get(name).map(|&i| self.entries[i].role)
    }

    /// Replaces a tensor's values; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if self.entries[i].tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "cannot replace `{name}` {:?} with {:?}",
                self.entries[i].tensor.shape(),
                tensor.shape()
            )));
        }
        self.entries[i].tensor = tensor;
        Ok(())
    }

    /// Mutable tensors in storage order, for optimizer updates.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor).collect()
    }

    /// Names of tensors carrying any of `roles`, in storage order.
    pub fn names_with_roles(&self, roles: &[MatrixRole]) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| roles.contains(&e.role))
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        self.entries
            .iter()
            .try_for_each(|e| e.tensor.check_finite(&e.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            mlp_hidden: 16,
            context: 6,
            vocab_size: 11,
        }
    }

    #[test]
    fn init_matches_layout_and_count() {
        let w = ModelWeights::init(tiny(), 3).unwrap();
        assert_eq!(w.parameter_count(), tiny().parameter_count());
        assert_eq!(w.role(&names::mlp_in(1)), Some(MatrixRole::MlpIn));
        assert_eq!(w.get(&names::ln1_gamma(0)).unwrap().data(), &[1.0; 8]);
        assert_eq!(
            w.names_with_roles(&[MatrixRole::MlpIn, MatrixRole::MlpOut]).len(),
            4
        );
        assert_eq!(w, ModelWeights::init(tiny(), 3).unwrap());
        assert_ne!(w, ModelWeights::init(tiny(), 4).unwrap());
    }

    #[test]
    fn from_entries_validates() {
        let w = ModelWeights::init(tiny(), 0).unwrap();
        let mut entries: Vec<_> = w
            .entries()
            .iter()
            .map(|e| (e.name().to_string(), e.role(), e.tensor().clone()))
            .collect();
        entries.retain(|(n, _, _)| n != names::LM_HEAD);
        assert!(matches!(
            ModelWeights::from_entries(tiny(), entries.clone()),
            Err(Error::MissingTensor(n)) if n == names::LM_HEAD
        ));
        entries.push((names::LM_HEAD.into(), MatrixRole::Norm, Tensor::zeros(&[11, 8])));
        assert!(ModelWeights::from_entries(tiny(), entries).is_err());
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut w = ModelWeights::init(tiny(), 0).unwrap();
        assert!(w.set(names::LM_HEAD, Tensor::zeros(&[11, 8])).is_ok());
        assert!(w.set(names::LM_HEAD, Tensor::zeros(&[8, 11])).is_err());
        assert!(w.set("nope", Tensor::zeros(&[1])).is_err());
    }
}
