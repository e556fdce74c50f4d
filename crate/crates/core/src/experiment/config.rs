//! The single JSON document that determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datasets::{CorpusSpec, MixRatio, SanitizationPhrase, SplitConfig};
use crate::error::{Error, Result};
use crate::eval::{AttackConfig, EvalSettings};
use crate::methods::{MethodId, PretrainConfig, TrainRecipe};
use crate::model::TransformerConfig;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "KSAN_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "ksan-out";

/// Model shape; the vocabulary size comes from the generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    pub init_seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            layers: 4,
            d_model: 64,
            heads: 4,
            mlp_hidden: 256,
            context: 128,
            init_seed: 0,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            context: self.context,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipes {
    pub standard_ft: TrainRecipe,
    pub sanitize: TrainRecipe,
    pub sanitize_no_kr: TrainRecipe,
    pub neg_grad: TrainRecipe,
    pub neg_task_vector: TrainRecipe,
}

impl Default for Recipes {
    fn default() -> Self {
        Recipes {
            standard_ft: TrainRecipe::for_method(MethodId::StandardFt),
            sanitize: TrainRecipe::for_method(MethodId::Sanitize),
            sanitize_no_kr: TrainRecipe::for_method(MethodId::SanitizeNoKr),
            neg_grad: TrainRecipe::for_method(MethodId::NegGrad),
            neg_task_vector: TrainRecipe::for_method(MethodId::NegTaskVector),
        }
    }
}

impl Recipes {
    pub fn get(&self, method: MethodId) -> Result<&TrainRecipe> {
        Ok(match method {
            MethodId::StandardFt => &self.standard_ft,
            MethodId::Sanitize => &self.sanitize,
            MethodId::SanitizeNoKr => &self.sanitize_no_kr,
            MethodId::NegGrad => &self.neg_grad,
            MethodId::NegTaskVector => &self.neg_task_vector,
            MethodId::Pretrain => {
                return Err(Error::Config("pretraining uses the `pretrain` section".into()))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub settings: EvalSettings,
    pub attack: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub corpus: CorpusSpec,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub recipes: Recipes,
    pub splits: SplitConfig,
    pub phrase: SanitizationPhrase,
    pub seeds: Vec<u64>,
    /// Forgetting methods run by `reproduce`.
    pub methods: Vec<MethodId>,
    /// Extra sanitization runs at these K_R percentages.
    pub ablation_retain_percents: Vec<f64>,
    pub eval: EvalConfig,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            corpus: CorpusSpec::default(),
            model: ModelShape::default(),
            pretrain: PretrainConfig::default(),
            recipes: Recipes::default(),
            splits: SplitConfig::default(),
            phrase: SanitizationPhrase::default(),
            seeds: vec![0, 1, 2, 3, 4],
            methods: MethodId::TUNING.to_vec(),
            ablation_retain_percents: Vec::new(),
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corpus.validate()?;
        // vocabulary size is filled in later; any positive value checks the rest
        self.model.with_vocab(RESERVED_PLACEHOLDER).validate()?;
        self.pretrain.recipe.validate()?;
        if self.pretrain.recipe.method != MethodId::Pretrain {
            return Err(Error::Config("pretrain.recipe.method must be `pretrain`".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.probe.target) || self.pretrain.probe.size == 0 {
            return Err(Error::Config(
                "pretrain.probe needs a target in [0, 1] and a positive size".into(),
            ));
        }
        for m in MethodId::TUNING {
            let r = self.recipes.get(m)?;
            r.validate()?;
            if r.method != m {
                return Err(Error::Config(format!(
                    "recipe for {m} declares method {}",
                    r.method
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.methods.contains(&MethodId::Pretrain) {
            return Err(Error::Config("`pretrain` is not a forgetting method".into()));
        }
        for &p in &self.ablation_retain_percents {
            MixRatio::retain_percent(p)?;
        }
        if self.splits.forget_answers == 0 || self.splits.questions_per_forget_answer == 0 {
            return Err(Error::Config("splits need at least one forget answer and question".into()));
        }
        if self.splits.questions_per_forget_answer >= self.corpus.questions_per_answer() {
            return Err(Error::Config(format!(
                "{} training questions per forget answer leave none of {} held out",
                self.splits.questions_per_forget_answer,
                self.corpus.questions_per_answer()
            )));
        }
        self.eval.settings.answer.validate()?;
        self.eval.settings.leakage.validate()?;
        Ok(())
    }

    /// Canonical JSON without `output_dir`.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        Ok(serde_json::to_string(&v)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    /// Applies `key.path=value` overrides; the value is parsed as JSON and
    /// falls back to a plain string. Unknown paths are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key.path=value")))?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, path, value)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output directory: explicit flag, then config, then environment.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

const RESERVED_PLACEHOLDER: usize = 16;

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Object(m) => {
                if last && *k == "output_dir" && i == 0 {
                    m.insert(k.to_string(), value);
                    return Ok(());
                }
                let slot = m
                    .get_mut(*k)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(xs) => {
                let idx: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("`{k}` in `{path}` is not an index")))?;
                let len = xs.len();
                let slot = xs.get_mut(idx).ok_or_else(|| {
                    Error::Config(format!("index {idx} out of range ({len}) in `{path}`"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("`{path}` goes through a scalar"))),
        };
    }
    Ok(())
}
