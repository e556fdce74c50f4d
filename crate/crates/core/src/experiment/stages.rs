//! Stage implementations and the on-disk layout they share.
//!
//! Public `cmd_*` functions hold the output-directory lock for their whole
//! run; the private stage functions assume the caller holds it.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ExperimentConfig;
use super::manifest::{RunLock, RunManifest, RUN_MANIFEST_FILE};
use crate::adapters::{load_adapters_for, save_adapters, AdapterSet, Provenance};
use crate::datasets::{
    build_retain_set, build_seeded_suite, export_jsonl, generate_corpus,
    import_jsonl, join_docs, split_docs, KnowledgeSet, MixRatio, QaPair, SeedBundle, SetLabel,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, build_attack_battery, canonical_json, evaluate_variant, heldout_stream, read_report, report_csv,
    run_attack_battery, summary_table, write_report, AttackProbe, AttackResult, EvalContext,
    EvalReport, SeedReport,
};
use crate::methods::{
    doc_examples, load_training_state, negative_gradient, negative_task_vector, pretrain,
    probe_subset, sanitization_tune, sanitize_without_retain, save_training_state,
    standard_finetune, MethodId, TrainLog, TrainStatus, TrainingState, Tuned,
};
use crate::model::checkpoint::{read_json, write_atomic, MANIFEST_FILE};
use crate::model::{load_model, save_model, Decoder, ModelManifest, ModelWeights, Vocabulary};
use crate::numerics::derive_seed;

/// Label of the untuned pretrained model in reports.
pub const ORIG: &str = "orig";

const META_FILE: &str = "meta.json";
const VARIANT_FILE: &str = "variant.json";
const BATTERY_FILE: &str = "attack_battery.jsonl";
const FORGET_IDS_FILE: &str = "forget_ids.json";

/// Paths below one output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn seed_data(&self, seed: u64) -> PathBuf {
        self.data().join(format!("seed-{seed}"))
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn variant(&self, seed: u64, label: &str) -> PathBuf {
        self.root
            .join("variants")
            .join(format!("seed-{seed}"))
            .join(label)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn attacks(&self, seed: u64) -> PathBuf {
        self.root.join("attacks").join(format!("seed-{seed}"))
    }

    fn stage_dirs(&self) -> [PathBuf; 5] {
        [
            self.data(),
            self.base(),
            self.root.join("variants"),
            self.reports(),
            self.root.join("attacks"),
        ]
    }
}

/// A forgetting method, optionally with a K_R share other than the
/// configured one (sanitization only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSpec {
    pub method: MethodId,
    pub retain_percent: Option<f64>,
}

/// `method`, or `sanitize@P` for a sanitization run with P% K_R.
pub fn variant_label(method: MethodId, retain_percent: Option<f64>) -> String {
    match retain_percent {
        Some(p) => format!("{method}@{p}"),
        None => method.to_string(),
    }
}

impl VariantSpec {
    pub fn new(method: MethodId) -> Self {
        VariantSpec {
            method,
            retain_percent: None,
        }
    }

    pub fn label(&self) -> String {
        variant_label(self.method, self.retain_percent)
    }

    pub fn parse(label: &str) -> Result<Self> {
        let (name, pct) = match label.split_once('@') {
            Some((n, p)) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::Config(format!("`{p}` in `{label}` is not a percentage")))?;
                MixRatio::retain_percent(p)?;
                (n, Some(p))
            }
            None => (label, None),
        };
        let method: MethodId = name.parse()?;
        if method == MethodId::Pretrain {
            return Err(Error::Config(
                "`pretrain` has its own command and is not a variant".into(),
            ));
        }
        if pct.is_some() && method != MethodId::Sanitize {
            return Err(Error::Config(format!(
                "only sanitize takes a K_R percentage, got `{label}`"
            )));
        }
        Ok(VariantSpec {
            method,
            retain_percent: pct,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum VariantKind {
    Adapters,
    Model,
}

/// Written next to every applied variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VariantInfo {
    config_hash: String,
    label: String,
    method: MethodId,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retain_percent: Option<f64>,
    kind: VariantKind,
    status: TrainStatus,
    epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DataMeta {
    config_hash: String,
    seeds: Vec<u64>,
    vocab_size: usize,
    ablation_retain_percents: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PretrainSummary {
    config_hash: String,
    probe_em: f64,
    steps: usize,
    status: TrainStatus,
}

/// A model ready to decode.
#[derive(Debug, Clone)]
pub enum Variant {
    Base(ModelWeights),
    Adapted {
        base: ModelWeights,
        adapters: AdapterSet,
    },
    Merged(ModelWeights),
}

impl Variant {
    pub fn decoder(&self) -> Result<Decoder> {
        match self {
            Variant::Base(w) | Variant::Merged(w) => Decoder::new(w, None),
            Variant::Adapted { base, adapters } => Decoder::new(base, Some(adapters)),
        }
    }
}

/// Everything `gen-data` writes, read back.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub vocab: Vocabulary,
    pub qa_pool: Vec<QaPair>,
    pub pretrain_docs: Vec<String>,
    pub heldout_docs: Vec<String>,
    pub bundles: Vec<SeedBundle>,
    pub batteries: BTreeMap<u64, Vec<AttackProbe>>,
    /// K_R for ablation runs, keyed by seed and percentage label.
    pub ablations: BTreeMap<(u64, String), KnowledgeSet>,
}

impl DataSet {
    pub fn bundle(&self, seed: u64) -> Result<&SeedBundle> {
        self.bundles.iter().find(|b| b.seed == seed).ok_or_else(|| {
            Error::Config(format!("seed {seed} is not in the configured seed list"))
        })
    }

    pub fn battery(&self, seed: u64) -> Result<&[AttackProbe]> {
        self.batteries
            .get(&seed)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no attack battery for seed {seed}")))
    }

    fn ablation(&self, seed: u64, percent: f64) -> Result<&KnowledgeSet> {
        self.ablations
            .get(&(seed, format!("{percent}")))
            .ok_or_else(|| {
                Error::Config(format!(
                    "K_R at {percent}% was not generated; add it to ablation_retain_percents"
                ))
            })
    }
}

fn check_hash(found: &str, expected: &str, what: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Config(format!(
            "{} was produced by config {found}, but the current config hashes to {expected}",
            what.display()
        )));
    }
    Ok(())
}

fn metadata_hash(m: &ModelManifest) -> &str {
    m.metadata
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or("")
}

fn missing(path: &Path, reason: impl Into<String>) -> Error {
    Error::MissingArtifact {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            missing(path, "file not found")
        } else {
            Error::io(path, e)
        }
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())
}

fn remove_dir(path: &Path) -> Result<()> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Regular files below `dir`, sorted.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn set_path(layout: &Layout, seed: u64, label: SetLabel) -> PathBuf {
    layout
        .seed_data(seed)
        .join(format!("{}.jsonl", label.file_stem()))
}

fn ablation_path(layout: &Layout, seed: u64, percent: f64) -> PathBuf {
    layout.seed_data(seed).join(format!("k_r@{percent}.jsonl"))
}

/// K_R at `percent`, drawn from pairs outside the retain-test split.
fn ablation_retain(pool: &[QaPair], bundle: &SeedBundle, percent: f64) -> Result<KnowledgeSet> {
    let held: HashSet<&str> = bundle.retain_test.ids().collect();
    let candidates: Vec<QaPair> = pool
        .iter()
        .filter(|p| !held.contains(p.id.as_str()))
        .cloned()
        .collect();
    build_retain_set(
        &candidates,
        &bundle.forget_ids,
        bundle.forget.len(),
        MixRatio::retain_percent(percent)?,
        derive_seed(bundle.seed, &format!("ablation-{percent}")),
    )
}

fn write_battery(path: &Path, probes: &[AttackProbe]) -> Result<()> {
    let mut out = String::new();
    for p in probes {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn read_battery(path: &Path) -> Result<Vec<AttackProbe>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn gen_data(cfg: &ExperimentConfig, layout: &Layout, hash: &str) -> Result<Vec<PathBuf>> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let vocab = Vocabulary::build(&corpus.vocabulary_text())?;
    let bundles = build_seeded_suite(&corpus.qa_pool, &cfg.seeds, &cfg.splits, &cfg.phrase)?;
    let data = layout.data();
    remove_dir(&data)?;
    fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
    export_jsonl(&corpus.qa_pool, &data.join("qa_pool.jsonl"))?;
    write_text(&data.join("pretrain.txt"), &join_docs(&corpus.pretrain_docs))?;
    write_text(&data.join("heldout.txt"), &join_docs(&corpus.heldout_docs))?;
    write_atomic(&data.join("vocab.json"), &serde_json::to_vec(&vocab)?)?;
    for b in &bundles {
        let dir = layout.seed_data(b.seed);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for set in b.sets() {
            export_jsonl(&set.pairs, &set_path(layout, b.seed, set.label))?;
        }
        write_atomic(&dir.join(FORGET_IDS_FILE), &serde_json::to_vec(&b.forget_ids)?)?;
        let battery = build_attack_battery(&corpus, &b.forget_ids, &cfg.eval.attack, b.seed)?;
        write_battery(&dir.join(BATTERY_FILE), &battery)?;
        for &p in &cfg.ablation_retain_percents {
            let kr = ablation_retain(&corpus.qa_pool, b, p)?;
            export_jsonl(&kr.pairs, &ablation_path(layout, b.seed, p))?;
        }
    }
    let meta = DataMeta {
        config_hash: hash.to_string(),
        seeds: cfg.seeds.clone(),
        vocab_size: vocab.len(),
        ablation_retain_percents: cfg.ablation_retain_percents.clone(),
    };
    write_atomic(&data.join(META_FILE), canonical_json(&meta)?.as_bytes())?;
    files_under(&data)
}

fn load_set(layout: &Layout, seed: u64, label: SetLabel) -> Result<KnowledgeSet> {
    Ok(KnowledgeSet {
        label,
        pairs: import_jsonl(&set_path(layout, seed, label))?,
        seed,
    })
}

/// Reads the generated data after checking its config hash and the
/// content hashes recorded by `gen-data`.
pub fn load_data(layout: &Layout, hash: &str) -> Result<DataSet> {
    let data = layout.data();
    let meta_path = data.join(META_FILE);
    if !meta_path.exists() {
        return Err(missing(&meta_path, "run gen-data first"));
    }
    let meta: DataMeta = read_json(&meta_path)?;
    check_hash(&meta.config_hash, hash, &data)?;
    RunManifest::load_or_new(layout.root(), hash)?.verify_stage(layout.root(), "gen-data")?;
    let vocab: Vocabulary = read_json(&data.join("vocab.json"))?;
    let qa_pool = import_jsonl(&data.join("qa_pool.jsonl"))?;
    let pretrain_docs = split_docs(&read_text(&data.join("pretrain.txt"))?);
    let heldout_docs = split_docs(&read_text(&data.join("heldout.txt"))?);
    let mut bundles = Vec::new();
    let mut batteries = BTreeMap::new();
    let mut ablations = BTreeMap::new();
    for &seed in &meta.seeds {
        let dir = layout.seed_data(seed);
        let forget_ids: Vec<usize> = read_json(&dir.join(FORGET_IDS_FILE))?;
        bundles.push(SeedBundle {
            seed,
            forget_ids,
            forget: load_set(layout, seed, SetLabel::Forget)?,
            sanitized: load_set(layout, seed, SetLabel::Sanitized)?,
            retain: load_set(layout, seed, SetLabel::Retain)?,
            forget_test: load_set(layout, seed, SetLabel::ForgetTest)?,
            retain_test: load_set(layout, seed, SetLabel::RetainTest)?,
        });
        batteries.insert(seed, read_battery(&dir.join(BATTERY_FILE))?);
        for &p in &meta.ablation_retain_percents {
            let set = KnowledgeSet {
                label: SetLabel::Retain,
                pairs: import_jsonl(&ablation_path(layout, seed, p))?,
                seed,
            };
            ablations.insert((seed, format!("{p}")), set);
        }
    }
    Ok(DataSet {
        vocab,
        qa_pool,
        pretrain_docs,
        heldout_docs,
        bundles,
        batteries,
        ablations,
    })
}

fn load_base(layout: &Layout, hash: &str) -> Result<ModelWeights> {
    let dir = layout.base();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(missing(&dir, "no pretrained checkpoint; run pretrain first"));
    }
    let (w, m) = load_model(&dir)?;
    check_hash(metadata_hash(&m), hash, &dir)?;
    Ok(w)
}

fn run_pretrain(
    cfg: &ExperimentConfig,
    layout: &Layout,
    hash: &str,
    resume: bool,
    progress: &mut dyn FnMut(&str),
) -> Result<f64> {
    let data = load_data(layout, hash)?;
    let model_cfg = cfg.model.with_vocab(data.vocab.len());
    let dir = layout.base();
    let state = if resume && dir.join(MANIFEST_FILE).exists() {
        let (state, m) = load_training_state(&dir)?;
        check_hash(metadata_hash(&m), hash, &dir)?;
        progress(&format!("resuming pretraining at step {}", state.step()));
        state
    } else {
        remove_dir(&dir)?;
        let w = ModelWeights::init(model_cfg, cfg.model.init_seed)?;
        TrainingState::fresh(w, &cfg.pretrain.recipe)
    };
    let examples = doc_examples(&data.vocab, &data.pretrain_docs, model_cfg.context);
    let probe = probe_subset(&data.qa_pool, cfg.pretrain.probe.size, cfg.pretrain.recipe.seed);
    let meta = json!({ "config_hash": hash, "stage": "pretrain" });
    let outcome = pretrain(
        state,
        &data.vocab,
        &examples,
        &probe,
        &cfg.pretrain,
        &mut |s: &TrainingState, em| {
            progress(&format!(
                "pretrain step {} loss {:.4} probe EM {:.3}",
                s.step(),
                s.log.last_loss().unwrap_or(f64::NAN),
                em
            ));
            save_training_state(s, &dir, meta.clone())
        },
    )?;
    save_training_state(&outcome.state, &dir, meta)?;
    write_text(&dir.join("train_log.jsonl"), &outcome.state.log.to_jsonl())?;
    let summary = PretrainSummary {
        config_hash: hash.to_string(),
        probe_em: outcome.probe_em,
        steps: outcome.state.step(),
        status: outcome.state.log.status,
    };
    write_text(&dir.join("pretrain.json"), &canonical_json(&summary)?)?;
    let mut manifest = RunManifest::load_or_new(layout.root(), hash)?;
    let inputs = vec![layout.data().join("pretrain.txt"), layout.data().join("vocab.json")];
    manifest.record(layout.root(), "pretrain", &inputs, &files_under(&dir)?)?;
    manifest.save(layout.root())?;
    Ok(outcome.probe_em)
}

fn stamp(set: &mut AdapterSet, method: MethodId, seed: u64, hash: &str) {
    set.provenance = Provenance {
        method: method.to_string(),
        seed,
        config_hash: hash.to_string(),
    };
}

fn run_apply(
    cfg: &ExperimentConfig,
    layout: &Layout,
    hash: &str,
    spec: VariantSpec,
    seed: u64,
    data: &DataSet,
) -> Result<TrainLog> {
    let label = spec.label();
    let bundle = data.bundle(seed)?;
    let base = load_base(layout, hash)?;
    let manifest = RunManifest::load_or_new(layout.root(), hash)?;
    manifest.verify_stage(layout.root(), "pretrain")?;
    // a mixture with no K_R share is sanitization without retention
    let no_retain = spec.method == MethodId::Sanitize && spec.retain_percent == Some(0.0);
    let recipe_method = if no_retain { MethodId::SanitizeNoKr } else { spec.method };
    let mut recipe = cfg.recipes.get(recipe_method)?.clone();
    recipe.seed = derive_seed(seed, &format!("{label}-{}", recipe.seed));
    let dir = layout.variant(seed, &label);
    remove_dir(&dir)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let vocab = &data.vocab;
    let tuned = |t: Result<Tuned>| -> Result<(TrainLog, VariantKind)> {
        let mut t = t?;
        stamp(&mut t.adapters, spec.method, seed, hash);
        save_adapters(&t.adapters, &dir.join("adapters"))?;
        Ok((t.log, VariantKind::Adapters))
    };
    let (log, kind) = match spec.method {
        MethodId::Sanitize if no_retain => {
            tuned(sanitize_without_retain(&base, vocab, &bundle.sanitized, &recipe))?
        }
        MethodId::Sanitize => {
            let retain = match spec.retain_percent {
                Some(p) => data.ablation(seed, p)?,
                None => &bundle.retain,
            };
            tuned(sanitization_tune(&base, vocab, &bundle.sanitized, retain, &recipe))?
        }
        MethodId::SanitizeNoKr => {
            tuned(sanitize_without_retain(&base, vocab, &bundle.sanitized, &recipe))?
        }
        MethodId::StandardFt => tuned(standard_finetune(&base, vocab, &bundle.forget, &recipe))?,
        MethodId::NegGrad => tuned(negative_gradient(
            &base,
            vocab,
            &bundle.forget,
            &recipe,
            &cfg.eval.settings.answer,
        ))?,
        MethodId::NegTaskVector => {
            let mut out = negative_task_vector(&base, vocab, &bundle.forget, &recipe)?;
            let meta = json!({ "config_hash": hash, "method": spec.method, "seed": seed });
            save_model(&out.weights, &dir.join("model"), meta)?;
            stamp(&mut out.task_vector, spec.method, seed, hash);
            save_adapters(&out.task_vector, &dir.join("task_vector"))?;
            (out.log, VariantKind::Model)
        }
        MethodId::Pretrain => {
            return Err(Error::Config("`pretrain` is not a variant".into()));
        }
    };
    write_text(&dir.join("train_log.jsonl"), &log.to_jsonl())?;
    let info = VariantInfo {
        config_hash: hash.to_string(),
        label: label.clone(),
        method: spec.method,
        seed,
        retain_percent: spec.retain_percent,
        kind,
        status: log.status,
        epochs: log.epochs.len(),
    };
    write_text(&dir.join(VARIANT_FILE), &canonical_json(&info)?)?;
    let mut manifest = RunManifest::load_or_new(layout.root(), hash)?;
    let mut inputs = vec![layout.base().join(crate::model::checkpoint::BINARY_FILE)];
    for l in [SetLabel::Forget, SetLabel::Sanitized, SetLabel::Retain] {
        inputs.push(set_path(layout, seed, l));
    }
    if let Some(p) = spec.retain_percent {
        inputs.push(ablation_path(layout, seed, p));
    }
    manifest.record(
        layout.root(),
        &format!("apply:seed-{seed}:{label}"),
        &inputs,
        &files_under(&dir)?,
    )?;
    manifest.save(layout.root())?;
    Ok(log)
}

/// Loads `orig` or an applied variant, refusing artifacts from another
/// config.
pub fn load_variant(layout: &Layout, hash: &str, seed: u64, label: &str) -> Result<Variant> {
    if label == ORIG {
        return Ok(Variant::Base(load_base(layout, hash)?));
    }
    let dir = layout.variant(seed, label);
    let info_path = dir.join(VARIANT_FILE);
    if !info_path.exists() {
        return Err(missing(
            &dir,
            format!("variant `{label}` has not been applied for seed {seed}"),
        ));
    }
    let info: VariantInfo = read_json(&info_path)?;
    check_hash(&info.config_hash, hash, &dir)?;
    match info.kind {
        VariantKind::Adapters => {
            let base = load_base(layout, hash)?;
            let adapters = load_adapters_for(&dir.join("adapters"), &base)?;
            check_hash(&adapters.provenance.config_hash, hash, &dir.join("adapters"))?;
            Ok(Variant::Adapted { base, adapters })
        }
        VariantKind::Model => {
            let (w, m) = load_model(&dir.join("model"))?;
            check_hash(metadata_hash(&m), hash, &dir.join("model"))?;
            Ok(Variant::Merged(w))
        }
    }
}

fn write_attack(
    layout: &Layout,
    hash: &str,
    seed: u64,
    label: &str,
    result: &AttackResult,
) -> Result<Vec<PathBuf>> {
    let dir = layout.attacks(seed);
    let summary = json!({
        "config_hash": hash,
        "seed": seed,
        "variant": label,
        "summary": result.summary,
    });
    let json_path = dir.join(format!("{label}.json"));
    write_text(&json_path, &canonical_json(&summary)?)?;
    let mut rows = String::new();
    for r in &result.transcript {
        rows.push_str(&serde_json::to_string(r)?);
        rows.push('\n');
    }
    let rows_path = dir.join(format!("{label}.jsonl"));
    write_text(&rows_path, &rows)?;
    Ok(vec![json_path, rows_path])
}

fn render_outputs(layout: &Layout, report: &EvalReport) -> Result<Vec<PathBuf>> {
    let dir = layout.reports();
    let csv = dir.join("report.csv");
    let summary = dir.join("summary.txt");
    write_text(&csv, &report_csv(report))?;
    write_text(&summary, &summary_table(report))?;
    Ok(vec![csv, summary])
}

fn run_eval(
    layout: &Layout,
    hash: &str,
    labels: &[String],
    seeds: &[u64],
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<EvalReport> {
    let data = load_data(layout, hash)?;
    let held = heldout_stream(&data.vocab, &data.heldout_docs);
    let mut names = vec![ORIG.to_string()];
    for l in labels {
        if !names.contains(l) {
            names.push(l.clone());
        }
    }
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for &seed in seeds {
        let bundle = data.bundle(seed)?;
        let ctx = EvalContext {
            vocab: &data.vocab,
            bundle,
            heldout: &held,
            phrase: &cfg.phrase,
            settings: &cfg.eval.settings,
            battery: Some(data.battery(seed)?),
        };
        let mut variants = BTreeMap::new();
        for label in &names {
            let dec = load_variant(layout, hash, seed, label)?.decoder()?;
            let (metrics, attack) = evaluate_variant(&dec, &ctx)?;
            if let Some(a) = &attack {
                outputs.extend(write_attack(layout, hash, seed, label, a)?);
            }
            progress(&format!(
                "eval seed {seed} {label}: forget EM {:.3} retain EM {:.3}",
                metrics.forget_em, metrics.retain_em
            ));
            variants.insert(label.clone(), metrics);
        }
        let sr = SeedReport {
            seed,
            config_hash: hash.to_string(),
            variants,
        };
        let path = layout.reports().join(format!("seed-{seed}.json"));
        write_text(&path, &canonical_json(&sr)?)?;
        outputs.push(path);
        reports.push(sr);
    }
    let report = aggregate(&reports)?;
    let path = layout.reports().join("report.json");
    fs::create_dir_all(layout.reports()).map_err(|e| Error::io(layout.reports(), e))?;
    write_report(&report, &path)?;
    outputs.push(path);
    outputs.extend(render_outputs(layout, &report)?);
    let meta = json!({ "config_hash": hash, "generated_at_unix": now_unix() });
    write_text(
        &layout.reports().join("report.meta.json"),
        &serde_json::to_string_pretty(&meta)?,
    )?;
    let mut manifest = RunManifest::load_or_new(layout.root(), hash)?;
    manifest.record(layout.root(), "eval", &[], &outputs)?;
    manifest.save(layout.root())?;
    Ok(report)
}

fn reproduce_specs(cfg: &ExperimentConfig) -> Vec<VariantSpec> {
    let mut specs: Vec<VariantSpec> = cfg.methods.iter().map(|&m| VariantSpec::new(m)).collect();
    for &p in &cfg.ablation_retain_percents {
        specs.push(VariantSpec {
            method: MethodId::Sanitize,
            retain_percent: Some(p),
        });
    }
    specs
}

struct Session {
    layout: Layout,
    hash: String,
    _lock: RunLock,
}

fn open(cfg: &ExperimentConfig, root: &Path) -> Result<Session> {
    cfg.validate()?;
    let layout = Layout::new(root);
    let lock = RunLock::acquire(layout.root())?;
    Ok(Session {
        layout,
        hash: cfg.hash()?,
        _lock: lock,
    })
}

/// Generates the corpus, vocabulary, per-seed sets and attack batteries.
pub fn cmd_gen_data(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let s = open(cfg, root)?;
    let files = gen_data(cfg, &s.layout, &s.hash)?;
    let mut manifest = RunManifest::load_or_new(s.layout.root(), &s.hash)?;
    manifest.record(s.layout.root(), "gen-data", &[], &files)?;
    manifest.save(s.layout.root())?;
    Ok(files)
}

/// Pretrains the base model and returns its final probe EM.
pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    root: &Path,
    resume: bool,
    progress: &mut dyn FnMut(&str),
) -> Result<f64> {
    let s = open(cfg, root)?;
    run_pretrain(cfg, &s.layout, &s.hash, resume, progress)
}

/// Applies one forgetting method for one seed.
pub fn cmd_apply(cfg: &ExperimentConfig, root: &Path, label: &str, seed: u64) -> Result<TrainLog> {
    let spec = VariantSpec::parse(label)?;
    let s = open(cfg, root)?;
    let data = load_data(&s.layout, &s.hash)?;
    run_apply(cfg, &s.layout, &s.hash, spec, seed, &data)
}

/// Evaluates `orig` and the given variants on the given seeds and writes
/// per-seed and aggregate reports.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    root: &Path,
    labels: &[String],
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<EvalReport> {
    for l in labels.iter().filter(|l| l.as_str() != ORIG) {
        VariantSpec::parse(l)?;
    }
    let s = open(cfg, root)?;
    run_eval(&s.layout, &s.hash, labels, seeds, cfg, progress)
}

/// Runs the extraction battery against one variant and writes its
/// summary and transcript.
pub fn cmd_attack(cfg: &ExperimentConfig, root: &Path, label: &str, seed: u64) -> Result<AttackResult> {
    if label != ORIG {
        VariantSpec::parse(label)?;
    }
    let s = open(cfg, root)?;
    let data = load_data(&s.layout, &s.hash)?;
    let dec = load_variant(&s.layout, &s.hash, seed, label)?.decoder()?;
    let result = run_attack_battery(&dec, &data.vocab, data.battery(seed)?, &cfg.eval.settings)?;
    let files = write_attack(&s.layout, &s.hash, seed, label, &result)?;
    let mut manifest = RunManifest::load_or_new(s.layout.root(), &s.hash)?;
    manifest.record(
        s.layout.root(),
        &format!("attack:seed-{seed}:{label}"),
        &[s.layout.seed_data(seed).join(BATTERY_FILE)],
        &files,
    )?;
    manifest.save(s.layout.root())?;
    Ok(result)
}

/// Re-renders the CSV and summary table from `reports/report.json`.
pub fn cmd_report(root: &Path, expected_hash: Option<&str>) -> Result<String> {
    let layout = Layout::new(root);
    let _lock = RunLock::acquire(layout.root())?;
    let path = layout.reports().join("report.json");
    if !path.exists() {
        return Err(missing(&path, "run eval first"));
    }
    let report = read_report(&path)?;
    if let Some(h) = expected_hash {
        check_hash(&report.config_hash, h, &path)?;
    }
    render_outputs(&layout, &report)?;
    Ok(summary_table(&report))
}

/// Every stage from scratch: data, pretraining, all methods on all seeds,
/// evaluation with attacks, and the summary.
pub fn cmd_reproduce(
    cfg: &ExperimentConfig,
    root: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<EvalReport> {
    let s = open(cfg, root)?;
    let (layout, hash) = (&s.layout, s.hash.as_str());
    for d in layout.stage_dirs() {
        remove_dir(&d)?;
    }
    let manifest_path = layout.root().join(RUN_MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    progress("gen-data");
    let files = gen_data(cfg, layout, hash).map_err(|e| e.in_stage("gen-data"))?;
    let mut manifest = RunManifest::new(hash);
    manifest.record(layout.root(), "gen-data", &[], &files)?;
    manifest.save(layout.root())?;
    run_pretrain(cfg, layout, hash, false, progress).map_err(|e| e.in_stage("pretrain"))?;
    let data = load_data(layout, hash).map_err(|e| e.in_stage("apply"))?;
    let specs = reproduce_specs(cfg);
    for &seed in &cfg.seeds {
        for spec in &specs {
            let label = spec.label();
            let log = run_apply(cfg, layout, hash, *spec, seed, &data)
                .map_err(|e| e.in_stage(format!("apply {label} seed {seed}")))?;
            let mut line = format!("apply seed {seed} {label}: {} epochs", log.epochs.len());
            if let Some(e) = log.epochs.last() {
                let _ = write!(line, ", train accuracy {:.3}", e.train_accuracy);
            }
            progress(&line);
        }
    }
    let labels: Vec<String> = specs.iter().map(VariantSpec::label).collect();
    run_eval(layout, hash, &labels, &cfg.seeds, cfg, progress).map_err(|e| e.in_stage("eval"))
}
