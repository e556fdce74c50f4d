//! Measurement: exact match, leakage, output categories, perplexity,
//! extraction attacks and report assembly.

mod attack;
mod metrics;
mod report;

pub use attack::{
    build_attack_battery, run_attack_battery, AttackConfig, AttackProbe, AttackResult,
    AttackSummary, ProbeClass, TranscriptRow,
};
pub use report::{
    aggregate, canonical_json, read_report, report_csv, summary_table, write_report,
    CategoryRates, EvalReport, SeedReport, VariantMetrics, FLOAT_DIGITS,
};
pub use metrics::{
    categorize, contains_alias, exact_match, extract_answer, is_phrase, normalize_answer,
    normalize_generation, OutputCategory,
};

use serde::{Deserialize, Serialize};

use crate::datasets::{render_prompt, QaPair, SanitizationPhrase, SeedBundle};
use crate::error::{Error, Result};
use crate::model::{decode, perplexity_of, Decoder, GenerationSettings, Vocabulary, BOS, EOS};

/// Decoding used for answers and for full-generation leakage checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub answer: GenerationSettings,
    pub leakage: GenerationSettings,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            answer: GenerationSettings::beam(4),
            leakage: GenerationSettings {
                max_new_tokens: 64,
                stop_on_newline: false,
                ..GenerationSettings::beam(4)
            },
        }
    }
}

/// `<bos>` followed by the encoded text.
pub fn prompt_ids(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text));
    ids
}

/// Generates a continuation of `prompt` and renders it as text.
pub fn generate_text(
    dec: &Decoder,
    vocab: &Vocabulary,
    prompt: &str,
    settings: &GenerationSettings,
) -> Result<String> {
    let out = decode(dec, &prompt_ids(vocab, prompt), settings)?;
    vocab.decode(&out)
}

/// The model's raw generation for a question under the QA prompt.
pub fn answer_question(
    dec: &Decoder,
    vocab: &Vocabulary,
    question: &str,
    settings: &GenerationSettings,
) -> Result<String> {
    generate_text(dec, vocab, &render_prompt(question), settings)
}

fn require_nonempty(pairs: &[QaPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    Ok(())
}

/// Fraction of pairs whose extracted answer matches an alias.
pub fn qa_accuracy(
    dec: &Decoder,
    vocab: &Vocabulary,
    pairs: &[QaPair],
    settings: &GenerationSettings,
) -> Result<f64> {
    require_nonempty(pairs)?;
    let mut hits = 0usize;
    for p in pairs {
        let g = answer_question(dec, vocab, &p.question, settings)?;
        if exact_match(&extract_answer(&g), &p.answers)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Fraction of pairs whose whole generation contains an alias.
pub fn leakage_rate(
    dec: &Decoder,
    vocab: &Vocabulary,
    pairs: &[QaPair],
    settings: &GenerationSettings,
) -> Result<f64> {
    require_nonempty(pairs)?;
    let mut leaks = 0usize;
    for p in pairs {
        let g = answer_question(dec, vocab, &p.question, settings)?;
        if contains_alias(&g, &p.answers) {
            leaks += 1;
        }
    }
    Ok(leaks as f64 / pairs.len() as f64)
}

/// Answers every pair once and scores exact match and output categories.
pub fn answer_metrics(
    dec: &Decoder,
    vocab: &Vocabulary,
    pairs: &[QaPair],
    phrase: &SanitizationPhrase,
    settings: &GenerationSettings,
) -> Result<(f64, CategoryRates)> {
    require_nonempty(pairs)?;
    let mut hits = 0usize;
    let mut cats = Vec::with_capacity(pairs.len());
    for p in pairs {
        let g = answer_question(dec, vocab, &p.question, settings)?;
        if exact_match(&extract_answer(&g), &p.answers)? {
            hits += 1;
        }
        cats.push(categorize(&g, &p.answers, phrase.as_str()));
    }
    Ok((hits as f64 / pairs.len() as f64, CategoryRates::from_categories(&cats)))
}

/// Held-out documents as one token stream of `<bos> doc <eos>` segments.
pub fn heldout_stream(vocab: &Vocabulary, docs: &[String]) -> Vec<usize> {
    let mut out = Vec::new();
    for d in docs {
        out.push(BOS);
        out.extend(vocab.encode(d));
        out.push(EOS);
    }
    out
}

/// Inputs shared by every variant evaluated on one seed bundle.
pub struct EvalContext<'a> {
    pub vocab: &'a Vocabulary,
    pub bundle: &'a SeedBundle,
    pub heldout: &'a [usize],
    pub phrase: &'a SanitizationPhrase,
    pub settings: &'a EvalSettings,
    pub battery: Option<&'a [AttackProbe]>,
}

/// Every metric of one model variant on one bundle.
pub fn evaluate_variant(
    dec: &Decoder,
    ctx: &EvalContext<'_>,
) -> Result<(VariantMetrics, Option<AttackResult>)> {
    let b = ctx.bundle;
    let s = ctx.settings;
    let (forget_em, forget_categories) =
        answer_metrics(dec, ctx.vocab, &b.forget_test.pairs, ctx.phrase, &s.answer)?;
    let (retain_em, retain_categories) =
        answer_metrics(dec, ctx.vocab, &b.retain_test.pairs, ctx.phrase, &s.answer)?;
    let forget_train_em = qa_accuracy(dec, ctx.vocab, &b.forget.pairs, &s.answer)?;
    let forget_leakage = leakage_rate(dec, ctx.vocab, &b.forget_test.pairs, &s.leakage)?;
    let retain_leakage = leakage_rate(dec, ctx.vocab, &b.retain_test.pairs, &s.leakage)?;
    let perplexity = perplexity_of(dec, ctx.heldout)?;
    let attack = match ctx.battery {
        Some(probes) => Some(run_attack_battery(dec, ctx.vocab, probes, s)?),
        None => None,
    };
    Ok((
        VariantMetrics {
            forget_em,
            retain_em,
            forget_train_em,
            forget_leakage,
            retain_leakage,
            forget_categories,
            retain_categories,
            perplexity,
            attack: attack.as_ref().map(|a| a.summary),
        },
        attack,
    ))
}
