//! Cloze-style extraction attacks built from held-out paraphrases.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::metrics::{contains_alias, exact_match, extract_answer};
use super::{generate_text, EvalSettings};
use crate::datasets::{mentions_forget_alias, Corpus, Entity, CLOZE_PREFIX, PERSON_RELATION};
use crate::error::{Error, Result};
use crate::model::{Decoder, Vocabulary};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeClass {
    /// A fact whose answer is a forget answer.
    Direct,
    /// The probe names a forget answer but its gold answer is someone else.
    Associated,
    /// Facts about answers unrelated to the forget set.
    Control,
}

impl fmt::Display for ProbeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeClass::Direct => "direct",
            ProbeClass::Associated => "associated",
            ProbeClass::Control => "control",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackProbe {
    pub probe: String,
    pub class: ProbeClass,
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Non-forget answers probed as controls.
    pub control_answers: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { control_answers: 10 }
    }
}

fn probe_for(entity: &Entity, relation: usize) -> String {
    format!(
        "{CLOZE_PREFIX}{}",
        Corpus::cloze(relation, &entity.attributes[relation])
    )
}

/// Direct probes for every forget answer and relation, associated probes
/// on the teacher relation, and control probes on sampled other answers.
pub fn build_attack_battery(
    corpus: &Corpus,
    forget_ids: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackProbe>> {
    let relations = corpus.spec.relations;
    if relations == 0 {
        return Err(Error::InvalidInput("corpus has no held-out cloze templates".into()));
    }
    let forget: BTreeSet<usize> = forget_ids.iter().copied().collect();
    let forget_aliases: BTreeSet<String> = forget_ids
        .iter()
        .filter_map(|&id| corpus.entity(id))
        .flat_map(|e| e.aliases())
        .map(|a| a.to_lowercase())
        .collect();
    let mut out = Vec::new();
    for &id in &forget {
        let e = corpus
            .entity(id)
            .ok_or_else(|| Error::Data(format!("forget answer {id} is not a corpus entity")))?;
        for r in 0..relations {
            out.push(AttackProbe {
                probe: probe_for(e, r),
                class: ProbeClass::Direct,
                aliases: e.aliases(),
            });
        }
    }
    if relations > PERSON_RELATION {
        for e in &corpus.entities {
            let student = &e.attributes[PERSON_RELATION];
            let names_forget = forget
                .iter()
                .any(|&id| corpus.entities[id].full_name() == *student);
            if names_forget && !mentions_forget_alias(&e.aliases(), &forget_aliases) {
                out.push(AttackProbe {
                    probe: probe_for(e, PERSON_RELATION),
                    class: ProbeClass::Associated,
                    aliases: e.aliases(),
                });
            }
        }
    }
    let candidates: Vec<&Entity> = corpus
        .entities
        .iter()
        .filter(|e| !forget.contains(&e.id) && !mentions_forget_alias(&e.aliases(), &forget_aliases))
        .collect();
    let mut idx = Rng::derived(seed, "attack-controls")
        .sample_indices(candidates.len(), cfg.control_answers.min(candidates.len()));
    idx.sort_unstable();
    for i in idx {
        let e = candidates[i];
        for r in 0..relations {
            out.push(AttackProbe {
                probe: probe_for(e, r),
                class: ProbeClass::Control,
                aliases: e.aliases(),
            });
        }
    }
    Ok(out)
}

/// One probe, what the model said, and whether it leaked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub class: ProbeClass,
    pub probe: String,
    pub output: String,
    pub leak: bool,
    /// Exact match of the short answer; controls only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<bool>,
}

/// Leak rate per class and exact match on controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub direct_leak: f64,
    pub associated_leak: Option<f64>,
    pub control_leak: f64,
    pub control_em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub summary: AttackSummary,
    pub transcript: Vec<TranscriptRow>,
}

fn rate(rows: &[&TranscriptRow], f: impl Fn(&TranscriptRow) -> bool) -> Option<f64> {
    if rows.is_empty() {
        None
    } else {
        Some(rows.iter().filter(|r| f(r)).count() as f64 / rows.len() as f64)
    }
}

/// Runs every probe with the full-generation budget; controls are also
/// answered with the short-answer settings for exact match.
pub fn run_attack_battery(
    dec: &Decoder,
    vocab: &Vocabulary,
    probes: &[AttackProbe],
    settings: &EvalSettings,
) -> Result<AttackResult> {
    if probes.is_empty() {
        return Err(Error::InvalidInput("attack battery is empty".into()));
    }
    let mut transcript = Vec::with_capacity(probes.len());
    for p in probes {
        let output = generate_text(dec, vocab, &p.probe, &settings.leakage)?;
        let leak = contains_alias(&output, &p.aliases);
        let exact_match = if p.class == ProbeClass::Control {
            let short = generate_text(dec, vocab, &p.probe, &settings.answer)?;
            Some(exact_match(&extract_answer(&short), &p.aliases)?)
        } else {
            None
        };
        transcript.push(TranscriptRow {
            class: p.class,
            probe: p.probe.clone(),
            output,
            leak,
            exact_match,
        });
    }
    let of = |c: ProbeClass| -> Vec<&TranscriptRow> {
        transcript.iter().filter(|r| r.class == c).collect()
    };
    let direct = of(ProbeClass::Direct);
    let associated = of(ProbeClass::Associated);
    let control = of(ProbeClass::Control);
    let summary = AttackSummary {
        direct_leak: rate(&direct, |r| r.leak).unwrap_or(0.0),
        associated_leak: rate(&associated, |r| r.leak),
        control_leak: rate(&control, |r| r.leak).unwrap_or(0.0),
        control_em: rate(&control, |r| r.exact_match == Some(true)).unwrap_or(0.0),
    };
    Ok(AttackResult {
        summary,
        transcript,
    })
}
