//! Forget, sanitized, retain and evaluation splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::types::{KnowledgeSet, QaPair, SanitizationPhrase, SetLabel};
use super::corpus::MIN_QUESTIONS_PER_ANSWER;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Mixing ratio `forget:retain` between K_S and K_R, written as "15:85".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MixRatio {
    forget: f64,
    retain: f64,
}

impl MixRatio {
    pub fn new(forget: f64, retain: f64) -> Result<Self> {
        if !(forget > 0.0 && forget.is_finite() && retain >= 0.0 && retain.is_finite()) {
            return Err(Error::Config(format!(
                "ratio {forget}:{retain} needs a positive forget share and a non-negative retain share"
            )));
        }
        Ok(MixRatio { forget, retain })
    }

    /// Ratio with `percent` of the mixture drawn from K_R.
    pub fn retain_percent(percent: f64) -> Result<Self> {
        MixRatio::new(100.0 - percent, percent)
    }

    pub fn forget(&self) -> f64 {
        self.forget
    }

    pub fn retain(&self) -> f64 {
        self.retain
    }

    /// N_R for a given N_F.
    pub fn retain_size(&self, n_forget: usize) -> usize {
        (n_forget as f64 * self.retain / self.forget).round() as usize
    }
}

impl Default for MixRatio {
    fn default() -> Self {
        MixRatio {
            forget: 15.0,
            retain: 85.0,
        }
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.forget, self.retain)
    }
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio `{s}` is not of the form F:R"));
        let (f, r) = s.split_once(':').ok_or_else(bad)?;
        let f: f64 = f.trim().parse().map_err(|_| bad())?;
        let r: f64 = r.trim().parse().map_err(|_| bad())?;
        MixRatio::new(f, r)
    }
}

impl TryFrom<String> for MixRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MixRatio> for String {
    fn from(r: MixRatio) -> String {
        r.to_string()
    }
}

/// Split sizes shared by every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub forget_answers: usize,
    pub questions_per_forget_answer: usize,
    pub ratio: MixRatio,
    /// Retain-test pairs sampled from the remaining pool; 0 keeps all.
    pub retain_test_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            forget_answers: 5,
            questions_per_forget_answer: 16,
            ratio: MixRatio::default(),
            retain_test_size: 200,
        }
    }
}

/// All sets built for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedBundle {
    pub seed: u64,
    pub forget_ids: Vec<usize>,
    pub forget: KnowledgeSet,
    pub sanitized: KnowledgeSet,
    pub retain: KnowledgeSet,
    pub forget_test: KnowledgeSet,
    pub retain_test: KnowledgeSet,
}

impl SeedBundle {
    pub fn sets(&self) -> [&KnowledgeSet; 5] {
        [
            &self.forget,
            &self.sanitized,
            &self.retain,
            &self.forget_test,
            &self.retain_test,
        ]
    }
}

fn by_answer(pool: &[QaPair]) -> BTreeMap<usize, Vec<&QaPair>> {
    let mut map: BTreeMap<usize, Vec<&QaPair>> = BTreeMap::new();
    for p in pool {
        map.entry(p.answer_id).or_default().push(p);
    }
    map
}

/// Lowercased aliases of every pair whose answer is in `ids`.
pub fn forget_aliases(pool: &[QaPair], ids: &[usize]) -> BTreeSet<String> {
    let ids: HashSet<usize> = ids.iter().copied().collect();
    pool.iter()
        .filter(|p| ids.contains(&p.answer_id))
        .flat_map(|p| p.answers.iter().map(|a| a.to_lowercase()))
        .collect()
}

/// True if any alias contains, or is contained in, a forget alias.
pub fn mentions_forget_alias(aliases: &[String], forget: &BTreeSet<String>) -> bool {
    aliases.iter().any(|a| {
        let a = a.to_lowercase();
        forget
            .iter()
            .any(|f| a.contains(f.as_str()) || f.contains(a.as_str()))
    })
}

/// Samples `n` distinct answers among those with enough questions.
pub fn select_forget_answers(pool: &[QaPair], n: usize, seed: u64) -> Result<Vec<usize>> {
    select_excluding(pool, n, seed, &BTreeSet::new())
}

fn select_excluding(
    pool: &[QaPair],
    n: usize,
    seed: u64,
    exclude: &BTreeSet<usize>,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = by_answer(pool)
        .into_iter()
        .filter(|(id, qs)| qs.len() >= MIN_QUESTIONS_PER_ANSWER && !exclude.contains(id))
        .map(|(id, _)| id)
        .collect();
    if eligible.len() < n {
        return Err(Error::Data(format!(
            "{n} forget answers requested but only {} have at least {MIN_QUESTIONS_PER_ANSWER} questions",
            eligible.len()
        )));
    }
    let mut rng = Rng::derived(seed, "forget-answers");
    let mut ids: Vec<usize> = rng
        .sample_indices(eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Picks `per_answer` training questions for each forget answer.
pub fn build_forget_set(
    pool: &[QaPair],
    forget_ids: &[usize],
    per_answer: usize,
    seed: u64,
) -> Result<KnowledgeSet> {
    let groups = by_answer(pool);
    let mut rng = Rng::derived(seed, "forget-set");
    let mut pairs = Vec::with_capacity(forget_ids.len() * per_answer);
    for id in forget_ids {
        let qs = groups.get(id).map(Vec::as_slice).unwrap_or(&[]);
        if qs.len() < per_answer + 1 {
            return Err(Error::Data(format!(
                "answer {id} has {} questions; {} needed to keep one held out",
                qs.len(),
                per_answer + 1
            )));
        }
        let mut picked = rng.sample_indices(qs.len(), per_answer);
        picked.sort_unstable();
        pairs.extend(picked.into_iter().map(|i| qs[i].clone()));
    }
    Ok(KnowledgeSet {
        label: SetLabel::Forget,
        pairs,
        seed,
    })
}

/// K_F with every answer replaced by the phrase.
pub fn build_sanitized_set(forget: &KnowledgeSet, phrase: &SanitizationPhrase) -> KnowledgeSet {
    let pairs = forget
        .pairs
        .iter()
        .map(|p| QaPair {
            answers: vec![phrase.as_str().to_string()],
            ..p.clone()
        })
        .collect();
    KnowledgeSet {
        label: SetLabel::Sanitized,
        pairs,
        seed: forget.seed,
    }
}

/// Samples N_R pairs, uniformly without replacement, from pairs whose
/// aliases avoid every forget alias.
pub fn build_retain_set(
    pool: &[QaPair],
    forget_ids: &[usize],
    n_forget: usize,
    ratio: MixRatio,
    seed: u64,
) -> Result<KnowledgeSet> {
    let forget = forget_aliases(pool, forget_ids);
    let candidates: Vec<&QaPair> = pool
        .iter()
        .filter(|p| !mentions_forget_alias(&p.answers, &forget))
        .collect();
    let n = ratio.retain_size(n_forget);
    if candidates.len() < n {
        return Err(Error::Data(format!(
            "retain set needs {n} pairs but only {} survive the forget filter",
            candidates.len()
        )));
    }
    let mut rng = Rng::derived(seed, "retain-set");
    let mut picked = rng.sample_indices(candidates.len(), n);
    picked.sort_unstable();
    Ok(KnowledgeSet {
        label: SetLabel::Retain,
        pairs: picked.into_iter().map(|i| candidates[i].clone()).collect(),
        seed,
    })
}

/// Held-out forget questions and a retain-test sample disjoint from K_R.
pub fn build_eval_sets(
    pool: &[QaPair],
    forget_ids: &[usize],
    forget: &KnowledgeSet,
    retain: &KnowledgeSet,
    retain_test_size: usize,
    seed: u64,
) -> Result<(KnowledgeSet, KnowledgeSet)> {
    let ids: HashSet<usize> = forget_ids.iter().copied().collect();
    let in_forget: HashSet<&str> = forget.ids().collect();
    let in_retain: HashSet<&str> = retain.ids().collect();
    let forget_test: Vec<QaPair> = pool
        .iter()
        .filter(|p| ids.contains(&p.answer_id) && !in_forget.contains(p.id.as_str()))
        .cloned()
        .collect();
    let aliases = forget_aliases(pool, forget_ids);
    let mut retain_test: Vec<QaPair> = pool
        .iter()
        .filter(|p| !in_retain.contains(p.id.as_str()) && !mentions_forget_alias(&p.answers, &aliases))
        .cloned()
        .collect();
    if retain_test_size > 0 && retain_test.len() > retain_test_size {
        let mut rng = Rng::derived(seed, "retain-test");
        let mut picked = rng.sample_indices(retain_test.len(), retain_test_size);
        picked.sort_unstable();
        retain_test = picked.into_iter().map(|i| retain_test[i].clone()).collect();
    }
    if forget_test.is_empty() || retain_test.is_empty() {
        return Err(Error::Data(format!(
            "empty evaluation split (forget-test {}, retain-test {})",
            forget_test.len(),
            retain_test.len()
        )));
    }
    Ok((
        KnowledgeSet {
            label: SetLabel::ForgetTest,
            pairs: forget_test,
            seed,
        },
        KnowledgeSet {
            label: SetLabel::RetainTest,
            pairs: retain_test,
            seed,
        },
    ))
}

fn build_bundle(
    pool: &[QaPair],
    forget_ids: Vec<usize>,
    cfg: &SplitConfig,
    phrase: &SanitizationPhrase,
    seed: u64,
) -> Result<SeedBundle> {
    let forget = build_forget_set(pool, &forget_ids, cfg.questions_per_forget_answer, seed)?;
    let sanitized = build_sanitized_set(&forget, phrase);
    let retain = build_retain_set(pool, &forget_ids, forget.len(), cfg.ratio, seed)?;
    let (forget_test, retain_test) =
        build_eval_sets(pool, &forget_ids, &forget, &retain, cfg.retain_test_size, seed)?;
    Ok(SeedBundle {
        seed,
        forget_ids,
        forget,
        sanitized,
        retain,
        forget_test,
        retain_test,
    })
}

/// One bundle per seed with forget answers disjoint across seeds.
///
/// Seeds are processed in order and each one samples from the answers not
/// yet used, so the bundle for a seed depends on the seeds before it.
pub fn build_seeded_suite(
    pool: &[QaPair],
    seeds: &[u64],
    cfg: &SplitConfig,
    phrase: &SanitizationPhrase,
) -> Result<Vec<SeedBundle>> {
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err(Error::Config("seed list contains duplicates".into()));
    }
    let mut used = BTreeSet::new();
    let mut bundles = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let ids = select_excluding(pool, cfg.forget_answers, seed, &used).map_err(|e| {
            Error::Data(format!("cannot keep forget answers disjoint across seeds: {e}"))
        })?;
        used.extend(ids.iter().copied());
        bundles.push(build_bundle(pool, ids, cfg, phrase, seed)?);
    }
    Ok(bundles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(answers: usize, per: usize) -> Vec<QaPair> {
        (0..answers)
            .flat_map(|a| {
                (0..per).map(move |q| QaPair {
                    id: format!("a{a}-q{q}"),
                    question: format!("Question {q} about {a}?"),
                    answers: vec![format!("Person Name{a}x"), format!("Name{a}x")],
                    answer_id: a,
                    template: String::new(),
                })
            })
            .collect()
    }

    #[test]
    fn ratio_sizes() {
        assert_eq!(MixRatio::default().retain_size(80), 453);
        assert_eq!("50:50".parse::<MixRatio>().unwrap().retain_size(80), 80);
        assert_eq!(MixRatio::retain_percent(0.0).unwrap().retain_size(80), 0);
        assert!("0:100".parse::<MixRatio>().is_err());
        assert!("15-85".parse::<MixRatio>().is_err());
    }

    #[test]
    fn forget_selection() {
        let p = pool(20, 20);
        let ids = select_forget_answers(&p, 5, 3).unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids, select_forget_answers(&p, 5, 3).unwrap());
        assert!(select_forget_answers(&p, 0, 3).unwrap().is_empty());
        assert!(select_forget_answers(&p, 21, 3).is_err());
        assert!(select_forget_answers(&pool(10, 16), 1, 0).is_err());
    }

    #[test]
    fn forget_set_sizes() {
        let p = pool(20, 20);
        assert_eq!(build_forget_set(&p, &[0, 1, 2, 3, 4], 16, 0).unwrap().len(), 80);
        assert_eq!(build_forget_set(&p, &[7], 16, 0).unwrap().len(), 16);
        assert!(build_forget_set(&p, &[7], 20, 0).is_err());
    }

    #[test]
    fn sanitized_set_is_aligned() {
        let p = pool(20, 20);
        let kf = build_forget_set(&p, &[1, 2], 16, 0).unwrap();
        let ks = build_sanitized_set(&kf, &SanitizationPhrase::default());
        assert_eq!(ks.len(), kf.len());
        for (s, f) in ks.pairs.iter().zip(&kf.pairs) {
            assert_eq!(s.question, f.question);
            assert_eq!(s.answers, vec!["I don't know.".to_string()]);
        }
    }

    #[test]
    fn retain_filter_uses_substrings() {
        let mut p = pool(40, 20);
        // "Name1x" is contained in this alias, so it must be filtered.
        p.push(QaPair {
            id: "extra".into(),
            question: "Who?".into(),
            answers: vec!["Name1xson".into()],
            answer_id: 99,
            template: String::new(),
        });
        let kr = build_retain_set(&p, &[1], 16, MixRatio::default(), 0).unwrap();
        assert_eq!(kr.len(), 91);
        assert!(kr.pairs.iter().all(|q| q.answer_id != 1 && q.id != "extra"));
        assert!(build_retain_set(&pool(3, 20), &[1], 80, MixRatio::default(), 0).is_err());
    }

    #[test]
    fn eval_sets_partition() {
        let p = pool(40, 20);
        let ids = vec![3, 9, 11, 20, 31];
        let kf = build_forget_set(&p, &ids, 16, 0).unwrap();
        let kr = build_retain_set(&p, &ids, kf.len(), MixRatio::default(), 0).unwrap();
        let (ft, rt) = build_eval_sets(&p, &ids, &kf, &kr, 0, 0).unwrap();
        assert_eq!(ft.len(), 20);
        assert_eq!(rt.len(), 35 * 20 - 453);
        let (_, capped) = build_eval_sets(&p, &ids, &kf, &kr, 50, 0).unwrap();
        assert_eq!(capped.len(), 50);
    }

    #[test]
    fn suite_is_disjoint() {
        let p = pool(60, 20);
        let cfg = SplitConfig::default();
        let suite = build_seeded_suite(&p, &[0, 1, 2, 3, 4], &cfg, &SanitizationPhrase::default())
            .unwrap();
        assert_eq!(suite.len(), 5);
        let mut seen = BTreeSet::new();
        for b in &suite {
            for id in &b.forget_ids {
                assert!(seen.insert(*id));
            }
        }
        assert!(build_seeded_suite(&pool(8, 20), &[0, 1], &cfg, &SanitizationPhrase::default())
            .is_err());
    }
}
