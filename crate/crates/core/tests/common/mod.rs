//! Property suites shared by the standalone property tests and the
//! acceptance harness. Each runs `cases` randomized instances.

#![allow(dead_code)]

pub mod gradients;

use std::collections::HashSet;

use ksan::datasets::{
    build_seeded_suite, forget_aliases, mentions_forget_alias, MixRatio, QaPair,
    SanitizationPhrase, SplitConfig, MIN_QUESTIONS_PER_ANSWER,
};
use ksan::eval::{categorize, exact_match, extract_answer, is_phrase, CategoryRates, OutputCategory};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

/// A pool of `answers` synthetic answers with `per` questions each; names
/// are unique and never substrings of one another.
pub fn synthetic_pool(answers: usize, per: &[usize]) -> Vec<QaPair> {
    let mut pool = Vec::new();
    for a in 0..answers {
        let last = format!("Zq{a:03}x");
        let full = format!("Pers{a:03}y {last}");
        for q in 0..per[a % per.len()] {
            pool.push(QaPair {
                id: format!("a{a}-q{q}"),
                question: format!("Question {q} about item {a}?"),
                answers: vec![full.clone(), last.clone()],
                answer_id: a,
                template: format!("t{}", q % 4),
            });
        }
    }
    pool
}

#[derive(Debug, Clone)]
pub struct DatasetCase {
    answers: usize,
    per: Vec<usize>,
    forget_answers: usize,
    per_forget: usize,
    retain_percent: f64,
    retain_test_size: usize,
    seeds: Vec<u64>,
}

fn dataset_case() -> impl Strategy<Value = DatasetCase> {
    (
        12usize..40,
        prop::collection::vec(MIN_QUESTIONS_PER_ANSWER..26, 1..4),
        1usize..4,
        1usize..MIN_QUESTIONS_PER_ANSWER,
        prop_oneof![Just(0.0), Just(50.0), Just(75.0), Just(85.0), 0.0f64..90.0],
        0usize..60,
        prop::collection::btree_set(0u64..1_000, 1..3),
    )
        .prop_map(|(answers, per, fa, pf, rp, rt, seeds)| DatasetCase {
            answers,
            per,
            forget_answers: fa,
            per_forget: pf,
            retain_percent: rp,
            retain_test_size: rt,
            seeds: seeds.into_iter().collect(),
        })
}

/// Split disjointness, K_S/K_F alignment and the N_R size law.
pub fn dataset_invariants(cases: u32) -> Result<(), String> {
    let phrase = SanitizationPhrase::default();
    let built = std::cell::Cell::new(0u32);
    runner(cases)
        .run(&dataset_case(), |c| {
            let pool = synthetic_pool(c.answers, &c.per);
            let ratio = MixRatio::retain_percent(c.retain_percent).unwrap();
            let cfg = SplitConfig {
                forget_answers: c.forget_answers,
                questions_per_forget_answer: c.per_forget,
                ratio,
                retain_test_size: c.retain_test_size,
            };
            let suite = match build_seeded_suite(&pool, &c.seeds, &cfg, &phrase) {
                Ok(s) => s,
                // too few eligible pairs for this draw; nothing to check
                Err(_) => return Ok(()),
            };
            built.set(built.get() + 1);
            let mut used = HashSet::new();
            for b in &suite {
                for id in &b.forget_ids {
                    prop_assert!(used.insert(*id), "forget answer {} reused across seeds", id);
                }
                let aliases = forget_aliases(&pool, &b.forget_ids);
                let n_f = c.forget_answers * c.per_forget;
                prop_assert_eq!(b.forget.len(), n_f);
                prop_assert_eq!(b.retain.len(), ratio.retain_size(n_f));

                let f_ids: HashSet<&str> = b.forget.ids().collect();
                let r_ids: HashSet<&str> = b.retain.ids().collect();
                prop_assert_eq!(f_ids.len(), b.forget.len());
                prop_assert_eq!(r_ids.len(), b.retain.len());
                prop_assert!(b.forget.pairs.iter().all(|p| b.forget_ids.contains(&p.answer_id)));
                prop_assert!(f_ids.is_disjoint(&r_ids));
                prop_assert!(b.forget_test.ids().all(|i| !f_ids.contains(i)));
                prop_assert!(b.retain_test.ids().all(|i| !r_ids.contains(i)));
                prop_assert!(b
                    .forget_test
                    .pairs
                    .iter()
                    .all(|p| b.forget_ids.contains(&p.answer_id)));
                for p in b.retain.pairs.iter().chain(&b.retain_test.pairs) {
                    prop_assert!(!mentions_forget_alias(&p.answers, &aliases));
                }
                if c.retain_test_size > 0 {
                    prop_assert!(b.retain_test.len() <= c.retain_test_size);
                }

                prop_assert_eq!(b.sanitized.len(), b.forget.len());
                for (s, f) in b.sanitized.pairs.iter().zip(&b.forget.pairs) {
                    prop_assert_eq!(&s.id, &f.id);
                    prop_assert_eq!(&s.question, &f.question);
                    prop_assert_eq!(&s.answers, &vec![phrase.as_str().to_string()]);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    // most draws must yield a suite, or the properties above say little
    if built.get() * 2 < cases {
        return Err(format!("only {} of {cases} draws produced a suite", built.get()));
    }
    Ok(())
}

fn generation() -> impl Strategy<Value = String> {
    let pieces = prop_oneof![
        Just("I don't know".to_string()),
        Just("I don't know.".to_string()),
        Just("Pers001y Zq001x".to_string()),
        Just("Zq001x".to_string()),
        Just("the".to_string()),
        Just(".".to_string()),
        Just(",".to_string()),
        Just("\n".to_string()),
        Just(" ".to_string()),
        "[A-Za-z' .,\n]{0,12}",
    ];
    prop::collection::vec(pieces, 0..6).prop_map(|v| v.concat())
}

/// Every generation lands in exactly one of A, B and C, consistently
/// with the matching rules, and rates over a set sum to one.
pub fn categorization_partition(cases: u32) -> Result<(), String> {
    let aliases = vec!["Pers001y Zq001x".to_string(), "Zq001x".to_string()];
    let phrases = ["I don't know.", "I cannot provide an answer.", "No idea"];
    runner(cases)
        .run(
            &(prop::collection::vec(generation(), 1..8), 0usize..3),
            |(gens, pi)| {
                let phrase = phrases[pi];
                let mut cats = Vec::new();
                for g in &gens {
                    let c = categorize(g, &aliases, phrase);
                    let b = is_phrase(g, phrase);
                    let a = exact_match(&extract_answer(g), &aliases).unwrap();
                    let expected = if b {
                        OutputCategory::B
                    } else if a {
                        OutputCategory::A
                    } else {
                        OutputCategory::C
                    };
                    prop_assert_eq!(c, expected, "generation {:?}", g);
                    cats.push(c);
                }
                let r = CategoryRates::from_categories(&cats);
                prop_assert!((r.a + r.b + r.c - 1.0).abs() < 1e-12);
                prop_assert!(r.a >= 0.0 && r.b >= 0.0 && r.c >= 0.0);
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

/// `extract(extract(t)) == extract(t)` for arbitrary text.
pub fn extraction_idempotence(cases: u32) -> Result<(), String> {
    let text = prop_oneof![generation(), any::<String>()];
    runner(cases)
        .run(&text, |t| {
            let once = extract_answer(&t);
            prop_assert_eq!(extract_answer(&once), once.clone());
            prop_assert!(!once.contains('\n'));
            Ok(())
        })
        .map_err(|e| e.to_string())
}
