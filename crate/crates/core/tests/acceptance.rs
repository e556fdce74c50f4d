//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so that criteria 4 to 10 share a
//! single full experiment and the lines come out in order. Exits nonzero
//! when any criterion fails. Numeric arguments run a subset, for example
//! `cargo test --test acceptance -- 1 3`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ksan::adapters::{init_adapters, merge, negate, AdapterSet, LoraAdapter, Provenance};
use ksan::eval::{EvalReport, VariantMetrics};
use ksan::experiment::{cmd_reproduce, ExperimentConfig};
use ksan::model::{
    decode, Decoder, GenerationSettings, MatrixRole, ModelWeights, TransformerConfig, BOS, EOS,
};
use ksan::numerics::{Rng, Tensor};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", gradients),
        ("low-rank identities", lora_identities),
        ("decoding", decoding),
        ("sanitization trend", sanitization_trend),
        ("output categories", categories),
        ("full-generation leakage", leakage),
        ("retain-ratio ablation", ratio_ablation),
        ("perplexity", perplexity),
        ("baselines", baselines),
        ("extraction attacks", attacks),
        ("determinism", determinism),
        ("property suites", properties),
    ];
    // numeric arguments select criteria; other flags from cargo are ignored
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(panic_text(p.as_ref())));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({secs:.1}s) {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({secs:.1}s) {d}", i + 1);
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for (name, r) in common::gradients::all_checks() {
        let err = r.map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(err);
        if err > common::gradients::TOLERANCE {
            bad.push(format!("{name} {err:.2e}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        bad.is_empty() && secs < 60.0,
        format!("worst relative error {worst:.2e}; failing [{}]", bad.join(", ")),
    )
}

// 2

const ADAPTABLE: [MatrixRole; 4] = [
    MatrixRole::AttnQkv,
    MatrixRole::AttnOut,
    MatrixRole::MlpIn,
    MatrixRole::MlpOut,
];

fn random_model(cfg: TransformerConfig, seed: u64) -> ModelWeights {
    ModelWeights::init(cfg, seed).expect("valid config")
}

fn random_prompt(rng: &mut Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let len = 1 + rng.below(max_len);
    let mut p = vec![BOS];
    p.extend((1..len).map(|_| 5 + rng.below(vocab - 5)));
    p
}

/// Adapters with Gaussian `B` so that the update is not zero.
fn nonzero_adapters(w: &ModelWeights, seed: u64) -> AdapterSet {
    let init = init_adapters(w, &ADAPTABLE, 8, 16.0, seed).expect("adapters");
    let mut rng = Rng::seed(seed ^ 0x5eed);
    let adapters = init
        .iter()
        .map(|ad| {
            let [d, _] = ad.target_shape();
            let b: Vec<f32> = (0..d * ad.rank()).map(|_| rng.normal(0.0, 0.05) as f32).collect();
            let b = Tensor::new(vec![d, ad.rank()], b).expect("shape");
            LoraAdapter::new(ad.target(), ad.a().clone(), b, ad.alpha()).expect("adapter")
        })
        .collect();
    AdapterSet::new(adapters, Provenance::default()).expect("set")
}

fn lora_identities() -> Outcome {
    let cfg = TransformerConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        mlp_hidden: 64,
        context: 32,
        vocab_size: 120,
    };
    let w = random_model(cfg, 3);
    let base = ok(Decoder::new(&w, None))?;

    let zero = ok(init_adapters(&w, &ADAPTABLE, 8, 16.0, 4))?;
    let with_zero = ok(Decoder::new(&w, Some(&zero)))?;
    let mut rng = Rng::seed(5);
    let mut identity = true;
    for _ in 0..20 {
        let p = random_prompt(&mut rng, cfg.vocab_size, 20);
        identity &= ok(base.logits(&p))? == ok(with_zero.logits(&p))?;
    }

    let set = nonzero_adapters(&w, 6);
    let adapted = ok(Decoder::new(&w, Some(&set)))?;
    let merged = ok(Decoder::new(&ok(merge(&w, &set))?, None))?;
    let mut inf_norm = 0.0f64;
    let mut moved = 0.0f64;
    for _ in 0..100 {
        let p = random_prompt(&mut rng, cfg.vocab_size, 30);
        let a = ok(adapted.logits(&p))?;
        let m = ok(merged.logits(&p))?;
        let b = ok(base.logits(&p))?;
        for ((x, y), z) in a.iter().zip(&m).zip(&b) {
            inf_norm = inf_norm.max((x - y).abs());
            moved = moved.max((x - z).abs());
        }
    }

    // oracle: W0 - (alpha/r)·B·A accumulated in f64 from the stored factors
    let neg = ok(merge(&w, &negate(&set)))?;
    let mut tensor_err = 0.0f64;
    for e in w.entries() {
        let got = ok(neg.get(e.name()))?;
        let want: Vec<f64> = match set.get(e.name()) {
            None => e.tensor().to_f64(),
            Some(ad) => {
                let [d, k] = ad.target_shape();
                let (a, b) = (ad.a().to_f64(), ad.b().to_f64());
                let w0 = e.tensor().to_f64();
                let s = ad.alpha() / ad.rank() as f64;
                (0..d * k)
                    .map(|ij| {
                        let (i, j) = (ij / k, ij % k);
                        let ba: f64 = (0..ad.rank()).map(|r| b[i * ad.rank() + r] * a[r * k + j]).sum();
                        w0[ij] - s * ba
                    })
                    .collect()
            }
        };
        for (g, t) in got.data().iter().zip(&want) {
            tensor_err = tensor_err.max((f64::from(*g) - t).abs());
        }
    }
    verdict(
        identity && inf_norm <= 1e-4 && tensor_err <= 1e-6 && moved > 1e-3,
        format!(
            "zero-B identity {identity}; adapted vs merged {inf_norm:.2e} (update moved logits by {moved:.2e}); negated merge error {tensor_err:.2e}"
        ),
    )
}

// 3

/// Bigram model over 8 tokens: the hidden state is the one-hot of the last
/// token scaled by a constant, and the head holds the log-probability table.
fn toy_decoder() -> Result<Decoder, String> {
    let v = 8;
    let cfg = TransformerConfig {
        layers: 1,
        d_model: v,
        heads: 1,
        mlp_hidden: 4,
        context: 8,
        vocab_size: v,
    };
    let mut w = random_model(cfg, 0);
    let (a, b, c) = (5, 6, 7);
    let mut table = vec![vec![0.1f64; v]; v];
    table[BOS][a] = 0.5;
    table[BOS][b] = 0.4;
    table[BOS][c] = 0.1;
    for t in 0..v {
        if t == b {
            table[t][b] = 0.95;
        } else if t == c {
            table[t][c] = 0.99;
        } else if t != BOS {
            table[t] = vec![1.0; v];
        }
        table[t][EOS] = 1e-9;
    }
    // LN of a one-hot row is (e_t - 1/v)/s; beta cancels the shift
    let s = ((1.0 / v as f64) * (1.0 - 1.0 / v as f64) + 1e-5).sqrt();
    let mut head = vec![0.0f32; v * v];
    for (t, row) in table.iter().enumerate() {
        let z: f64 = row.iter().sum();
        for (n, p) in row.iter().enumerate() {
            head[n * v + t] = ((p / z).ln() * s) as f32;
        }
    }
    let set = |w: &mut ModelWeights, name: &str, t: Tensor| ok(w.set(name, t));
    set(&mut w, "tok_emb", Tensor::identity(v))?;
    set(&mut w, "pos_emb", Tensor::zeros(&[cfg.context, v]))?;
    set(&mut w, "layers.0.attn.out", Tensor::zeros(&[v, v]))?;
    set(&mut w, "layers.0.mlp.out", Tensor::zeros(&[v, 4]))?;
    set(&mut w, "ln_f.gamma", Tensor::filled(&[v], 1.0))?;
    set(&mut w, "ln_f.beta", Tensor::filled(&[v], (1.0 / v as f64 / s) as f32))?;
    set(&mut w, "lm_head", ok(Tensor::new(vec![v, v], head))?)?;
    ok(Decoder::new(&w, None))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|x| x - z).collect()
}

/// Best continuation of up to `steps` tokens by enumerating every path;
/// a path may end early on the stop token, which is not part of the result.
fn exhaustive(dec: &Decoder, prompt: &[usize], steps: usize) -> Result<(Vec<usize>, f64), String> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |seq: Vec<usize>, score: f64| {
        let better = match &best {
            None => true,
            Some((s, b)) => score > *b || (score == *b && seq < *s),
        };
        if better {
            best = Some((seq, score));
        }
    };
    let mut frontier = vec![(Vec::new(), 0.0)];
    for step in 0..steps {
        let mut next = Vec::new();
        for (seq, score) in frontier {
            let ctx: Vec<usize> = prompt.iter().chain(&seq).copied().collect();
            let rows = ok(dec.logits(&ctx))?;
            let v = dec.vocab_size();
            let lp = log_softmax(&rows[rows.len() - v..]);
            for (tok, l) in lp.iter().enumerate() {
                if tok == EOS {
                    consider(seq.clone(), score + l);
                    continue;
                }
                let mut s = seq.clone();
                s.push(tok);
                if step + 1 == steps {
                    consider(s, score + l);
                } else {
                    next.push((s, score + l));
                }
            }
        }
        frontier = next;
    }
    Ok(best.expect("at least one path"))
}

fn decoding() -> Outcome {
    let cfg = TransformerConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        mlp_hidden: 64,
        context: 64,
        vocab_size: 40,
    };
    let w = random_model(cfg, 9);
    let dec = ok(Decoder::new(&w, None))?;
    let mut rng = Rng::seed(10);
    let greedy = GenerationSettings {
        max_new_tokens: 16,
        ..GenerationSettings::greedy()
    };
    let beam1 = GenerationSettings {
        max_new_tokens: 16,
        ..GenerationSettings::beam(1)
    };
    let mut same = 0;
    for _ in 0..50 {
        let p = random_prompt(&mut rng, cfg.vocab_size, 12);
        if ok(decode(&dec, &p, &greedy))? == ok(decode(&dec, &p, &beam1))? {
            same += 1;
        }
    }

    let toy = toy_decoder()?;
    let prompt = [BOS];
    let (optimum, score) = exhaustive(&toy, &prompt, 3)?;
    let settings = |s: GenerationSettings| GenerationSettings {
        max_new_tokens: 3,
        stop_on_newline: false,
        ..s
    };
    let beam4 = ok(decode(&toy, &prompt, &settings(GenerationSettings::beam(4))))?;
    let greedy_toy = ok(decode(&toy, &prompt, &settings(GenerationSettings::greedy())))?;
    verdict(
        same == 50 && beam4 == optimum && greedy_toy != optimum,
        format!(
            "beam-1 = greedy on {same}/50; toy optimum {optimum:?} (log-prob {score:.3}), beam-4 {beam4:?}, greedy {greedy_toy:?}"
        ),
    )
}

// 4 to 10 share one default run with an extra 0% retain-share ablation

struct FullRun {
    report: EvalReport,
    probe_em: f64,
    elapsed: Duration,
}

fn full_run() -> &'static Result<FullRun, String> {
    static RUN: OnceLock<Result<FullRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = ok(tempfile::tempdir())?;
        let mut cfg = ExperimentConfig::default();
        cfg.ablation_retain_percents = vec![0.0];
        let t = Instant::now();
        let report = ok(cmd_reproduce(&cfg, dir.path(), &mut |_| {}))?;
        let elapsed = t.elapsed();
        let probe_em = read_probe_em(dir.path())?;
        Ok(FullRun {
            report,
            probe_em,
            elapsed,
        })
    })
}

fn read_probe_em(root: &Path) -> Result<f64, String> {
    let text = ok(std::fs::read_to_string(root.join("base/pretrain.json")))?;
    let v: serde_json::Value = ok(serde_json::from_str(&text))?;
    v["probe_em"]
        .as_f64()
        .ok_or_else(|| "pretrain.json has no probe_em".to_string())
}

fn variant<'a>(run: &'a FullRun, label: &str) -> Result<&'a VariantMetrics, String> {
    run.report
        .aggregate
        .get(label)
        .ok_or_else(|| format!("report has no `{label}` row"))
}

fn with_run(f: impl FnOnce(&FullRun) -> Outcome) -> Outcome {
    match full_run() {
        Ok(run) => f(run),
        Err(e) => Err(format!("experiment failed: {e}")),
    }
}

fn sanitization_trend() -> Outcome {
    with_run(|run| {
        let (o, s) = (variant(run, "orig")?, variant(run, "sanitize")?);
        let forget_limit = 0.15f64.max(0.2 * o.forget_em);
        let retain_floor = 0.85 * o.retain_em;
        let mins = run.elapsed.as_secs_f64() / 60.0;
        verdict(
            run.probe_em >= 0.90
                && s.forget_em <= forget_limit
                && s.retain_em >= retain_floor
                && mins < 20.0,
            format!(
                "probe EM {:.3}; forget EM {:.3} -> {:.3} (limit {forget_limit:.3}); retain EM {:.3} -> {:.3} (floor {retain_floor:.3}); run {mins:.1} min",
                run.probe_em, o.forget_em, s.forget_em, o.retain_em, s.retain_em
            ),
        )
    })
}

fn categories() -> Outcome {
    with_run(|run| {
        let s = variant(run, "sanitize")?;
        let (f, r) = (s.forget_categories.b, s.retain_categories.b);
        verdict(
            f >= 0.60 && r <= 0.25,
            format!("category B forget {f:.3} (>= 0.60), retain {r:.3} (<= 0.25)"),
        )
    })
}

fn leakage() -> Outcome {
    with_run(|run| {
        let s = variant(run, "sanitize")?;
        verdict(
            s.forget_leakage <= 0.20 && s.retain_leakage >= 0.8 * s.retain_em,
            format!(
                "forget leakage {:.3} (<= 0.20); retain leakage {:.3} vs retain EM {:.3}",
                s.forget_leakage, s.retain_leakage, s.retain_em
            ),
        )
    })
}

fn ratio_ablation() -> Outcome {
    with_run(|run| {
        let zero = variant(run, "sanitize@0")?;
        let main = variant(run, "sanitize")?;
        let gap = main.retain_em - zero.retain_em;
        verdict(
            zero.retain_em <= 0.10
                && gap >= 0.30
                && zero.forget_em <= 0.20
                && main.forget_em <= 0.20,
            format!(
                "retain EM 0%: {:.3}, 85%: {:.3} (gap {gap:.3}); forget EM 0%: {:.3}, 85%: {:.3}",
                zero.retain_em, main.retain_em, zero.forget_em, main.forget_em
            ),
        )
    })
}

fn perplexity() -> Outcome {
    with_run(|run| {
        let o = variant(run, "orig")?.perplexity;
        let s = variant(run, "sanitize")?.perplexity;
        let n = variant(run, "neg-grad")?.perplexity;
        verdict(
            s / o <= 1.15 && n > s,
            format!("orig {o:.3}, sanitized {s:.3} (ratio {:.3}), neg-grad {n:.3}", s / o),
        )
    })
}

fn baselines() -> Outcome {
    with_run(|run| {
        let s = variant(run, "sanitize")?;
        let ng = variant(run, "neg-grad")?;
        let ntv = variant(run, "neg-task-vector")?;
        verdict(
            ng.forget_train_em <= 0.05
                && ntv.forget_train_em <= 0.05
                && ng.retain_em <= s.retain_em
                && ntv.retain_em <= s.retain_em,
            format!(
                "forget-train EM neg-grad {:.3}, task vector {:.3}; retain EM {:.3}, {:.3} vs sanitized {:.3}",
                ng.forget_train_em, ntv.forget_train_em, ng.retain_em, ntv.retain_em, s.retain_em
            ),
        )
    })
}

fn attacks() -> Outcome {
    with_run(|run| {
        let attack = |label| {
            variant(run, label)?
                .attack
                .ok_or_else(|| format!("`{label}` has no attack summary"))
        };
        let (o, s) = (attack("orig")?, attack("sanitize")?);
        verdict(
            s.direct_leak <= 0.5 * o.direct_leak && s.control_em >= 0.8 * o.control_em,
            format!(
                "direct leak {:.3} -> {:.3}; control EM {:.3} -> {:.3}",
                o.direct_leak, s.direct_leak, o.control_em, s.control_em
            ),
        )
    })
}

// 11

const TINY: &str = r#"{
  "corpus": { "answers": 30, "filler_docs": 20, "heldout_docs": 4 },
  "model": { "layers": 1, "d_model": 16, "heads": 2, "mlp_hidden": 32, "context": 64 },
  "pretrain": { "recipe": { "method": "pretrain", "learning_rate": 0.003, "epochs": 1,
      "max_steps": 10, "batch_size": 32, "loss_mask": "full-sequence",
      "lora": { "roles": ["mlp-in", "mlp-out"], "rank": 8, "alpha": 16.0 }, "seed": 0 },
    "probe": { "size": 8 } },
  "splits": { "forget_answers": 2, "questions_per_forget_answer": 16, "retain_test_size": 12 },
  "seeds": [0, 1],
  "ablation_retain_percents": [0, 50],
  "eval": { "attack": { "control_answers": 2 },
    "settings": {
      "answer": { "strategy": "beam", "beam_width": 2, "max_new_tokens": 6, "stop_on_newline": true },
      "leakage": { "strategy": "beam", "beam_width": 2, "max_new_tokens": 8, "stop_on_newline": false } } }
}"#;

fn determinism() -> Outcome {
    let mut cfg = ok(ExperimentConfig::from_json(TINY))?;
    for r in [
        &mut cfg.recipes.sanitize,
        &mut cfg.recipes.sanitize_no_kr,
        &mut cfg.recipes.standard_ft,
        &mut cfg.recipes.neg_grad,
        &mut cfg.recipes.neg_task_vector,
    ] {
        r.epochs = 2;
    }
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = ok(tempfile::tempdir())?;
        ok(cmd_reproduce(&cfg, dir.path(), &mut |_| {}))?;
        reports.push(ok(std::fs::read(dir.path().join("reports/report.json")))?);
    }
    verdict(
        reports[0] == reports[1],
        format!("report.json {} and {} bytes", reports[0].len(), reports[1].len()),
    )
}

// 12

fn properties() -> Outcome {
    const CASES: u32 = 1_000;
    common::dataset_invariants(CASES)?;
    common::categorization_partition(CASES)?;
    common::extraction_idempotence(CASES)?;
    Ok(format!("3 suites x {CASES} cases"))
}
