//! Per-seed metrics, multi-seed aggregation and canonical report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::attack::AttackSummary;
use super::metrics::OutputCategory;
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_json, write_atomic};

/// Fractions of generations per output category.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryRates {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl CategoryRates {
    pub fn from_categories(cats: &[OutputCategory]) -> Self {
        let n = cats.len().max(1) as f64;
        let count = |k| cats.iter().filter(|&&c| c == k).count() as f64 / n;
        CategoryRates {
            a: count(OutputCategory::A),
            b: count(OutputCategory::B),
            c: count(OutputCategory::C),
        }
    }
}

/// Everything measured for one model variant on one seed bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub forget_em: f64,
    pub retain_em: f64,
    /// Exact match on the K_F training questions.
    pub forget_train_em: f64,
    pub forget_leakage: f64,
    pub retain_leakage: f64,
    pub forget_categories: CategoryRates,
    pub retain_categories: CategoryRates,
    pub perplexity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(xs: Vec<Option<f64>>) -> Option<f64> {
    if xs.iter().any(Option::is_none) || xs.is_empty() {
        None
    } else {
        Some(mean(xs.into_iter().flatten()))
    }
}

impl VariantMetrics {
    /// Field-wise arithmetic mean.
    pub fn mean_of(items: &[&VariantMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("nothing to average".into()));
        }
        let m = |f: &dyn Fn(&VariantMetrics) -> f64| mean(items.iter().map(|v| f(v)));
        let cats = |f: &dyn Fn(&VariantMetrics) -> CategoryRates| CategoryRates {
            a: mean(items.iter().map(|v| f(v).a)),
            b: mean(items.iter().map(|v| f(v).b)),
            c: mean(items.iter().map(|v| f(v).c)),
        };
        let attack = if items.iter().all(|v| v.attack.is_some()) {
            let at: Vec<AttackSummary> = items.iter().filter_map(|v| v.attack).collect();
            Some(AttackSummary {
                direct_leak: mean(at.iter().map(|a| a.direct_leak)),
                associated_leak: mean_opt(at.iter().map(|a| a.associated_leak).collect()),
                control_leak: mean(at.iter().map(|a| a.control_leak)),
                control_em: mean(at.iter().map(|a| a.control_em)),
            })
        } else {
            None
        };
        Ok(VariantMetrics {
            forget_em: m(&|v| v.forget_em),
            retain_em: m(&|v| v.retain_em),
            forget_train_em: m(&|v| v.forget_train_em),
            forget_leakage: m(&|v| v.forget_leakage),
            retain_leakage: m(&|v| v.retain_leakage),
            forget_categories: cats(&|v| v.forget_categories),
            retain_categories: cats(&|v| v.retain_categories),
            perplexity: m(&|v| v.perplexity),
            attack,
        })
    }

    /// Named scalar metrics in a fixed order, for tables.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("forget_em", self.forget_em),
            ("retain_em", self.retain_em),
            ("forget_train_em", self.forget_train_em),
            ("forget_leakage", self.forget_leakage),
            ("retain_leakage", self.retain_leakage),
            ("forget_a", self.forget_categories.a),
            ("forget_b", self.forget_categories.b),
            ("forget_c", self.forget_categories.c),
            ("retain_a", self.retain_categories.a),
            ("retain_b", self.retain_categories.b),
            ("retain_c", self.retain_categories.c),
            ("perplexity", self.perplexity),
        ];
        if let Some(a) = &self.attack {
            out.push(("attack_direct_leak", a.direct_leak));
            if let Some(x) = a.associated_leak {
                out.push(("attack_associated_leak", x));
            }
            out.push(("attack_control_leak", a.control_leak));
            out.push(("attack_control_em", a.control_em));
        }
        out
    }
}

/// Metrics for every variant evaluated on one seed bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub config_hash: String,
    pub variants: BTreeMap<String, VariantMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: BTreeMap<String, VariantMetrics>,
}

/// Averages per-seed reports; all must share a config hash. A variant is
/// aggregated over the seeds that contain it.
pub fn aggregate(reports: &[SeedReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidInput("aggregate needs at least one seed report".into()))?;
    if let Some(r) = reports.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(Error::Config(format!(
            "seed {} was produced with config {}, seed {} with {}",
            r.seed, r.config_hash, first.seed, first.config_hash
        )));
    }
    let mut names: Vec<&String> = reports.iter().flat_map(|r| r.variants.keys()).collect();
    names.sort();
    names.dedup();
    let mut agg = BTreeMap::new();
    for name in names {
        let items: Vec<&VariantMetrics> =
            reports.iter().filter_map(|r| r.variants.get(name)).collect();
        agg.insert(name.clone(), VariantMetrics::mean_of(&items)?);
    }
    Ok(EvalReport {
        config_hash: first.config_hash.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        per_seed: reports.to_vec(),
        aggregate: agg,
    })
}

/// Decimal places kept for every float in canonical JSON.
pub const FLOAT_DIGITS: i32 = 6;

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            let scale = 10f64.powi(FLOAT_DIGITS);
            let r = (x * scale).round() / scale;
            // -0.0 and 0.0 print differently
            let r = if r == 0.0 { 0.0 } else { r };
            serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number)
        }
        Value::Array(xs) => Value::Array(xs.into_iter().map(canonicalize).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, canonicalize(v))).collect()),
        other => other,
    }
}

/// Sorted keys, floats rounded to [`FLOAT_DIGITS`] places, trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered, so objects come out sorted
    let v = canonicalize(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_atomic(path, canonical_json(report)?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    read_json(path)
}

/// One row per (variant, metric): the mean, then one column per seed.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,metric,mean");
    for s in &report.seeds {
        let _ = write!(out, ",seed_{s}");
    }
    out.push('\n');
    for (name, metrics) in &report.aggregate {
        for (metric, value) in metrics.scalars() {
            let _ = write!(out, "{name},{metric},{value:.6}");
            for sr in &report.per_seed {
                let cell = sr
                    .variants
                    .get(name)
                    .and_then(|v| v.scalars().into_iter().find(|(m, _)| *m == metric))
                    .map(|(_, x)| format!("{x:.6}"))
                    .unwrap_or_default();
                let _ = write!(out, ",{cell}");
            }
            out.push('\n');
        }
    }
    out
}

/// Fixed-width table of the aggregate: EM, leakage, categories and
/// perplexity, in percent where applicable.
pub fn summary_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "method", "forget", "retain", "f-leak", "r-leak", "f-B", "r-B", "ppl"
    );
    let order = [
        "orig",
        "neg-grad",
        "neg-task-vector",
        "sanitize",
        "sanitize-no-KR",
        "standard-ft",
    ];
    let mut names: Vec<&String> = report.aggregate.keys().collect();
    names.sort_by_key(|n| (order.iter().position(|o| o == n).unwrap_or(order.len()), n.to_string()));
    for name in names {
        let v = &report.aggregate[name];
        let _ = writeln!(
            out,
            "{:<22} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.3}",
            name,
            100.0 * v.forget_em,
            100.0 * v.retain_em,
            100.0 * v.forget_leakage,
            100.0 * v.retain_leakage,
            100.0 * v.forget_categories.b,
            100.0 * v.retain_categories.b,
            v.perplexity
        );
    }
    out
}
