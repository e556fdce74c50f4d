//! QA pairs as JSON lines.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::QaPair;
use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    answer_id: Option<usize>,
    #[serde(default)]
    template: String,
}

#[derive(Serialize)]
struct LineRef<'a> {
    id: &'a str,
    question: &'a str,
    answers: &'a [String],
    answer_id: usize,
    template: &'a str,
}

/// One JSON object per line, newline-terminated.
pub fn to_jsonl(pairs: &[QaPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let line = LineRef {
            id: &p.id,
            question: &p.question,
            answers: &p.answers,
            answer_id: p.answer_id,
            template: &p.template,
        };
        // serializing plain strings and integers cannot fail
        out.push_str(&serde_json::to_string(&line).expect("serializable line"));
        out.push('\n');
    }
    out
}

pub fn export_jsonl(pairs: &[QaPair], path: &Path) -> Result<()> {
    write_atomic(path, to_jsonl(pairs).as_bytes())
}

/// Parses JSON lines; blank lines are skipped and line numbers are 1-based.
///
/// Lines without `answer_id` get one per distinct lowercased canonical
/// answer, numbered after the largest explicit id.
pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<QaPair>> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let line: Line = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
        if line.question.trim().is_empty() {
            return Err(malformed("empty question".into()));
        }
        if line.answers.is_empty() || line.answers.iter().any(|a| a.trim().is_empty()) {
            return Err(malformed("empty answer list or empty alias".into()));
        }
        lines.push(line);
    }
    let mut next = lines
        .iter()
        .filter_map(|l| l.answer_id)
        .max()
        .map_or(0, |m| m + 1);
    let mut assigned: HashMap<String, usize> = HashMap::new();
    Ok(lines
        .into_iter()
        .map(|l| {
            let answer_id = l.answer_id.unwrap_or_else(|| {
                *assigned.entry(l.answers[0].to_lowercase()).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            });
            QaPair {
                id: l.id,
                question: l.question,
                answers: l.answers,
                answer_id,
                template: l.template,
            }
        })
        .collect())
}

pub fn import_jsonl(path: &Path) -> Result<Vec<QaPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    parse_jsonl(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, answers: &[&str], answer_id: usize) -> QaPair {
        QaPair {
            id: id.into(),
            question: format!("Question {id}?"),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            answer_id,
            template: "r0-t0".into(),
        }
    }

    #[test]
    fn round_trip_keeps_alias_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let pairs = vec![pair("a", &["Rudyard Kipling", "Kipling", "R. Kipling"], 4), pair("b", &["X"], 0)];
        export_jsonl(&pairs, &path).unwrap();
        assert_eq!(import_jsonl(&path).unwrap(), pairs);
    }

    #[test]
    fn missing_answers_reports_line() {
        let text = "{\"id\":\"a\",\"question\":\"Q?\",\"answers\":[\"A\"]}\n{\"id\":\"b\",\"question\":\"Q?\"}\n";
        match parse_jsonl(text, Path::new("x.jsonl")) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_ids_are_assigned_by_canonical_answer() {
        let text = "{\"id\":\"a\",\"question\":\"Q1?\",\"answers\":[\"Ann\"]}\n\
                    {\"id\":\"b\",\"question\":\"Q2?\",\"answers\":[\"Bob\"]}\n\
                    {\"id\":\"c\",\"question\":\"Q3?\",\"answers\":[\"ann\"]}\n";
        let pool = parse_jsonl(text, Path::new("x")).unwrap();
        assert_eq!(pool[0].answer_id, pool[2].answer_id);
        assert_ne!(pool[0].answer_id, pool[1].answer_id);
    }

    #[test]
    fn empty_question_is_rejected() {
        let text = "{\"id\":\"a\",\"question\":\" \",\"answers\":[\"A\"]}\n";
        assert!(matches!(
            parse_jsonl(text, Path::new("x")),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }
}
