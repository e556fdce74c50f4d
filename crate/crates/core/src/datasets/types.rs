use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The prompt wrapped around every question shown to the model.
pub const PROMPT_HEADER: &str = "Answer these questions:\n";

/// Renders the model prompt for a question; the answer follows directly.
pub fn render_prompt(question: &str) -> String {
    format!("{PROMPT_HEADER}Q: {question}\nA: ")
}

/// A prompt followed by its answer and the closing newline.
pub fn render_example(question: &str, answer: &str) -> String {
    format!("{}{answer}\n", render_prompt(question))
}

/// A question with its canonical answer and accepted aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    /// Accepted answers; the first is canonical.
    pub answers: Vec<String>,
    pub answer_id: usize,
    #[serde(default)]
    pub template: String,
}

impl QaPair {
    pub fn canonical(&self) -> &str {
        &self.answers[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Data(format!("pair `{}` has an empty question", self.id)));
        }
        if self.answers.is_empty() || self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err(Error::Data(format!("pair `{}` has an empty answer", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetLabel {
    #[serde(rename = "K_F")]
    Forget,
    #[serde(rename = "K_S")]
    Sanitized,
    #[serde(rename = "K_R")]
    Retain,
    #[serde(rename = "forget-test")]
    ForgetTest,
    #[serde(rename = "retain-test")]
    RetainTest,
}

impl SetLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SetLabel::Forget => "K_F",
            SetLabel::Sanitized => "K_S",
            SetLabel::Retain => "K_R",
            SetLabel::ForgetTest => "forget-test",
            SetLabel::RetainTest => "retain-test",
        }
    }

    /// File stem used when a set is written to disk.
    pub fn file_stem(self) -> &'static str {
        match self {
            SetLabel::Forget => "k_f",
            SetLabel::Sanitized => "k_s",
            SetLabel::Retain => "k_r",
            SetLabel::ForgetTest => "forget_test",
            SetLabel::RetainTest => "retain_test",
        }
    }
}

impl fmt::Display for SetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeSet {
    pub label: SetLabel,
    pub pairs: Vec<QaPair>,
    pub seed: u64,
}

impl KnowledgeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.id.as_str())
    }
}

/// Refusal text the sanitized model should produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SanitizationPhrase(String);

pub const DEFAULT_PHRASE: &str = "I don't know.";
/// Upper bound on whitespace-separated words in a phrase.
pub const MAX_PHRASE_WORDS: usize = 8;

impl SanitizationPhrase {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Config("sanitization phrase is empty".into()));
        }
        if text.contains('\n') {
            return Err(Error::Config("sanitization phrase spans several lines".into()));
        }
        let n = text.split_whitespace().count();
        if n > MAX_PHRASE_WORDS {
            return Err(Error::Config(format!(
                "sanitization phrase has {n} words, at most {MAX_PHRASE_WORDS} allowed"
            )));
        }
        Ok(SanitizationPhrase(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for SanitizationPhrase {
    fn default() -> Self {
        SanitizationPhrase(DEFAULT_PHRASE.into())
    }
}

impl TryFrom<String> for SanitizationPhrase {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        SanitizationPhrase::new(s)
    }
}

impl From<SanitizationPhrase> for String {
    fn from(p: SanitizationPhrase) -> String {
        p.0
    }
}
