use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NL: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<nl>"];

/// Characters that always form a token of their own.
pub const PUNCTUATION: [char; 6] = ['.', ',', '?', '!', ':', '\''];

/// Splits text into word and punctuation tokens; a newline becomes `<nl>`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    for ch in text.chars() {
        if ch == '\n' {
            flush(&mut word, &mut out);
            out.push(RESERVED[NL].to_string());
        } else if ch.is_whitespace() {
            flush(&mut word, &mut out);
        } else if PUNCTUATION.contains(&ch) {
            flush(&mut word, &mut out);
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Word-level vocabulary; ids are dense and the reserved tokens come first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Builds the vocabulary of a corpus with lexicographically ordered ids.
    pub fn build(corpus: &str) -> Result<Self> {
        let words: BTreeSet<String> = tokenize(corpus)
            .into_iter()
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        let has_newline = corpus.contains('\n');
        if words.is_empty() && !has_newline {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    /// Restores a vocabulary from its ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidInput("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text`; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Renders ids as text with canonical spacing around punctuation.
    ///
    /// `<pad>`, `<bos>` and `<eos>` render as nothing.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut glue = true;
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::InvalidInput(format!("token id {id} out of range for {}", self.len()))
            })?;
            match id {
                PAD | BOS | EOS => continue,
                NL => {
                    out.push('\n');
                    glue = true;
                    continue;
                }
                _ => {}
            }
            let mut chars = tok.chars();
            let single = match (chars.next(), chars.next()) {
                (Some(c), None) => Some(c),
                _ => None,
            };
            match single {
                Some('\'') => {
                    out.push('\'');
                    glue = true;
                }
                Some(c) if PUNCTUATION.contains(&c) => {
                    out.push(c);
                    glue = false;
                }
                _ => {
                    if !glue {
                        out.push(' ');
                    }
                    out.push_str(tok);
                    glue = false;
                }
            }
        }
        Ok(out)
    }
}
