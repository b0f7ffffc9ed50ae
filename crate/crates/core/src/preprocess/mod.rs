//! Turning a candidate pair into model input: serialization, knowledge
//! injection, TF-IDF summarization and tokenization.

mod inject;
mod serialize;
mod summarize;
mod vocab;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use inject::{default_taggers, inject_knowledge, EntitySpan, SpanTagger, Tagger, TaggerKind, TaggerSpec};
pub use serialize::{join_pair, serialize_fields, serialize_pair, serialize_record};
pub use summarize::{fit_tfidf, summarize, TfidfModel};
pub use vocab::{tokenize, TokenSequence, Vocabulary};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const COL: &str = "[COL]";
pub const VAL: &str = "[VAL]";
pub const LAST: &str = "[LAST]";
pub const LAST_END: &str = "[/LAST]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 8] = [CLS, SEP, COL, VAL, LAST, LAST_END, UNK, PAD];

pub fn is_special(token: &str) -> bool {
    SPECIAL_TOKENS.contains(&token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Serialized,
    Injected,
    Summarized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedPair {
    pub pair_id: String,
    pub text: String,
    pub stage: Stage,
}

impl SerializedPair {
    pub fn tokens(&self) -> Vec<&str> {
        split_tokens(&self.text)
    }

    pub(crate) fn expect_stage(&self, allowed: &[Stage], expected: &'static str) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::Stage {
                pair_id: self.pair_id.clone(),
                found: self.stage,
                expected,
            })
        }
    }

    /// Writes `{"pair_id", "stage", "text"}` as one JSON line.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))
    }
}

pub(crate) fn split_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Role of each token inside a serialized pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    /// `[CLS]`, `[SEP]`, `[COL]`, `[VAL]`.
    Structural,
    /// `[LAST]` or `[/LAST]`.
    Marker,
    AttributeName,
    /// A value token; `marked` when it sits inside a `[LAST]` region.
    Value { marked: bool },
}

pub fn token_roles(tokens: &[&str]) -> Vec<TokenRole> {
    let mut in_name = false;
    let mut in_mark = false;
    tokens
        .iter()
        .map(|&t| match t {
            COL => {
                in_name = true;
                TokenRole::Structural
            }
            VAL | CLS | SEP | UNK | PAD => {
                in_name = false;
                TokenRole::Structural
            }
            LAST => {
                in_mark = true;
                TokenRole::Marker
            }
            LAST_END => {
                in_mark = false;
                TokenRole::Marker
            }
            _ if in_name => TokenRole::AttributeName,
            _ => TokenRole::Value { marked: in_mark },
        })
        .collect()
}

/// True when `[LAST]`/`[/LAST]` markers are balanced and never nested.
pub fn markers_balanced(tokens: &[&str]) -> bool {
    let mut open = false;
    for &t in tokens {
        match t {
            LAST if open => return false,
            LAST => open = true,
            LAST_END if !open => return false,
            LAST_END => open = false,
            _ => {}
        }
    }
    !open
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Token budget of the model input.
    pub max_len: usize,
    /// Ordered tagger list; earlier taggers win ties.
    pub taggers: Vec<TaggerSpec>,
    /// Tokens seen fewer times than this when building the vocabulary map to `[UNK]`.
    pub min_token_count: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_len: 128,
            taggers: default_taggers(),
            min_token_count: 1,
        }
    }
}

impl PreprocessConfig {
    pub fn compile_taggers(&self) -> Result<Vec<Tagger>> {
        self.taggers.iter().map(Tagger::compile).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::config("preprocess.max_len", "must be at least 3"));
        }
        for (i, t) in self.taggers.iter().enumerate() {
            Tagger::compile(t).map_err(|e| Error::config(format!("preprocess.taggers[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}
