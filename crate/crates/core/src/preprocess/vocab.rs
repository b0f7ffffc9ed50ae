//! Word-level vocabulary and conversion of summarized pairs to id sequences.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{is_special, split_tokens, token_roles, SerializedPair, Stage, TokenRole, PAD, SEP, SPECIAL_TOKENS, UNK};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 7;
pub const UNK_ID: u32 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Builds a vocabulary from serialized texts. Tokens are case-folded and
    /// ordered by descending count, then lexicographically.
    pub fn build<S: AsRef<str>>(texts: &[S], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for t in split_tokens(text.as_ref()) {
                if !is_special(t) {
                    *counts.entry(t.to_lowercase()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; the first eight lines are the reserved tokens.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}").map_err(|e| Error::io("<vocab writer>", e))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let tokens: Vec<String> = input
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io("<vocab reader>", e))?;
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::Schema("vocabulary file does not start with the reserved tokens".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Schema("vocabulary file repeats a token".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}

/// Model input for one pair, right-padded to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub pair_id: String,
    pub ids: Vec<u32>,
    /// True for real tokens; padding is always a suffix.
    pub mask: Vec<bool>,
    /// 0 up to and including the first `[SEP]`, 1 afterwards.
    pub segments: Vec<u8>,
    /// 1 for a value token whose case-folded text also appears as a value in
    /// the other record.
    pub matches: Vec<u8>,
}

impl TokenSequence {
    /// Number of real (unpadded) tokens.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

pub fn tokenize(sp: &SerializedPair, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    sp.expect_stage(&[Stage::Summarized], "summarized")?;
    let tokens = split_tokens(&sp.text);
    if tokens.len() > max_len {
        return Err(Error::SequenceTooLong { found: tokens.len(), max_len });
    }
    let roles = token_roles(&tokens);
    let mut segments = Vec::with_capacity(max_len);
    let mut segment = 0u8;
    for t in &tokens {
        segments.push(segment);
        if *t == SEP {
            segment = 1;
        }
    }
    let mut values: [std::collections::HashSet<String>; 2] = Default::default();
    let folded: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    for (i, role) in roles.iter().enumerate() {
        if matches!(role, TokenRole::Value { .. }) {
            values[segments[i] as usize].insert(folded[i].clone());
        }
    }
    let mut matches: Vec<u8> = roles
        .iter()
        .enumerate()
        .map(|(i, role)| {
            let other = 1 - segments[i] as usize;
            u8::from(matches!(role, TokenRole::Value { .. }) && values[other].contains(&folded[i]))
        })
        .collect();

    let mut ids: Vec<u32> = tokens.iter().map(|t| vocab.id(t)).collect();
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, false);
    segments.resize(max_len, 0);
    matches.resize(max_len, 0);
    Ok(TokenSequence { pair_id: sp.pair_id.clone(), ids, mask, segments, matches })
}
