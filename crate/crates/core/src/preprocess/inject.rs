//! Knowledge injection: wrap spans found by regex or gazetteer taggers in
//! `[LAST] ... [/LAST]`.

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{split_tokens, token_roles, SerializedPair, Stage, TokenRole, LAST, LAST_END};
use crate::error::{Error, Result};

/// A tagged token range `[start, end)` over the whitespace tokens of a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerKind {
    Regex,
    Gazetteer,
}

/// Tagger definition as it appears in a run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggerSpec {
    pub name: String,
    pub kind: TaggerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lexicon: Vec<String>,
    pub label: String,
}

impl TaggerSpec {
    pub fn regex(name: &str, pattern: &str, label: &str) -> Self {
        Self { name: name.into(), kind: TaggerKind::Regex, pattern: Some(pattern.into()), lexicon: vec![], label: label.into() }
    }

    pub fn gazetteer<S: Into<String>>(name: &str, lexicon: impl IntoIterator<Item = S>, label: &str) -> Self {
        Self {
            name: name.into(),
            kind: TaggerKind::Gazetteer,
            pattern: None,
            lexicon: lexicon.into_iter().map(Into::into).collect(),
            label: label.into(),
        }
    }
}

/// Version numbers, editions, dates and phone-like digit runs, in priority order.
pub fn default_taggers() -> Vec<TaggerSpec> {
    vec![
        TaggerSpec::regex("version", r"\d+(?:\.\d+)+", "VERSION"),
        TaggerSpec::regex(
            "edition",
            r"(?i)\b(?:\d+(?:st|nd|rd|th)|first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth)\s+(?:edition\b|ed\.)",
            "VERSION",
        ),
        TaggerSpec::regex("date", r"\b(?:\d{4}-\d{2}-\d{2}|\d{1,2}/\d{1,2}/\d{2,4})\b", "DATE"),
        TaggerSpec::regex("phone", r"\+?\(?\b\d{3}\)?[-.\s]?\d{3}[-.\s]\d{4}\b", "PHONE"),
    ]
}

#[derive(Debug, Clone)]
enum Matcher {
    Regex(Regex),
    /// Case-folded entries, longest first.
    Gazetteer(Vec<Vec<String>>),
}

/// Anything that can propose entity spans over a serialized pair.
pub trait SpanTagger {
    fn name(&self) -> &str;
    /// Spans over the whitespace tokens of `text`, sorted by start.
    fn tag(&self, text: &str) -> Vec<EntitySpan>;
}

#[derive(Debug, Clone)]
pub struct Tagger {
    pub name: String,
    pub label: String,
    matcher: Matcher,
}

impl Tagger {
    pub fn compile(spec: &TaggerSpec) -> Result<Self> {
        let matcher = match spec.kind {
            TaggerKind::Regex => {
                let pattern = spec
                    .pattern
                    .as_deref()
                    .ok_or_else(|| Error::config("pattern", format!("regex tagger `{}` has no pattern", spec.name)))?;
                Matcher::Regex(Regex::new(pattern)?)
            }
            TaggerKind::Gazetteer => {
                let mut entries: Vec<Vec<String>> = spec
                    .lexicon
                    .iter()
                    .map(|e| e.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
                    .filter(|e| !e.is_empty())
                    .collect();
                if entries.is_empty() {
                    return Err(Error::config("lexicon", format!("gazetteer `{}` is empty", spec.name)));
                }
                entries.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
                entries.dedup();
                Matcher::Gazetteer(entries)
            }
        };
        Ok(Self { name: spec.name.clone(), label: spec.label.clone(), matcher })
    }

    fn tag_regex(&self, re: &Regex, text: &str, tokens: &[&str]) -> Vec<EntitySpan> {
        // Byte range of each token inside `text`.
        let base = text.as_ptr() as usize;
        let ranges: Vec<(usize, usize)> = tokens
            .iter()
            .map(|t| {
                let s = t.as_ptr() as usize - base;
                (s, s + t.len())
            })
            .collect();
        let mut spans: Vec<EntitySpan> = Vec::new();
        for m in re.find_iter(text) {
            if m.start() == m.end() {
                continue;
            }
            let Some(first) = ranges.iter().position(|&(_, e)| e > m.start()) else { continue };
            let Some(last) = ranges.iter().rposition(|&(s, _)| s < m.end()) else { continue };
            if last < first {
                continue;
            }
            match spans.last_mut() {
                // Two matches inside one token map to the same token range.
                Some(prev) if prev.end > first => prev.end = prev.end.max(last + 1),
                _ => spans.push(EntitySpan { start: first, end: last + 1, label: self.label.clone() }),
            }
        }
        spans
    }

    fn tag_gazetteer(&self, entries: &[Vec<String>], tokens: &[&str]) -> Vec<EntitySpan> {
        let folded: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < folded.len() {
            let hit = entries
                .iter()
                .find(|e| i + e.len() <= folded.len() && folded[i..i + e.len()] == e[..]);
            match hit {
                Some(e) => {
                    spans.push(EntitySpan { start: i, end: i + e.len(), label: self.label.clone() });
                    i += e.len();
                }
                None => i += 1,
            }
        }
        spans
    }
}

impl SpanTagger for Tagger {
    fn name(&self) -> &str {
        &self.name
    }

    fn tag(&self, text: &str) -> Vec<EntitySpan> {
        let tokens = split_tokens(text);
        match &self.matcher {
            Matcher::Regex(re) => self.tag_regex(re, text, &tokens),
            Matcher::Gazetteer(entries) => self.tag_gazetteer(entries, &tokens),
        }
    }
}

/// Marks every selected tagger span with `[LAST]`/`[/LAST]`.
///
/// Spans are chosen left to right, longest first, earlier tagger first on
/// ties. Spans touching structural tokens or an existing marked region are
/// ignored, so re-running injection on its own output changes nothing.
pub fn inject_knowledge<T: SpanTagger>(sp: &SerializedPair, taggers: &[T]) -> Result<SerializedPair> {
    sp.expect_stage(&[Stage::Serialized, Stage::Injected], "serialized")?;
    let tokens = split_tokens(&sp.text);
    let roles = token_roles(&tokens);
    let free = |s: &EntitySpan| roles[s.start..s.end].iter().all(|r| *r == TokenRole::Value { marked: false });

    let mut candidates: Vec<(usize, EntitySpan)> = Vec::new();
    for (rank, tagger) in taggers.iter().enumerate() {
        let spans = tagger.tag(&sp.text);
        for w in spans.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::OverlappingSpans {
                    tagger: tagger.name().to_string(),
                    first: (w[0].start, w[0].end),
                    second: (w[1].start, w[1].end),
                });
            }
        }
        candidates.extend(spans.into_iter().filter(|s| free(s)).map(|s| (rank, s)));
    }
    candidates.sort_by(|(ra, a), (rb, b)| {
        a.start
            .cmp(&b.start)
            .then((b.end - b.start).cmp(&(a.end - a.start)))
            .then(ra.cmp(rb))
    });
    let mut chosen: Vec<EntitySpan> = Vec::new();
    for (_, span) in candidates {
        if chosen.last().is_none_or(|c| span.start >= c.end) {
            chosen.push(span);
        }
    }

    let mut out: Vec<&str> = tokens.clone();
    // Right to left keeps earlier offsets valid.
    for span in chosen.iter().rev() {
        out.insert(span.end, LAST_END);
        out.insert(span.start, LAST);
    }
    Ok(SerializedPair { pair_id: sp.pair_id.clone(), text: out.join(" "), stage: Stage::Injected })
}
