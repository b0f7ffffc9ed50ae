//! TF-IDF scoring and budget-constrained summarization of serialized pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{is_special, split_tokens, token_roles, SerializedPair, Stage, TokenRole, LAST};
use crate::error::{Error, Result};
use crate::text::Stopwords;

/// Document frequencies over a fixed document set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    doc_count: usize,
    doc_freq: BTreeMap<String, usize>,
}

impl TfidfModel {
    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    /// Smoothed inverse document frequency, `ln((1 + D) / (1 + df)) + 1`.
    /// Unseen tokens get `df = 0`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(&token.to_lowercase()).copied().unwrap_or(0);
        ((1 + self.doc_count) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// Per-document scores, keyed by case-folded token. Stopwords and special
    /// tokens are not scored.
    pub fn scores(&self, text: &str, stopwords: &Stopwords) -> HashMap<String, f64> {
        let mut tf: HashMap<String, usize> = HashMap::new();
        for t in content_tokens(text, stopwords) {
            *tf.entry(t).or_default() += 1;
        }
        tf.into_iter()
            .map(|(t, n)| {
                let s = n as f64 * self.idf(&t);
                (t, s)
            })
            .collect()
    }
}

fn content_tokens<'a>(text: &'a str, stopwords: &'a Stopwords) -> impl Iterator<Item = String> + 'a {
    split_tokens(text)
        .into_iter()
        .filter(|t| !is_special(t))
        .map(str::to_lowercase)
        .filter(|t| !stopwords.contains(t))
}

pub fn fit_tfidf<S: AsRef<str>>(texts: &[S], stopwords: &Stopwords) -> TfidfModel {
    let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        let unique: BTreeSet<String> = content_tokens(text.as_ref(), stopwords).collect();
        for t in unique {
            *doc_freq.entry(t).or_default() += 1;
        }
    }
    TfidfModel { doc_count: texts.len(), doc_freq }
}

/// Trims an injected pair to at most `max_len` tokens.
///
/// Drop order: unmarked stopwords, then unmarked value tokens by ascending
/// TF-IDF, then tokens inside `[LAST]` regions by ascending TF-IDF. Structural
/// tokens and attribute names are never dropped. A marked region that loses
/// all its tokens loses its markers too.
pub fn summarize(sp: &SerializedPair, model: &TfidfModel, max_len: usize, stopwords: &Stopwords) -> Result<SerializedPair> {
    sp.expect_stage(&[Stage::Injected], "injected")?;
    let tokens = split_tokens(&sp.text);
    let done = |text: String| SerializedPair { pair_id: sp.pair_id.clone(), text, stage: Stage::Summarized };
    if tokens.len() <= max_len {
        return Ok(done(sp.text.clone()));
    }
    let roles = token_roles(&tokens);
    let mandatory = roles
        .iter()
        .filter(|r| matches!(r, TokenRole::Structural | TokenRole::AttributeName))
        .count();
    if max_len < mandatory {
        return Err(Error::MaxLenTooSmall { requested: max_len, minimum: mandatory });
    }

    let scores = model.scores(&sp.text, stopwords);
    let score = |i: usize| {
        if stopwords.contains(tokens[i]) {
            0.0
        } else {
            scores.get(&tokens[i].to_lowercase()).copied().unwrap_or(0.0)
        }
    };
    // Region id of every marked token; regions are numbered by their `[LAST]`.
    let mut region_of = vec![usize::MAX; tokens.len()];
    let mut region_size: Vec<usize> = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if *t == LAST {
            region_size.push(0);
        } else if let TokenRole::Value { marked: true } = roles[i] {
            region_of[i] = region_size.len() - 1;
            region_size[region_of[i]] += 1;
        }
    }

    let by_score = |a: &usize, b: &usize| score(*a).total_cmp(&score(*b)).then(b.cmp(a));
    let mut unmarked_stop: Vec<usize> = Vec::new();
    let mut unmarked: Vec<usize> = Vec::new();
    let mut marked: Vec<usize> = Vec::new();
    for (i, role) in roles.iter().enumerate() {
        match role {
            TokenRole::Value { marked: false } if stopwords.contains(tokens[i]) => unmarked_stop.push(i),
            TokenRole::Value { marked: false } => unmarked.push(i),
            TokenRole::Value { marked: true } => marked.push(i),
            _ => {}
        }
    }
    unmarked_stop.reverse();
    unmarked.sort_by(by_score);
    marked.sort_by(by_score);

    let mut dropped = vec![false; tokens.len()];
    let mut remaining = tokens.len() - max_len;
    let mut unmarked_dropped = Vec::new();
    for i in unmarked_stop.into_iter().chain(unmarked) {
        if remaining == 0 {
            break;
        }
        dropped[i] = true;
        unmarked_dropped.push(i);
        remaining -= 1;
    }
    let mut overshoot = 0;
    let mut marked: std::collections::VecDeque<usize> = marked.into();
    while remaining > 0 && !marked.is_empty() {
        let cost = |i: usize| if region_size[region_of[i]] == 1 { 3 } else { 1 };
        let slack = unmarked_dropped.len();
        // Lowest-scored token after which the budget is still reachable
        // exactly, counting unmarked tokens that could be given back.
        let reachable = |i: usize| {
            let c = cost(i);
            if c > remaining {
                return c - remaining <= slack;
            }
            let mut sizes = region_size.clone();
            sizes[region_of[i]] -= 1;
            can_drop(&sizes, remaining - c, remaining - c + slack)
        };
        let pick = marked.iter().position(|&i| reachable(i)).unwrap_or(0);
        let i = marked.remove(pick).unwrap();
        overshoot = cost(i).saturating_sub(remaining);
        remaining = remaining.saturating_sub(cost(i));
        region_size[region_of[i]] -= 1;
        dropped[i] = true;
    }
    // Emptying a region also removes its two markers; give back the
    // best-scored unmarked tokens to land on the budget exactly.
    while overshoot > 0 {
        let Some(i) = unmarked_dropped.pop() else { break };
        dropped[i] = false;
        overshoot -= 1;
    }

    let mut out: Vec<&str> = Vec::with_capacity(max_len);
    let mut region = usize::MAX;
    for (i, t) in tokens.iter().enumerate() {
        if dropped[i] {
            continue;
        }
        if *t == LAST {
            region = region.wrapping_add(1);
        }
        if roles[i] == TokenRole::Marker && region_size[region] == 0 {
            continue;
        }
        out.push(t);
    }
    Ok(done(out.join(" ")))
}

/// Whether some number of tokens in `lo..=hi` can be removed from marked
/// regions of the given sizes, where emptying a region also removes its two
/// markers.
fn can_drop(sizes: &[usize], lo: usize, hi: usize) -> bool {
    let mut reach = vec![false; hi + 1];
    reach[0] = true;
    for &size in sizes.iter().filter(|&&s| s > 0) {
        let mut next = reach.clone();
        for (total, _) in reach.iter().enumerate().filter(|(_, r)| **r) {
            for take in (1..size).chain([size + 2]) {
                if total + take <= hi {
                    next[total + take] = true;
                }
            }
        }
        reach = next;
    }
    reach[lo..=hi].iter().any(|&r| r)
}
