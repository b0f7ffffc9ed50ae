//! Candidate generation: two records become a candidate pair when they share
//! at least one non-stopword token in any attribute value.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Record};
use crate::error::{Error, Result};
use crate::text::{word_tokens, Stopwords};

/// An unordered record pair in canonical form (`left_id < right_id`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub pair_id: String,
    pub left_id: String,
    pub right_id: String,
}

impl CandidatePair {
    /// Canonicalizes the order of the two ids. Returns `None` for a self-pair.
    pub fn new(a: &str, b: &str) -> Option<Self> {
        let (left, right) = match a.cmp(b) {
            std::cmp::Ordering::Less => (a, b),
            std::cmp::Ordering::Greater => (b, a),
            std::cmp::Ordering::Equal => return None,
        };
        Some(Self {
            pair_id: format!("{left}|{right}"),
            left_id: left.to_string(),
            right_id: right.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockingConfig {
    /// Tokens shared by more records than this are not used as blocking keys.
    pub bucket_cap: usize,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        Self { bucket_cap: 500 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlockingOutput {
    pub pairs: Vec<CandidatePair>,
    /// Tokens skipped because their bucket exceeded the cap, with bucket size.
    pub capped_tokens: Vec<(String, usize)>,
}

/// The set of blocking keys of one record.
pub fn blocking_keys(record: &Record, stopwords: &Stopwords) -> BTreeSet<String> {
    record
        .values
        .iter()
        .flat_map(|v| word_tokens(v))
        .filter(|t| !stopwords.contains(t))
        .collect()
}

pub fn block_candidates(corpus: &Corpus, stopwords: &Stopwords) -> Vec<CandidatePair> {
    block_candidates_with(corpus, stopwords, &BlockingConfig::default()).pairs
}

/// Inverted-index blocking: build token -> records, then expand every bucket
/// into its record pairs.
pub fn block_candidates_with(corpus: &Corpus, stopwords: &Stopwords, config: &BlockingConfig) -> BlockingOutput {
    let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, record) in corpus.records.iter().enumerate() {
        for key in blocking_keys(record, stopwords) {
            index.entry(key).or_default().push(i);
        }
    }
    let mut pairs = BTreeSet::new();
    let mut capped_tokens = Vec::new();
    for (token, bucket) in &index {
        if bucket.len() > config.bucket_cap {
            log::info!("blocking key `{token}` skipped: {} records exceed cap {}", bucket.len(), config.bucket_cap);
            capped_tokens.push((token.clone(), bucket.len()));
            continue;
        }
        for (a, &i) in bucket.iter().enumerate() {
            for &j in &bucket[a + 1..] {
                if let Some(pair) = CandidatePair::new(&corpus.records[i].id, &corpus.records[j].id) {
                    pairs.insert(pair);
                }
            }
        }
    }
    BlockingOutput {
        pairs: pairs.into_iter().collect(),
        capped_tokens,
    }
}

pub fn write_pairs_csv<W: Write>(pairs: &[CandidatePair], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["left_id", "right_id"])?;
    for p in pairs {
        out.write_record([&p.left_id, &p.right_id])?;
    }
    out.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Fraction of true duplicate pairs present among `pairs`.
pub fn blocking_recall(corpus: &Corpus, pairs: &[CandidatePair]) -> Option<f64> {
    let total = corpus.true_pair_count();
    if total == 0 {
        return None;
    }
    let index = corpus.index_by_id();
    let found = pairs
        .iter()
        .filter(|p| {
            let l = &corpus.records[index[p.left_id.as_str()]];
            let r = &corpus.records[index[p.right_id.as_str()]];
            l.cluster_id.is_some() && l.cluster_id == r.cluster_id
        })
        .count();
    Some(found as f64 / total as f64)
}
