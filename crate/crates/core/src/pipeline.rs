//! Corpus to model inputs: split, block, serialize, inject, summarize and
//! tokenize every candidate pair of a run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocking::{block_candidates_with, CandidatePair};
use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::{split_by_cluster, Split};
use crate::preprocess::{fit_tfidf, inject_knowledge, serialize_pair, summarize, tokenize, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPair {
    pub pair: CandidatePair,
    pub seq: TokenSequence,
    /// Cluster co-membership, when the corpus carries ground truth.
    pub truth: Option<bool>,
}

/// Everything a run needs before the first round.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub split: Split,
    /// The unlabeled pool, keyed by pair id.
    pub pool: BTreeMap<String, PreparedPair>,
    /// Held-out pairs, sorted by pair id. Empty without ground truth.
    pub test: Vec<PreparedPair>,
    pub vocab: Vocabulary,
    /// Candidate pairs that failed preprocessing and were left out.
    pub skipped: usize,
}

impl Prepared {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let corpus = config.data.load()?;
        let split = if corpus.has_truth {
            split_by_cluster(&corpus, config.active.split, config.active.seed)?
        } else {
            Split {
                train: (0..corpus.len()).collect(),
                validation: vec![],
                test: vec![],
            }
        };
        let stopwords = config.stopwords();
        let taggers = config.preprocess.compile_taggers()?;
        let index = corpus.index_by_id();

        let candidates = |indices: &[usize]| {
            let out = block_candidates_with(&corpus.subset(indices), &stopwords, &config.blocking);
            if !out.capped_tokens.is_empty() {
                log::info!("{} blocking tokens exceeded the bucket cap", out.capped_tokens.len());
            }
            out.pairs
        };
        let injected = |pairs: &[CandidatePair]| -> Result<Vec<_>> {
            pairs
                .iter()
                .map(|p| {
                    let l = &corpus.records[index[p.left_id.as_str()]];
                    let r = &corpus.records[index[p.right_id.as_str()]];
                    inject_knowledge(&serialize_pair(&p.pair_id, l, r, &corpus.schema), &taggers)
                })
                .collect()
        };
        let pool_pairs = candidates(&split.train);
        let test_pairs = if corpus.has_truth { candidates(&split.test) } else { vec![] };
        let pool_injected = injected(&pool_pairs)?;
        let test_injected = injected(&test_pairs)?;

        let texts: Vec<&str> = pool_injected.iter().map(|sp| sp.text.as_str()).collect();
        let tfidf = fit_tfidf(&texts, &stopwords);
        let max_len = config.preprocess.max_len;
        let mut skipped = 0;
        let mut summarized = |injected: Vec<_>, pairs: Vec<CandidatePair>| {
            let mut out = Vec::with_capacity(pairs.len());
            for (sp, pair) in injected.iter().zip(pairs) {
                match summarize(sp, &tfidf, max_len, &stopwords) {
                    Ok(s) => out.push((s, pair)),
                    Err(e) => {
                        log::warn!("skipping pair `{}`: {e}", pair.pair_id);
                        skipped += 1;
                    }
                }
            }
            out
        };
        let pool_summarized = summarized(pool_injected, pool_pairs);
        let test_summarized = summarized(test_injected, test_pairs);
        if pool_summarized.is_empty() {
            return Err(Error::config("data", "blocking and preprocessing left no candidate pairs"));
        }
        let texts: Vec<&str> = pool_summarized.iter().map(|(sp, _)| sp.text.as_str()).collect();
        let vocab = Vocabulary::build(&texts, config.preprocess.min_token_count);

        let truth = |p: &CandidatePair| {
            corpus.has_truth.then(|| {
                let l = &corpus.records[index[p.left_id.as_str()]].cluster_id;
                let r = &corpus.records[index[p.right_id.as_str()]].cluster_id;
                l == r
            })
        };
        let finish = |items: Vec<(crate::preprocess::SerializedPair, CandidatePair)>| -> Result<Vec<PreparedPair>> {
            items
                .into_iter()
                .map(|(sp, pair)| {
                    Ok(PreparedPair {
                        seq: tokenize(&sp, &vocab, max_len)?,
                        truth: truth(&pair),
                        pair,
                    })
                })
                .collect()
        };
        let pool = finish(pool_summarized)?
            .into_iter()
            .map(|p| (p.pair.pair_id.clone(), p))
            .collect();
        let test = finish(test_summarized)?;
        drop(index);
        Ok(Self {
            corpus,
            split,
            pool,
            test,
            vocab,
            skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use crate::corpus::CorruptionConfig;

    #[test]
    fn prepares_disjoint_pool_and_test() {
        let mut config = RunConfig::standard_synthetic();
        config.data = DataSource::Synthetic {
            n_entities: 60,
            corruption: CorruptionConfig::moderate(5),
        };
        let prepared = Prepared::build(&config).unwrap();
        assert!(!prepared.pool.is_empty() && !prepared.test.is_empty());
        let test_ids: std::collections::BTreeSet<&str> = prepared.test.iter().map(|p| p.pair.pair_id.as_str()).collect();
        assert!(prepared.pool.keys().all(|k| !test_ids.contains(k.as_str())));
        assert!(prepared.pool.values().any(|p| p.truth == Some(true)));
        assert!(prepared.pool.values().all(|p| p.seq.max_len() == 64));
        assert!(prepared.test.windows(2).all(|w| w[0].pair.pair_id < w[1].pair.pair_id));
    }
}
