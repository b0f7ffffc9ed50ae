//! Pool-based active learning: the labeled/unlabeled pools, selection
//! strategies, label intake and the round lifecycle.

mod events;
mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Record, Schema};
use crate::encoder::{forward, EncoderParams, Prediction};
use crate::error::{Error, Result};
use crate::preprocess::TokenSequence;

pub use events::{EventLog, RunEvent};
pub use run::{
    run_loop, ActiveRun, ChannelOracle, ExportDocument, ExportPair, GroundTruthOracle, LabelOracle, LabelSubmission,
    Rejection, RunStatus, SubmitOutcome,
};

/// Labeled set T, unlabeled set R and the latest predictions over R.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeMap<String, u8>,
    pub unlabeled: BTreeSet<String>,
    pub predictions: BTreeMap<String, Prediction>,
    pub round_index: usize,
    pub budget: usize,
    pub total_rounds: usize,
    /// Bumped by every successful label intake.
    pub version: u64,
}

impl PoolState {
    pub fn new(pair_ids: impl IntoIterator<Item = String>, budget: usize, total_rounds: usize) -> Self {
        Self {
            unlabeled: pair_ids.into_iter().collect(),
            budget,
            total_rounds,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    Uncertainty,
    Entropy,
    Random {
        #[serde(default)]
        seed: u64,
    },
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Uncertainty => "uncertainty",
            SelectionStrategy::Entropy => "entropy",
            SelectionStrategy::Random { .. } => "random",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(SelectionStrategy::Uncertainty),
            "entropy" => Ok(SelectionStrategy::Entropy),
            "random" => Ok(SelectionStrategy::Random { seed: 0 }),
            other => Err(Error::config("active.strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

/// Binary entropy in nats, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Most uncertain first: ascending `|p − 0.5|`, ties by ascending pair id.
pub fn uncertainty_order(a: &Prediction, b: &Prediction) -> std::cmp::Ordering {
    (a.p - 0.5)
        .abs()
        .total_cmp(&(b.p - 0.5).abs())
        .then_with(|| a.pair_id.cmp(&b.pair_id))
}

/// Picks up to `n` pairs of R to label next.
///
/// Uncertainty and entropy rank the scored pairs of R; random draws from all
/// of R with a stream keyed by the round index, so each round draws afresh.
pub fn select(pool: &PoolState, strategy: &SelectionStrategy, n: usize) -> Vec<String> {
    let scored = || pool.predictions.values().filter(|p| pool.unlabeled.contains(&p.pair_id));
    match strategy {
        SelectionStrategy::Uncertainty => {
            let mut ranked: Vec<&Prediction> = scored().collect();
            ranked.sort_by(|a, b| uncertainty_order(a, b));
            ranked.into_iter().take(n).map(|p| p.pair_id.clone()).collect()
        }
        SelectionStrategy::Entropy => {
            let mut ranked: Vec<(f64, &str)> = scored().map(|p| (binary_entropy(p.p), p.pair_id.as_str())).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            ranked.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
        }
        SelectionStrategy::Random { seed } => {
            let ids: Vec<&String> = pool.unlabeled.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(pool.round_index as u64);
            rand::seq::index::sample(&mut rng, ids.len(), n.min(ids.len()))
                .into_iter()
                .map(|i| ids[i].clone())
                .collect()
        }
    }
}

/// Moves labeled pairs from R to T. The batch is checked as a whole first,
/// so either every label is applied or none is.
pub fn ingest_labels(pool: &mut PoolState, labels: &[(String, i64)]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (pair_id, y) in labels {
        if pool.labeled.contains_key(pair_id) || !seen.insert(pair_id.as_str()) {
            return Err(Error::AlreadyLabeled(pair_id.clone()));
        }
        if !pool.unlabeled.contains(pair_id) {
            return Err(Error::UnknownPair(pair_id.clone()));
        }
        if !(0..=1).contains(y) {
            return Err(Error::InvalidLabel { pair_id: pair_id.clone(), label: *y });
        }
    }
    for (pair_id, y) in labels {
        pool.unlabeled.remove(pair_id);
        pool.predictions.remove(pair_id);
        pool.labeled.insert(pair_id.clone(), *y as u8);
    }
    pool.version += 1;
    Ok(())
}

/// Replaces the predictions with fresh scores for every pair of R.
///
/// `sequence` supplies the model input of a pair; pairs for which it or the
/// forward pass fails are logged and left unscored.
pub fn score_pool<F>(params: &EncoderParams, pool: &mut PoolState, sequence: F)
where
    F: Fn(&str) -> Result<TokenSequence> + Sync,
{
    let ids: Vec<&String> = pool.unlabeled.iter().collect();
    let scored: Vec<Result<Prediction>> = ids
        .par_iter()
        .map(|id| sequence(id).and_then(|seq| forward(params, &seq, None)))
        .collect();
    let mut fresh = BTreeMap::new();
    for (pair_id, outcome) in ids.into_iter().zip(scored) {
        match outcome {
            Ok(prediction) => {
                fresh.insert(pair_id.clone(), prediction);
            }
            Err(e) => log::warn!("skipping pair `{pair_id}` while scoring: {e}"),
        }
    }
    pool.predictions = fresh;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayField {
    pub attribute: String,
    pub value: String,
}

/// A record as shown to the labeler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayRecord {
    pub id: String,
    pub fields: Vec<DisplayField>,
}

impl DisplayRecord {
    /// `fields = None` shows every attribute in schema order.
    pub fn new(record: &Record, schema: &Schema, fields: Option<&[String]>) -> Self {
        let fields = schema
            .attributes()
            .iter()
            .zip(&record.values)
            .filter(|(a, _)| fields.is_none_or(|keep| keep.contains(a)))
            .map(|(a, v)| DisplayField { attribute: a.clone(), value: v.clone() })
            .collect();
        Self { id: record.id.clone(), fields }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub pair_id: String,
    pub left: DisplayRecord,
    pub right: DisplayRecord,
    /// Model probability that the pair is a duplicate.
    pub p: f64,
    /// Milliseconds since the Unix epoch.
    pub requested_at: u64,
}
