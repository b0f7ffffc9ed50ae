//! Pairwise metrics, the edit-similarity baseline, cluster-disjoint splits
//! and the strategy comparison harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active::{run_loop, GroundTruthOracle, SelectionStrategy};
use crate::blocking::CandidatePair;
use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    /// Counts from `(predicted, actual)` pairs.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (predicted, actual) in outcomes {
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any of the three ratios had a zero denominator.
    pub zero_division: bool,
}

pub fn metrics(counts: &ConfusionCounts) -> Metrics {
    let mut zero_division = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero_division = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let mut m = f1_from(precision, recall);
    m.zero_division |= zero_division;
    m
}

/// Harmonic mean of precision and recall; zero (flagged) when both are zero.
pub fn f1_from(precision: f64, recall: f64) -> Metrics {
    let sum = precision + recall;
    let (f1, zero_division) = if sum > 0.0 { (2.0 * precision * recall / sum, false) } else { (0.0, true) };
    Metrics { precision, recall, f1, zero_division }
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − levenshtein / max(len)` in characters; two empty strings score 1.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub pair_id: String,
    pub similarity: f64,
    pub duplicate: bool,
}

/// Predicts a duplicate when the edit similarity of one field reaches `threshold`.
pub fn field_similarity_baseline(
    pairs: &[CandidatePair],
    corpus: &Corpus,
    field: &str,
    threshold: f64,
) -> Result<Vec<BaselinePrediction>> {
    let col = corpus
        .schema
        .position(field)
        .ok_or_else(|| Error::Schema(format!("no attribute named `{field}`")))?;
    let index = corpus.index_by_id();
    pairs
        .iter()
        .map(|pair| {
            let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownPair(pair.pair_id.clone()));
            let l = &corpus.records[lookup(&pair.left_id)?].values[col];
            let r = &corpus.records[lookup(&pair.right_id)?].values[col];
            let similarity = edit_similarity(l, r);
            Ok(BaselinePrediction {
                pair_id: pair.pair_id.clone(),
                similarity,
                duplicate: similarity >= threshold,
            })
        })
        .collect()
}

/// Record indices of the train, validation and test parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles clusters with `seed` and deals them out by the given ratio, so no
/// cluster spans two parts. Records without a cluster id count as singletons.
pub fn split_by_cluster(corpus: &Corpus, ratio: [u32; 3], seed: u64) -> Result<Split> {
    let total: u32 = ratio.iter().sum();
    if total == 0 {
        return Err(Error::config("active.split", "ratio must not be all zero"));
    }
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.records.iter().enumerate() {
        let key = r.cluster_id.as_deref().unwrap_or(r.id.as_str());
        clusters.entry(key).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = clusters.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = groups.len();
    let train_end = (n as u64 * ratio[0] as u64 / total as u64) as usize;
    let val_end = (n as u64 * (ratio[0] + ratio[1]) as u64 / total as u64) as usize;
    let flat = |gs: &[Vec<usize>]| {
        let mut v: Vec<usize> = gs.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: flat(&groups[..train_end]),
        validation: flat(&groups[train_end..val_end]),
        test: flat(&groups[val_end..]),
    })
}

/// Test-set outcome of one round together with the selection that followed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_index: usize,
    pub strategy: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub zero_division: bool,
    pub confusion: ConfusionCounts,
    /// Sizes of T and R when the round's model was trained.
    pub labeled: usize,
    pub unlabeled: usize,
    pub selected: Vec<String>,
    /// Mean R-Drop loss of the last training epoch.
    pub train_loss: f64,
}

/// A scored held-out pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_id: String,
    pub p: f64,
    pub truth: bool,
}

/// Confusion counts and metrics over scored test pairs at `threshold`.
pub fn evaluate_scores(scored: &[ScoredPair], threshold: f64) -> Result<(ConfusionCounts, Metrics)> {
    if scored.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let counts = ConfusionCounts::from_outcomes(scored.iter().map(|s| (s.p >= threshold, s.truth)));
    Ok((counts, metrics(&counts)))
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub round_index: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: String,
    pub seed: u64,
    pub reports: Vec<RoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<StrategyRun>,
}

impl ComparisonTable {
    /// Aggregates per-run reports into per-(strategy, round) rows. Rows keep
    /// the order in which strategies first appear.
    pub fn from_runs(runs: Vec<StrategyRun>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for run in &runs {
            let s = match order.iter().position(|o| o == &run.strategy) {
                Some(s) => s,
                None => {
                    order.push(run.strategy.clone());
                    order.len() - 1
                }
            };
            for r in &run.reports {
                let cell = cells.entry((s, r.round_index)).or_default();
                cell.0.push(r.f1);
                cell.1.push(r.recall);
            }
        }
        let rows = cells
            .into_iter()
            .map(|((s, round_index), (f1, recall))| {
                let (f1_mean, f1_std) = mean_std(&f1);
                let (recall_mean, recall_std) = mean_std(&recall);
                ComparisonRow {
                    strategy: order[s].clone(),
                    round_index,
                    f1_mean,
                    f1_std,
                    recall_mean,
                    recall_std,
                    runs: f1.len(),
                }
            })
            .collect();
        Self { rows, runs }
    }

    pub fn row(&self, strategy: &str, round_index: usize) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.round_index == round_index)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["strategy", "round", "f1_mean", "f1_std", "recall_mean", "recall_std", "runs"])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                r.round_index.to_string(),
                format!("{:.4}", r.f1_mean),
                format!("{:.4}", r.f1_std),
                format!("{:.4}", r.recall_mean),
                format!("{:.4}", r.recall_std),
                r.runs.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// One row per round, one `F1 (recall)` column per strategy.
    pub fn to_markdown(&self) -> String {
        let mut strategies: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !strategies.contains(&r.strategy.as_str()) {
                strategies.push(&r.strategy);
            }
        }
        let mut rounds: Vec<usize> = self.rows.iter().map(|r| r.round_index).collect();
        rounds.sort_unstable();
        rounds.dedup();

        let mut out = String::from("| round |");
        for s in &strategies {
            let _ = write!(out, " {s} F1 | {s} recall |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|---|".repeat(strategies.len()));
        out.push('\n');
        for round in rounds {
            let _ = write!(out, "| {round} |");
            for s in &strategies {
                match self.row(s, round) {
                    Some(r) => {
                        let _ = write!(out, " {:.3} ± {:.3} | {:.3} ± {:.3} |", r.f1_mean, r.f1_std, r.recall_mean, r.recall_std);
                    }
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the ground-truth loop for every (strategy, seed) combination.
pub fn compare_strategies(config: &RunConfig, strategies: &[SelectionStrategy], seeds: &[u64]) -> Result<ComparisonTable> {
    let mut runs = Vec::new();
    for strategy in strategies {
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.active.strategy = strategy.clone();
            let cfg = cfg.with_seed(seed);
            log::info!("strategy {} seed {seed}", strategy.name());
            let reports = run_loop(&cfg, &mut GroundTruthOracle)?;
            runs.push(StrategyRun {
                strategy: strategy.name().to_string(),
                seed,
                reports,
            });
        }
    }
    Ok(ComparisonTable::from_runs(runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, CorruptionConfig};

    #[test]
    fn perfect_classifier() {
        let m = metrics(&ConfusionCounts { tp: 10, ..Default::default() });
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert!(!m.zero_division);
    }

    #[test]
    fn degenerate_counts_flag_zero_division() {
        let m = metrics(&ConfusionCounts { tp: 0, fp: 5, fn_: 5, tn: 0 });
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.zero_division);
        assert!(metrics(&ConfusionCounts { tn: 3, ..Default::default() }).zero_division);
    }

    #[test]
    fn harmonic_mean_of_reported_scores() {
        let m = f1_from(0.9583, 0.9917);
        assert!((m.f1 - 0.9747).abs() < 1e-4, "{}", m.f1);
    }

    #[test]
    fn edit_similarity_examples() {
        assert_eq!(edit_similarity("same", "same"), 1.0);
        assert_eq!(edit_similarity("", ""), 1.0);
        assert!((edit_similarity("abc", "abd") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(edit_similarity("abc", "xyz"), 0.0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
    }

    #[test]
    fn baseline_thresholds() {
        let corpus = generate_synthetic(5, &CorruptionConfig::none(2, 1)).unwrap();
        let pair = CandidatePair::new(&corpus.records[0].id, &corpus.records[1].id).unwrap();
        let preds = field_similarity_baseline(&[pair], &corpus, "title", 1.0).unwrap();
        assert_eq!(preds[0].similarity, 1.0);
        assert!(preds[0].duplicate);
        assert!(field_similarity_baseline(&[], &corpus, "isbn", 0.5).is_err());
    }

    #[test]
    fn split_is_cluster_disjoint_and_complete() {
        let corpus = generate_synthetic(50, &CorruptionConfig::moderate(3)).unwrap();
        let split = split_by_cluster(&corpus, [6, 2, 2], 9).unwrap();
        let cluster = |i: &usize| corpus.records[*i].cluster_id.clone().unwrap();
        let parts = [&split.train, &split.validation, &split.test];
        for (a, pa) in parts.iter().enumerate() {
            for pb in parts.iter().skip(a + 1) {
                let ca: std::collections::BTreeSet<String> = pa.iter().map(cluster).collect();
                assert!(pb.iter().all(|i| !ca.contains(&cluster(i))));
            }
        }
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), corpus.len());
        assert_eq!(split, split_by_cluster(&corpus, [6, 2, 2], 9).unwrap());
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(matches!(evaluate_scores(&[], 0.5), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn single_run_table_matches_its_reports() {
        let report = |round_index, f1, recall| RoundReport {
            round_index,
            strategy: "uncertainty".into(),
            precision: 1.0,
            recall,
            f1,
            zero_division: false,
            confusion: ConfusionCounts::default(),
            labeled: 0,
            unlabeled: 0,
            selected: vec![],
            train_loss: 0.0,
        };
        let table = ComparisonTable::from_runs(vec![StrategyRun {
            strategy: "uncertainty".into(),
            seed: 1,
            reports: vec![report(1, 0.5, 0.4), report(2, 0.7, 0.6)],
        }]);
        assert_eq!(table.rows.len(), 2);
        assert_eq!((table.rows[1].f1_mean, table.rows[1].f1_std, table.rows[1].recall_mean), (0.7, 0.0, 0.6));
        let md = table.to_markdown();
        assert!(md.contains("| 2 | 0.700 ± 0.000 | 0.600 ± 0.000 |"), "{md}");
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("strategy,round,f1_mean"));
    }
}
