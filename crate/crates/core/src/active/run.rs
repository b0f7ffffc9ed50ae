//! The round lifecycle of one run and the oracles that answer its label
//! requests.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::events::{EventLog, RunEvent};
use super::{ingest_labels, score_pool, select, DisplayRecord, LabelRequest, PoolState, SelectionStrategy};
use crate::config::RunConfig;
use crate::encoder::{forward, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_scores, ConfusionCounts, RoundReport, ScoredPair};
use crate::pipeline::{Prepared, PreparedPair};
use crate::training::{train_round, LabeledExample, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Training,
    Scoring,
    AwaitingLabels,
    Done,
}

/// One label as submitted by an annotator. `y` is kept wide so that bad
/// values can be rejected per item instead of failing the whole batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub pair_id: String,
    pub y: i64,
    #[serde(default)]
    pub annotator: Option<String>,
    #[serde(default)]
    pub submitted_at: Option<String>,
}

impl LabelSubmission {
    pub fn new(pair_id: impl Into<String>, y: i64) -> Self {
        Self {
            pair_id: pair_id.into(),
            y,
            annotator: None,
            submitted_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub accepted: Vec<String>,
    pub rejected: Vec<Rejection>,
    /// Labels still missing from the current batch.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportPair {
    pub pair_id: String,
    pub left_id: String,
    pub right_id: String,
    /// `pool` or `test`.
    pub split: String,
    pub p: f64,
    pub label: Option<u8>,
    /// The human label when there is one, otherwise `p ≥ threshold`.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportDocument {
    pub round_index: usize,
    pub threshold: f64,
    pub pairs: Vec<ExportPair>,
    /// Connected components of the duplicate pairs with two or more records.
    pub clusters: Vec<Vec<String>>,
}

struct Store {
    dir: PathBuf,
    log: EventLog,
}

impl Store {
    fn checkpoint(dir: &Path, round: usize) -> PathBuf {
        dir.join("checkpoints").join(format!("round-{round}.json"))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&path, e))
    }
}

/// A run of the labeling loop: the prepared pool and test set, the current
/// model and the pool state, optionally persisted in a directory.
///
/// Round 0 only draws a random seed batch. Round `i ≥ 1` trains on T, scores
/// R, evaluates on the held-out pairs and selects the next batch; the run is
/// done once the batch of round N has been labeled.
pub struct ActiveRun {
    config: RunConfig,
    prepared: Prepared,
    records: HashMap<String, usize>,
    params: EncoderParams,
    pool: PoolState,
    pending: Vec<String>,
    issued_at: u64,
    reports: Vec<RoundReport>,
    training_logs: Vec<TrainingLog>,
    done: bool,
    store: Option<Store>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl ActiveRun {
    /// Starts an in-memory run.
    pub fn new(config: RunConfig) -> Result<Self> {
        let mut run = Self::prepare(config, None)?;
        run.begin()?;
        Ok(run)
    }

    /// Starts a persisted run in `dir`, or resumes it if `dir` already holds
    /// an event log.
    pub fn open(config: RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let events = EventLog::read(dir.join("events.jsonl"))?;
        if !events.is_empty() {
            return Self::replay(config, dir, events);
        }
        config.save(dir.join("config.json"))?;
        let log = EventLog::open(dir.join("events.jsonl"))?;
        let mut run = Self::prepare(config, Some(Store { dir: dir.to_path_buf(), log }))?;
        run.begin()?;
        Ok(run)
    }

    /// Rebuilds a run from its directory by folding the event log.
    pub fn resume(config: RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let events = EventLog::read(dir.join("events.jsonl"))?;
        if events.is_empty() {
            return Err(Error::Replay(format!("{} has no events", dir.display())));
        }
        Self::replay(config, dir, events)
    }

    fn prepare(config: RunConfig, store: Option<Store>) -> Result<Self> {
        let prepared = Prepared::build(&config)?;
        let encoder = EncoderConfig {
            vocab_size: prepared.vocab.len(),
            max_len: config.preprocess.max_len,
            ..config.encoder.clone()
        };
        let params = EncoderParams::init(&encoder)?;
        let records = prepared
            .corpus
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let pool = PoolState::new(prepared.pool.keys().cloned(), config.active.budget, config.active.rounds);
        log::info!(
            "prepared {} pool pairs, {} test pairs, vocabulary of {}",
            prepared.pool.len(),
            prepared.test.len(),
            prepared.vocab.len()
        );
        Ok(Self {
            config,
            prepared,
            records,
            params,
            pool,
            pending: Vec::new(),
            issued_at: now_ms(),
            reports: Vec::new(),
            training_logs: Vec::new(),
            done: false,
            store,
        })
    }

    fn record_event(&mut self, event: &RunEvent) -> Result<()> {
        match &mut self.store {
            Some(store) => store.log.append(event),
            None => Ok(()),
        }
    }

    fn begin(&mut self) -> Result<()> {
        self.record_event(&RunEvent::Started {
            config_digest: self.config.digest(),
            pool_size: self.pool.len(),
            test_size: self.prepared.test.len(),
        })?;
        if self.config.active.rounds == 0 {
            self.done = true;
            return self.record_event(&RunEvent::Finished);
        }
        self.score();
        let seed_strategy = SelectionStrategy::Random { seed: self.config.active.seed };
        let pair_ids = select(&self.pool, &seed_strategy, self.config.active.seed_batch());
        self.record_event(&RunEvent::Seeded { pair_ids: pair_ids.clone() })?;
        self.issue(pair_ids);
        Ok(())
    }

    fn replay(config: RunConfig, dir: &Path, events: Vec<RunEvent>) -> Result<Self> {
        let mut run = Self::prepare(config, None)?;
        let mut events = events.into_iter();
        match events.next() {
            Some(RunEvent::Started { config_digest, .. }) if config_digest == run.config.digest() => {}
            Some(RunEvent::Started { .. }) => return Err(Error::Replay("configuration differs from the logged run".into())),
            other => return Err(Error::Replay(format!("log must begin with `started`, found {other:?}"))),
        }
        let mut checkpoint = None;
        for event in events {
            match event {
                RunEvent::Started { .. } => return Err(Error::Replay("second `started` event".into())),
                RunEvent::Seeded { pair_ids } => {
                    if run.pool.round_index != 0 || !run.pool.labeled.is_empty() {
                        return Err(Error::Replay("seed batch after round 0".into()));
                    }
                    run.issue(pair_ids);
                }
                RunEvent::Labeled { pair_id, label, .. } => {
                    if !run.pending.contains(&pair_id) {
                        return Err(Error::Replay(format!("label for `{pair_id}`, which was not requested")));
                    }
                    ingest_labels(&mut run.pool, &[(pair_id.clone(), i64::from(label))])?;
                    run.pending.retain(|p| p != &pair_id);
                }
                RunEvent::RoundCompleted { report } => {
                    if !run.pending.is_empty() || report.round_index != run.pool.round_index + 1 {
                        return Err(Error::Replay(format!("unexpected completion of round {}", report.round_index)));
                    }
                    run.pool.round_index = report.round_index;
                    checkpoint = Some(report.round_index);
                    run.issue(report.selected.clone());
                    run.reports.push(report);
                }
                RunEvent::Finished => run.done = true,
            }
        }
        if let Some(round) = checkpoint {
            run.params = EncoderParams::load(Store::checkpoint(dir, round))?;
        }
        // Predictions are a pure function of the checkpoint and R.
        run.score();
        run.store = Some(Store {
            dir: dir.to_path_buf(),
            log: EventLog::open(dir.join("events.jsonl"))?,
        });
        log::info!(
            "resumed run at round {} with {} labels and {} pending",
            run.pool.round_index,
            run.pool.labeled.len(),
            run.pending.len()
        );
        Ok(run)
    }

    fn issue(&mut self, pair_ids: Vec<String>) {
        self.pending = pair_ids;
        self.issued_at = now_ms();
    }

    fn score(&mut self) {
        let pool = &self.prepared.pool;
        score_pool(&self.params, &mut self.pool, |id| {
            pool.get(id).map(|p| p.seq.clone()).ok_or_else(|| Error::UnknownPair(id.to_string()))
        });
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    pub fn pool(&self) -> &PoolState {
        &self.pool
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn training_logs(&self) -> &[TrainingLog] {
        &self.training_logs
    }

    pub fn round_index(&self) -> usize {
        self.pool.round_index
    }

    pub fn pending(&self) -> &[String] {
        &self.pending
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn dir(&self) -> Option<&Path> {
        self.store.as_ref().map(|s| s.dir.as_path())
    }

    /// `Training` here means the batch is complete and the next round is due.
    pub fn status(&self) -> RunStatus {
        if self.done {
            RunStatus::Done
        } else if self.pending.is_empty() {
            RunStatus::Training
        } else {
            RunStatus::AwaitingLabels
        }
    }

    /// Ground truth of a pool or test pair, when the corpus has clusters.
    pub fn truth(&self, pair_id: &str) -> Option<bool> {
        if let Some(p) = self.prepared.pool.get(pair_id) {
            return p.truth;
        }
        self.prepared
            .test
            .binary_search_by(|p| p.pair.pair_id.as_str().cmp(pair_id))
            .ok()
            .and_then(|i| self.prepared.test[i].truth)
    }

    /// The pending batch, most uncertain first.
    pub fn requests(&self) -> Vec<LabelRequest> {
        let schema = &self.prepared.corpus.schema;
        let fields = self.config.active.display_fields.as_deref();
        let mut requests: Vec<LabelRequest> = self
            .pending
            .iter()
            .filter_map(|id| {
                let pair = &self.prepared.pool.get(id)?.pair;
                let display = |rid: &str| DisplayRecord::new(&self.prepared.corpus.records[self.records[rid]], schema, fields);
                Some(LabelRequest {
                    pair_id: id.clone(),
                    left: display(&pair.left_id),
                    right: display(&pair.right_id),
                    p: self.pool.predictions.get(id).map_or(0.5, |p| p.p),
                    requested_at: self.issued_at,
                })
            })
            .collect();
        requests.sort_by(|a, b| {
            (a.p - 0.5)
                .abs()
                .total_cmp(&(b.p - 0.5).abs())
                .then_with(|| a.pair_id.cmp(&b.pair_id))
        });
        requests
    }

    /// Applies labels one by one. Items that are not pending, already
    /// labeled or not binary are rejected; the rest are persisted before they
    /// are applied. Only I/O failures abort the call.
    pub fn submit(&mut self, submissions: &[LabelSubmission]) -> Result<SubmitOutcome> {
        let mut outcome = SubmitOutcome::default();
        for s in submissions {
            let reason = if self.done {
                Some("run is finished")
            } else if self.pool.labeled.contains_key(&s.pair_id) {
                Some("already labeled")
            } else if !self.pending.contains(&s.pair_id) {
                Some(if self.pool.unlabeled.contains(&s.pair_id) { "not in the current batch" } else { "unknown pair" })
            } else if !(0..=1).contains(&s.y) {
                Some("label must be 0 or 1")
            } else {
                None
            };
            if let Some(reason) = reason {
                outcome.rejected.push(Rejection { pair_id: s.pair_id.clone(), reason: reason.into() });
                continue;
            }
            self.record_event(&RunEvent::Labeled {
                round: self.pool.round_index,
                pair_id: s.pair_id.clone(),
                label: s.y as u8,
                annotator: s.annotator.clone(),
                submitted_at: s.submitted_at.clone(),
            })?;
            ingest_labels(&mut self.pool, &[(s.pair_id.clone(), s.y)])?;
            self.pending.retain(|p| p != &s.pair_id);
            outcome.accepted.push(s.pair_id.clone());
        }
        outcome.remaining = self.pending.len();
        Ok(outcome)
    }

    fn labeled_examples(&self) -> Vec<LabeledExample> {
        self.pool
            .labeled
            .iter()
            .map(|(id, &label)| LabeledExample {
                pair_id: id.clone(),
                seq: self.prepared.pool[id].seq.clone(),
                label,
            })
            .collect()
    }

    fn test_scores(&self) -> Result<Vec<ScoredPair>> {
        self.prepared
            .test
            .iter()
            .filter_map(|t| t.truth.map(|truth| (t, truth)))
            .map(|(t, truth)| {
                Ok(ScoredPair {
                    pair_id: t.pair.pair_id.clone(),
                    p: forward(&self.params, &t.seq, None)?.p,
                    truth,
                })
            })
            .collect()
    }

    /// Runs the next round once the current batch is fully labeled, or marks
    /// the run done after round N. `progress` sees each status change.
    pub fn advance(&mut self, progress: &mut dyn FnMut(RunStatus)) -> Result<()> {
        if self.done {
            return Ok(());
        }
        if !self.pending.is_empty() {
            return Err(Error::NotReady(format!("{} labels pending in round {}", self.pending.len(), self.pool.round_index)));
        }
        if self.pool.round_index >= self.config.active.rounds {
            self.done = true;
            self.record_event(&RunEvent::Finished)?;
            progress(RunStatus::Done);
            return Ok(());
        }
        let round = self.pool.round_index + 1;
        progress(RunStatus::Training);
        let examples = self.labeled_examples();
        let start = if self.config.active.warm_start || round == 1 {
            self.params.clone()
        } else {
            EncoderParams::init(&self.params.config)?
        };
        let train = crate::training::TrainConfig {
            seed: self.config.train.seed.wrapping_add(round as u64),
            ..self.config.train.clone()
        };
        let (params, training_log) = train_round(&start, &examples, &train)?;
        self.params = params;
        if let Some(store) = &self.store {
            let path = Store::checkpoint(&store.dir, round);
            std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
            self.params.save(&path)?;
            let mut buf = Vec::new();
            training_log.write_jsonl(&mut buf)?;
            let log_path = store.dir.join("training").join(format!("round-{round}.jsonl"));
            std::fs::create_dir_all(log_path.parent().unwrap()).map_err(|e| Error::io(&log_path, e))?;
            std::fs::write(&log_path, buf).map_err(|e| Error::io(&log_path, e))?;
        }

        progress(RunStatus::Scoring);
        self.pool.round_index = round;
        self.score();
        let scores = self.test_scores()?;
        let (confusion, metrics) = if scores.is_empty() {
            (ConfusionCounts::default(), crate::eval::f1_from(0.0, 0.0))
        } else {
            evaluate_scores(&scores, self.config.active.threshold)?
        };
        let selected = select(&self.pool, &self.config.active.strategy, self.config.active.budget);
        let report = RoundReport {
            round_index: round,
            strategy: self.config.active.strategy.name().to_string(),
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            zero_division: metrics.zero_division,
            confusion,
            labeled: self.pool.labeled.len(),
            unlabeled: self.pool.unlabeled.len(),
            selected: selected.clone(),
            train_loss: training_log.epochs.last().map_or(0.0, |e| e.total),
        };
        log::info!(
            "round {round}: |T| = {}, F1 {:.4} (P {:.4}, R {:.4})",
            report.labeled,
            report.f1,
            report.precision,
            report.recall
        );
        self.record_event(&RunEvent::RoundCompleted { report: report.clone() })?;
        self.reports.push(report);
        self.training_logs.push(training_log);
        if let Some(store) = &self.store {
            store.write_json(&format!("snapshots/round-{round}.json"), &self.pool)?;
            store.write_json("reports.json", &self.reports)?;
        }
        self.issue(selected);
        progress(if self.pending.is_empty() { RunStatus::Training } else { RunStatus::AwaitingLabels });
        Ok(())
    }

    /// Drives the run to completion with `oracle` answering every batch.
    pub fn run_with(&mut self, oracle: &mut dyn LabelOracle) -> Result<()> {
        while !self.done {
            if !self.pending.is_empty() {
                let requests = self.requests();
                let labels = oracle.label(self, &requests)?;
                self.submit(&labels)?;
                if !self.pending.is_empty() {
                    return Err(Error::OracleTimeout {
                        round: self.pool.round_index,
                        pending: self.pending.len(),
                    });
                }
            }
            self.advance(&mut |_| {})?;
        }
        Ok(())
    }

    /// Current predictions for every pool and test pair, with clusters from
    /// the transitive closure of the duplicate pairs.
    pub fn export(&self) -> Result<ExportDocument> {
        let threshold = self.config.active.threshold;
        let mut pairs = Vec::with_capacity(self.prepared.pool.len() + self.prepared.test.len());
        let mut add = |p: &PreparedPair, split: &str, label: Option<u8>| -> Result<()> {
            let prob = forward(&self.params, &p.seq, None)?.p;
            pairs.push(ExportPair {
                pair_id: p.pair.pair_id.clone(),
                left_id: p.pair.left_id.clone(),
                right_id: p.pair.right_id.clone(),
                split: split.into(),
                p: prob,
                label,
                duplicate: label.map_or(prob >= threshold, |l| l == 1),
            });
            Ok(())
        };
        for (id, p) in &self.prepared.pool {
            add(p, "pool", self.pool.labeled.get(id).copied())?;
        }
        for p in &self.prepared.test {
            add(p, "test", None)?;
        }

        let n = self.prepared.corpus.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for p in pairs.iter().filter(|p| p.duplicate) {
            let a = find(&mut parent, self.records[&p.left_id]);
            let b = find(&mut parent, self.records[&p.right_id]);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(self.prepared.corpus.records[i].id.clone());
        }
        let mut clusters: Vec<Vec<String>> = groups
            .into_values()
            .filter(|g| g.len() > 1)
            .map(|mut g| {
                g.sort();
                g
            })
            .collect();
        clusters.sort();
        Ok(ExportDocument {
            round_index: self.pool.round_index,
            threshold,
            pairs,
            clusters,
        })
    }
}

/// Answers label requests.
pub trait LabelOracle {
    /// Labels for some or all of `requests`. Returning fewer than requested
    /// suspends the run with an [`Error::OracleTimeout`].
    fn label(&mut self, run: &ActiveRun, requests: &[LabelRequest]) -> Result<Vec<LabelSubmission>>;
}

/// Labels from cluster co-membership in the corpus.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthOracle;

impl LabelOracle for GroundTruthOracle {
    fn label(&mut self, run: &ActiveRun, requests: &[LabelRequest]) -> Result<Vec<LabelSubmission>> {
        requests
            .iter()
            .map(|r| {
                let truth = run
                    .truth(&r.pair_id)
                    .ok_or_else(|| Error::config("data.truth_column", "ground-truth labeling needs cluster ids"))?;
                Ok(LabelSubmission::new(r.pair_id.clone(), i64::from(truth)))
            })
            .collect()
    }
}

/// Forwards each batch over a channel and collects answers until the batch
/// is complete or `timeout` passes.
pub struct ChannelOracle {
    pub requests: Sender<Vec<LabelRequest>>,
    pub labels: Receiver<LabelSubmission>,
    pub timeout: Duration,
}

impl LabelOracle for ChannelOracle {
    fn label(&mut self, _run: &ActiveRun, requests: &[LabelRequest]) -> Result<Vec<LabelSubmission>> {
        let mut wanted: std::collections::BTreeSet<&str> = requests.iter().map(|r| r.pair_id.as_str()).collect();
        let mut out = Vec::new();
        if self.requests.send(requests.to_vec()).is_err() {
            return Ok(out);
        }
        let deadline = Instant::now() + self.timeout;
        while !wanted.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.labels.recv_timeout(left) {
                Ok(label) => {
                    wanted.remove(label.pair_id.as_str());
                    out.push(label);
                }
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => break,
            }
        }
        Ok(out)
    }
}

/// Runs the whole loop in memory and returns one report per round.
pub fn run_loop(config: &RunConfig, oracle: &mut dyn LabelOracle) -> Result<Vec<RoundReport>> {
    let mut run = ActiveRun::new(config.clone())?;
    run.run_with(oracle)?;
    Ok(run.reports)
}
