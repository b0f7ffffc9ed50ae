//! Runs known to the service, their cached status and the background
//! workers that train them.
//!
//! Each run has two locks. `info` is a plain mutex over the cached handle
//! and reports, held only for short copies, so reads never wait on
//! training. `run` is an async mutex around the [`ActiveRun`] itself; every
//! mutation (label intake, a training round, export) takes it in turn.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use dedup_core::active::{
    ActiveRun, ExportDocument, GroundTruthOracle, LabelOracle, LabelRequest, LabelSubmission, RunStatus, SubmitOutcome,
};
use dedup_core::config::RunConfig;
use dedup_core::eval::RoundReport;
use serde::{Deserialize, Serialize};
use tokio::sync::OwnedMutexGuard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Batches wait in the queue for annotators.
    #[default]
    Human,
    /// Batches are answered from the corpus clusters without queueing.
    GroundTruth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMeta {
    run_id: String,
    oracle: OracleMode,
}

/// Snapshot returned by `GET /runs/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub run_id: String,
    pub status: RunStatus,
    pub round_index: usize,
    pub total_rounds: usize,
    /// Non-empty exactly when `status` is `awaiting_labels`.
    pub pending: Vec<LabelRequest>,
    pub config_digest: String,
    pub oracle: OracleMode,
    pub latest_report: Option<RoundReport>,
    /// Set when the worker stopped on an error; the run is then `done`.
    pub error: Option<String>,
}

#[derive(Debug)]
struct Info {
    handle: RunHandle,
    reports: Vec<RoundReport>,
}

pub struct RunSlot {
    info: Mutex<Info>,
    run: Arc<tokio::sync::Mutex<Option<ActiveRun>>>,
}

/// Why a request could not be served.
#[derive(Debug)]
pub enum ServiceError {
    NotFound(String),
    Conflict { message: String, status: Option<RunStatus> },
    Invalid { message: String, field: Option<String> },
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for ServiceError {
    fn from(e: anyhow::Error) -> Self {
        ServiceError::Internal(e)
    }
}

impl RunSlot {
    fn new(run_id: &str, config: &RunConfig, oracle: OracleMode) -> Self {
        Self {
            info: Mutex::new(Info {
                handle: RunHandle {
                    run_id: run_id.to_string(),
                    status: RunStatus::Idle,
                    round_index: 0,
                    total_rounds: config.active.rounds,
                    pending: vec![],
                    config_digest: config.digest(),
                    oracle,
                    latest_report: None,
                    error: None,
                },
                reports: vec![],
            }),
            run: Arc::new(tokio::sync::Mutex::new(None)),
        }
    }

    pub fn handle(&self) -> RunHandle {
        self.info.lock().unwrap().handle.clone()
    }

    pub fn reports(&self) -> Vec<RoundReport> {
        self.info.lock().unwrap().reports.clone()
    }

    fn set_status(&self, status: RunStatus) {
        let mut info = self.info.lock().unwrap();
        info.handle.status = status;
        if status != RunStatus::AwaitingLabels {
            info.handle.pending.clear();
        }
    }

    /// Copies the run's state into the cached handle.
    fn sync(&self, run: &ActiveRun, status: RunStatus) {
        let mut info = self.info.lock().unwrap();
        info.handle.status = status;
        info.handle.round_index = run.round_index();
        info.handle.pending = if status == RunStatus::AwaitingLabels { run.requests() } else { vec![] };
        info.handle.latest_report = run.reports().last().cloned();
        info.reports = run.reports().to_vec();
    }

    fn fail(&self, err: &anyhow::Error) {
        log::error!("run {} stopped: {err:#}", self.handle().run_id);
        let mut info = self.info.lock().unwrap();
        info.handle.status = RunStatus::Done;
        info.handle.pending.clear();
        info.handle.error = Some(format!("{err:#}"));
    }
}

/// Advances a run until it needs a human or is done. Runs on a blocking
/// thread and holds the run lock throughout.
fn drive(slot: &RunSlot, guard: &mut OwnedMutexGuard<Option<ActiveRun>>, oracle: OracleMode) -> anyhow::Result<()> {
    let run = guard.as_mut().context("run is not loaded")?;
    loop {
        match run.status() {
            RunStatus::Done => {
                slot.sync(run, RunStatus::Done);
                return Ok(());
            }
            RunStatus::AwaitingLabels if oracle == OracleMode::GroundTruth => {
                let labels = GroundTruthOracle.label(run, &run.requests())?;
                run.submit(&labels)?;
            }
            RunStatus::AwaitingLabels => {
                slot.sync(run, RunStatus::AwaitingLabels);
                return Ok(());
            }
            _ => {
                // The cached queue is refreshed by `sync`, so only the
                // busy states are published from inside the round.
                run.advance(&mut |s| {
                    if matches!(s, RunStatus::Training | RunStatus::Scoring) {
                        slot.set_status(s)
                    }
                })?;
                slot.sync(run, run.status());
            }
        }
    }
}

fn spawn_worker(slot: Arc<RunSlot>, mut guard: OwnedMutexGuard<Option<ActiveRun>>, oracle: OracleMode, open: Option<(RunConfig, PathBuf)>) {
    tokio::task::spawn_blocking(move || {
        let result = (|| -> anyhow::Result<()> {
            if let Some((config, dir)) = open {
                let run = ActiveRun::open(config, &dir).with_context(|| format!("opening run in {}", dir.display()))?;
                *guard = Some(run);
            }
            drive(&slot, &mut guard, oracle)
        })();
        if let Err(e) = result {
            slot.fail(&e);
        }
    });
}

pub struct Registry {
    data_dir: PathBuf,
    runs: RwLock<BTreeMap<String, Arc<RunSlot>>>,
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Registry {
    pub fn new(data_dir: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(data_dir.join("runs")).with_context(|| format!("creating {}", data_dir.display()))?;
        Ok(Self {
            data_dir,
            runs: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.data_dir.join("runs").join(run_id)
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<RunSlot>, ServiceError> {
        self.runs
            .read()
            .unwrap()
            .get(run_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no run `{run_id}`")))
    }

    pub fn list(&self) -> Vec<RunHandle> {
        self.runs.read().unwrap().values().map(|s| s.handle()).collect()
    }

    /// Resumes every run persisted under the data directory.
    pub async fn restore(&self) -> anyhow::Result<usize> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(self.data_dir.join("runs"))? {
            let entry = entry?;
            if entry.path().join("meta.json").exists() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        for id in &ids {
            let meta: RunMeta = serde_json::from_slice(&std::fs::read(self.run_dir(id).join("meta.json"))?)?;
            let config = RunConfig::load(self.run_dir(id).join("config.json"))?;
            self.launch(id, config, meta.oracle).await?;
        }
        Ok(ids.len())
    }

    /// Creates a run, or resumes the persisted run with the same id.
    pub async fn start(&self, run_id: Option<String>, config: RunConfig, oracle: OracleMode) -> Result<RunHandle, ServiceError> {
        config.validate().map_err(invalid)?;
        if let dedup_core::config::DataSource::Csv { path, .. } = &config.data {
            if !path.exists() {
                return Err(ServiceError::Invalid {
                    message: format!("{} does not exist", path.display()),
                    field: Some("data.path".into()),
                });
            }
        }
        let run_id = match run_id {
            Some(id) if !valid_run_id(&id) => {
                return Err(ServiceError::Invalid {
                    message: "run ids use letters, digits, `-` and `_`".into(),
                    field: Some("run_id".into()),
                })
            }
            Some(id) => id,
            None => self.fresh_id(),
        };
        if self.runs.read().unwrap().contains_key(&run_id) {
            return Err(ServiceError::Conflict {
                message: format!("run `{run_id}` already exists"),
                status: None,
            });
        }
        let dir = self.run_dir(&run_id);
        if dir.join("config.json").exists() {
            let stored = RunConfig::load(dir.join("config.json")).map_err(|e| ServiceError::Internal(e.into()))?;
            if stored != config {
                return Err(ServiceError::Conflict {
                    message: format!("run `{run_id}` was persisted with a different configuration"),
                    status: None,
                });
            }
        }
        std::fs::create_dir_all(&dir).map_err(|e| ServiceError::Internal(e.into()))?;
        let meta = RunMeta { run_id: run_id.clone(), oracle };
        std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta).unwrap())
            .map_err(|e| ServiceError::Internal(e.into()))?;
        Ok(self.launch(&run_id, config, oracle).await?)
    }

    async fn launch(&self, run_id: &str, config: RunConfig, oracle: OracleMode) -> anyhow::Result<RunHandle> {
        let slot = Arc::new(RunSlot::new(run_id, &config, oracle));
        {
            let mut runs = self.runs.write().unwrap();
            anyhow::ensure!(!runs.contains_key(run_id), "run `{run_id}` already exists");
            runs.insert(run_id.to_string(), slot.clone());
        }
        let guard = slot.run.clone().lock_owned().await;
        slot.set_status(RunStatus::Training);
        let handle = slot.handle();
        spawn_worker(slot, guard, oracle, Some((config, self.run_dir(run_id))));
        Ok(handle)
    }

    fn fresh_id(&self) -> String {
        let runs = self.runs.read().unwrap();
        (1..)
            .map(|n| format!("run-{n}"))
            .find(|id| !runs.contains_key(id) && !self.run_dir(id).exists())
            .unwrap()
    }

    pub fn queue(&self, run_id: &str) -> Result<Vec<LabelRequest>, ServiceError> {
        let handle = self.get(run_id)?.handle();
        if handle.status != RunStatus::AwaitingLabels {
            return Err(conflict(&handle));
        }
        Ok(handle.pending)
    }

    /// Applies labels and, once the batch is complete, starts the next round.
    pub async fn submit(&self, run_id: &str, labels: Vec<LabelSubmission>) -> Result<(SubmitOutcome, RunStatus), ServiceError> {
        let slot = self.get(run_id)?;
        let handle = slot.handle();
        if handle.status != RunStatus::AwaitingLabels {
            return Err(conflict(&handle));
        }
        let mut guard = slot.run.clone().lock_owned().await;
        let handle = slot.handle();
        if handle.status != RunStatus::AwaitingLabels {
            return Err(conflict(&handle));
        }
        let run = guard.as_mut().ok_or_else(|| ServiceError::Internal(anyhow::anyhow!("run is not loaded")))?;
        let outcome = run.submit(&labels).map_err(|e| ServiceError::Internal(e.into()))?;
        if outcome.remaining > 0 {
            slot.sync(run, RunStatus::AwaitingLabels);
            return Ok((outcome, RunStatus::AwaitingLabels));
        }
        slot.sync(run, RunStatus::Training);
        spawn_worker(slot, guard, handle.oracle, None);
        Ok((outcome, RunStatus::Training))
    }

    pub fn reports(&self, run_id: &str) -> Result<Vec<RoundReport>, ServiceError> {
        Ok(self.get(run_id)?.reports())
    }

    pub async fn export(&self, run_id: &str) -> Result<ExportDocument, ServiceError> {
        let slot = self.get(run_id)?;
        let handle = slot.handle();
        if matches!(handle.status, RunStatus::Training | RunStatus::Scoring | RunStatus::Idle) {
            return Err(conflict(&handle));
        }
        let guard = slot.run.clone().lock_owned().await;
        tokio::task::spawn_blocking(move || match guard.as_ref() {
            Some(run) => run.export().map_err(|e| ServiceError::Internal(e.into())),
            None => Err(ServiceError::Internal(anyhow::anyhow!("run is not loaded"))),
        })
        .await
        .map_err(|e| ServiceError::Internal(e.into()))?
    }
}

fn invalid(e: dedup_core::Error) -> ServiceError {
    match e {
        dedup_core::Error::Config { field, message } => ServiceError::Invalid {
            message: format!("{field}: {message}"),
            field: Some(field),
        },
        other => ServiceError::Invalid {
            message: other.to_string(),
            field: None,
        },
    }
}

fn conflict(handle: &RunHandle) -> ServiceError {
    let message = match handle.status {
        RunStatus::Done => "run is done".to_string(),
        s => format!("run is {} in round {}", serde_json::to_value(s).unwrap().as_str().unwrap_or("busy"), handle.round_index),
    };
    ServiceError::Conflict {
        message,
        status: Some(handle.status),
    }
}
