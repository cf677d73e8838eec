//! Detection runs over the loaded dataset, executed one at a time in
//! submission order.

use std::sync::{Arc, RwLock};

use crowdlens_core::pipeline::{PipelineError, RunSummary, Timings};
use crowdlens_core::{run, Dataset, Params, RunArtifacts, RunOptions};
use serde::Serialize;
use tokio::sync::mpsc;

use crate::pois::PoiTable;

/// Queued runs beyond this are refused.
pub const QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
}

/// A finished run. The JSON payloads are rendered once so repeated reads
/// return identical bytes.
#[derive(Debug)]
pub struct RunResults {
    pub artifacts: RunArtifacts,
    pub summary: RunSummary,
    pub timeseries: Vec<u8>,
    pub events: Vec<u8>,
    pub analyst: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct RunEntry {
    pub id: String,
    pub params: Params,
    pub status: RunStatus,
    pub error: Option<String>,
    pub results: Option<Arc<RunResults>>,
}

/// Status view of a run, as listed by `/runs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub run_id: String,
    pub status: RunStatus,
    pub params: Params,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunEntry {
    pub fn info(&self) -> RunInfo {
        RunInfo {
            run_id: self.id.clone(),
            status: self.status,
            params: self.params,
            summary: self.results.as_ref().map(|r| r.summary),
            timings: self.results.as_ref().map(|r| r.artifacts.timings),
            error: self.error.clone(),
        }
    }
}

/// The dataset a server answers for.
#[derive(Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    pub pois: PoiTable,
}

#[derive(Debug)]
struct Shared {
    data: Option<Arc<Loaded>>,
    runs: RwLock<Vec<RunEntry>>,
    queue: mpsc::Sender<usize>,
    options: RunOptions,
}

#[derive(Debug, Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

/// Drains the run queue for the life of the process.
#[derive(Debug)]
pub struct Worker {
    state: AppState,
    rx: mpsc::Receiver<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitError {
    NoDataset,
    Invalid(Vec<String>),
    QueueFull,
}

impl AppState {
    pub fn new(data: Option<Loaded>, options: RunOptions) -> (Self, Worker) {
        let (tx, rx) = mpsc::channel(QUEUE_CAPACITY);
        let state = Self {
            shared: Arc::new(Shared {
                data: data.map(Arc::new),
                runs: RwLock::new(Vec::new()),
                queue: tx,
                options,
            }),
        };
        let worker = Worker {
            state: state.clone(),
            rx,
        };
        (state, worker)
    }

    /// State with its worker already running on the current runtime.
    pub fn spawn(data: Option<Loaded>, options: RunOptions) -> Self {
        let (state, worker) = Self::new(data, options);
        tokio::spawn(worker.run());
        state
    }

    pub fn data(&self) -> Option<&Loaded> {
        self.shared.data.as_deref()
    }

    pub fn list(&self) -> Vec<RunInfo> {
        self.shared.runs.read().unwrap().iter().map(RunEntry::info).collect()
    }

    pub fn get(&self, id: &str) -> Option<RunEntry> {
        let idx = slot_of(id)?;
        self.shared.runs.read().unwrap().get(idx).cloned()
    }

    pub fn submit(&self, params: Params) -> Result<RunInfo, SubmitError> {
        if self.shared.data.is_none() {
            return Err(SubmitError::NoDataset);
        }
        let violations = params.validate();
        if !violations.is_empty() {
            return Err(SubmitError::Invalid(violations.iter().map(ToString::to_string).collect()));
        }
        let permit = self.shared.queue.try_reserve().map_err(|_| SubmitError::QueueFull)?;
        let mut runs = self.shared.runs.write().unwrap();
        let idx = runs.len();
        let entry = RunEntry {
            id: format!("run-{}", idx + 1),
            params,
            status: RunStatus::Queued,
            error: None,
            results: None,
        };
        let info = entry.info();
        runs.push(entry);
        permit.send(idx);
        Ok(info)
    }

    fn update(&self, idx: usize, apply: impl FnOnce(&mut RunEntry)) {
        if let Some(entry) = self.shared.runs.write().unwrap().get_mut(idx) {
            apply(entry);
        }
    }

    fn execute(&self, idx: usize) -> Result<RunResults, String> {
        let loaded = self.shared.data.as_deref().ok_or("no dataset")?;
        let params = self.shared.runs.read().unwrap()[idx].params;
        let artifacts = run(&loaded.dataset, &params, &self.shared.options).map_err(|e: PipelineError| e.to_string())?;
        render(artifacts, loaded).map_err(|e| e.to_string())
    }
}

fn render(artifacts: RunArtifacts, loaded: &Loaded) -> serde_json::Result<RunResults> {
    let events = artifacts.event_dumps(&loaded.dataset, &|a| loaded.pois.at(a));
    Ok(RunResults {
        summary: artifacts.summary(),
        timeseries: serde_json::to_vec(&artifacts.timeseries)?,
        events: serde_json::to_vec(&events)?,
        analyst: serde_json::to_vec(&artifacts.analyst)?,
        artifacts,
    })
}

fn slot_of(id: &str) -> Option<usize> {
    id.strip_prefix("run-")?.parse::<usize>().ok()?.checked_sub(1)
}

impl Worker {
    pub async fn run(mut self) {
        while let Some(idx) = self.rx.recv().await {
            self.state.update(idx, |e| e.status = RunStatus::Running);
            let state = self.state.clone();
            let outcome = tokio::task::spawn_blocking(move || state.execute(idx))
                .await
                .unwrap_or_else(|e| Err(format!("run aborted: {e}")));
            self.state.update(idx, |e| match outcome {
                Ok(results) => {
                    e.status = RunStatus::Done;
                    e.results = Some(Arc::new(results));
                }
                Err(message) => {
                    e.status = RunStatus::Failed;
                    e.error = Some(message);
                }
            });
        }
    }
}
