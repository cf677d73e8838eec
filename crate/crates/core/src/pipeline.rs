//! End-to-end detection: index, cluster, mine, classify, assemble events.

use std::borrow::Cow;
use std::io::Read;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_stream_par, ClusterDb};
use crate::eval::{analyst_stats, antenna_radii_km, timeseries, AnalystStats, RunView, TimeSeries};
use crate::events::{build_events, EventDump, UnusualEvent};
use crate::ingest::{load_antennas, parse_calls, time_span, AntennaRegistry, CallIndex, IngestError, IngestReport};
use crate::miner::{mine_with_trace, CandidateStats, Crowd, CrowdDump, MineError, MiningLimits};
use crate::model::{AntennaIdx, Call, ParamViolation, Params, TimeGrid, UserTable, HOUR};
use crate::profile::{build_profiles, classify_unusual, ProfileStore};
use crate::synth::SynthDataset;

/// Live candidates allowed at one timestamp before a run is abandoned.
pub const DEFAULT_CANDIDATE_LIMIT: usize = 250_000;
/// Closed crowds allowed in one run before it is abandoned.
pub const DEFAULT_CROWD_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid parameters: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Params(Vec<ParamViolation>),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Mine(#[from] MineError),
}

/// Calls indexed on a grid with a given half window, plus profiles built on
/// the same grid.
#[derive(Debug, Clone)]
pub struct Indexed {
    pub grid: TimeGrid,
    pub index: CallIndex,
    pub profiles: ProfileStore,
}

impl Indexed {
    fn build(calls: &[Call], half_window: i64) -> Self {
        let grid = match time_span(calls) {
            Some((first, last)) => TimeGrid::covering(first, last, HOUR, half_window),
            None => TimeGrid::new(0, HOUR, half_window, 0),
        };
        let (index, _) = CallIndex::build(calls, &grid);
        let profiles = build_profiles(calls, &grid);
        Self { grid, index, profiles }
    }
}

/// One loaded CDR dataset. Runs only vary parameters.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub registry: AntennaRegistry,
    pub users: UserTable,
    pub calls: Vec<Call>,
    pub report: IngestReport,
    base: Indexed,
}

impl Dataset {
    pub fn new(registry: AntennaRegistry, users: UserTable, calls: Vec<Call>, report: IngestReport, half_window: i64) -> Self {
        let base = Indexed::build(&calls, half_window);
        Self {
            registry,
            users,
            calls,
            report,
            base,
        }
    }

    pub fn load<C: Read, A: Read>(calls: C, antennas: A, half_window: i64) -> Result<Self, PipelineError> {
        let registry = load_antennas(antennas)?;
        let mut users = UserTable::new();
        let (calls, report) = parse_calls(calls, &registry, &mut users)?;
        Ok(Self::new(registry, users, calls, report, half_window))
    }

    pub fn from_synth(data: SynthDataset, half_window: i64) -> Self {
        let report = IngestReport {
            admitted: data.calls.len() as u64,
            ..IngestReport::default()
        };
        Self::new(data.registry, data.users, data.calls, report, half_window)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.base.grid
    }

    pub fn index(&self) -> &CallIndex {
        &self.base.index
    }

    pub fn profiles(&self) -> &ProfileStore {
        &self.base.profiles
    }

    /// The dataset on a grid with `half_window`, reusing the loaded index
    /// when it already matches.
    pub fn indexed(&self, half_window: i64) -> Cow<'_, Indexed> {
        if half_window == self.base.grid.half_window {
            Cow::Borrowed(&self.base)
        } else {
            Cow::Owned(Indexed::build(&self.calls, half_window))
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub limits: MiningLimits,
    /// Leave each crowd member's own calls at the crowd's timestamps out of
    /// their profile when scoring.
    pub holdout: bool,
    /// Profiles from a separate history; the dataset's own otherwise.
    pub profiles: Option<Arc<ProfileStore>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            limits: MiningLimits {
                candidates: Some(DEFAULT_CANDIDATE_LIMIT),
                crowds: Some(DEFAULT_CROWD_LIMIT),
            },
            holdout: true,
            profiles: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub index_ms: u64,
    pub cluster_ms: u64,
    pub mine_ms: u64,
    pub classify_ms: u64,
    pub events_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub calls: usize,
    pub timestamps: usize,
    pub clusters: usize,
    pub crowds: usize,
    pub unusual_crowds: usize,
    pub events: usize,
}

/// A crowd with its classification, one per line in crowd dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdRecord {
    #[serde(flatten)]
    pub crowd: CrowdDump,
    pub similarity: f64,
    pub unusual: bool,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub params: Params,
    pub grid: TimeGrid,
    pub clusters: ClusterDb,
    pub trace: Vec<CandidateStats>,
    pub crowds: Vec<Crowd>,
    /// Mean profile similarity per crowd.
    pub similarity: Vec<f64>,
    pub is_unusual: Vec<bool>,
    pub unusual: Vec<Crowd>,
    pub events: Vec<UnusualEvent>,
    pub timeseries: TimeSeries,
    pub analyst: AnalystStats,
    pub timings: Timings,
}

fn ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

pub fn run(dataset: &Dataset, params: &Params, options: &RunOptions) -> Result<RunArtifacts, PipelineError> {
    let violations = params.validate();
    if !violations.is_empty() {
        return Err(PipelineError::Params(violations));
    }
    let mut timings = Timings::default();

    let clock = Instant::now();
    let indexed = dataset.indexed(params.half_window_secs);
    let (grid, index) = (&indexed.grid, &indexed.index);
    timings.index_ms = ms(clock);

    let clock = Instant::now();
    let clusters = cluster_stream_par(index, params);
    timings.cluster_ms = ms(clock);

    let clock = Instant::now();
    let mined = mine_with_trace(&clusters, params, &options.limits)?;
    timings.mine_ms = ms(clock);

    let clock = Instant::now();
    let profiles = options.profiles.as_deref().unwrap_or(&indexed.profiles);
    let holdout = options.holdout.then_some(index);
    let classified: Vec<(bool, f64)> = mined
        .crowds
        .par_iter()
        .map(|c| {
            let (unusual, report) = classify_unusual(c, profiles, grid, params, holdout);
            (unusual, report.mean)
        })
        .collect();
    let (is_unusual, similarity): (Vec<bool>, Vec<f64>) = classified.into_iter().unzip();
    let unusual: Vec<Crowd> = mined
        .crowds
        .iter()
        .zip(&is_unusual)
        .filter(|(_, &u)| u)
        .map(|(c, _)| c.clone())
        .collect();
    timings.classify_ms = ms(clock);

    let clock = Instant::now();
    let events = build_events(&unusual, &dataset.registry);
    timings.events_ms = ms(clock);

    let view = RunView {
        grid,
        index,
        clusters: &clusters,
        trace: &mined.trace,
        crowds: &mined.crowds,
        similarity: &similarity,
        unusual: &unusual,
        events: &events,
    };
    let timeseries = timeseries(&view);
    let analyst = analyst_stats(&view, params, &antenna_radii_km(&dataset.registry));
    let grid = *grid;

    Ok(RunArtifacts {
        params: *params,
        grid,
        clusters,
        trace: mined.trace,
        crowds: mined.crowds,
        similarity,
        is_unusual,
        unusual,
        events,
        timeseries,
        analyst,
        timings,
    })
}

impl RunArtifacts {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            calls: self.timeseries.points.iter().map(|p| p.total_calls).sum(),
            timestamps: self.grid.n_steps,
            clusters: self.clusters.len(),
            crowds: self.crowds.len(),
            unusual_crowds: self.unusual.len(),
            events: self.events.len(),
        }
    }

    pub fn event_dumps(&self, dataset: &Dataset, pois: &dyn Fn(AntennaIdx) -> Vec<String>) -> Vec<EventDump> {
        self.events
            .iter()
            .map(|e| e.to_dump(&self.unusual, &dataset.users, &dataset.registry, &self.grid, pois))
            .collect()
    }

    pub fn crowd_records(&self, dataset: &Dataset) -> Vec<CrowdRecord> {
        self.crowds
            .iter()
            .zip(&self.similarity)
            .zip(&self.is_unusual)
            .map(|((c, &similarity), &unusual)| CrowdRecord {
                crowd: c.to_dump(&dataset.users, &dataset.registry),
                similarity,
                unusual,
            })
            .collect()
    }
}
