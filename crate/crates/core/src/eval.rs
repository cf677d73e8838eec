//! Scoring against ground truth, and the per-timestamp statistics shown by
//! the service.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterDb;
use crate::events::{EventDump, UnusualEvent};
use crate::geometry;
use crate::ingest::{format_timestamp, parse_timestamp, AntennaRegistry, CallIndex};
use crate::miner::{CandidateStats, Crowd};
use crate::model::{AntennaIdx, Params, TimeGrid};
use crate::synth::TruthEvent;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad timestamp {0:?}")]
    Timestamp(String),
    #[error("matched count {matched} exceeds total {total}")]
    Counts { matched: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Ground-truth events matched by at least one detection.
    pub matched: usize,
    /// Detections matching at least one ground-truth event.
    pub matched_detections: usize,
    pub detected: usize,
    pub truth: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl EvalResult {
    pub fn from_counts(
        matched: usize,
        matched_detections: usize,
        detected: usize,
        truth: usize,
    ) -> Result<Self, EvalError> {
        if matched > truth {
            return Err(EvalError::Counts { matched, total: truth });
        }
        if matched_detections > detected {
            return Err(EvalError::Counts {
                matched: matched_detections,
                total: detected,
            });
        }
        let ratio = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
        Ok(Self {
            matched,
            matched_detections,
            detected,
            truth,
            precision: ratio(matched_detections, detected),
            recall: ratio(matched, truth),
        })
    }
}

/// What scoring needs from an event: inclusive span and participants.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSpan {
    pub start: i64,
    pub end: i64,
    pub participants: BTreeSet<String>,
}

impl EventSpan {
    fn parse(start: &str, end: &str, participants: &[String]) -> Result<Self, EvalError> {
        let ts = |s: &str| parse_timestamp(s).ok_or_else(|| EvalError::Timestamp(s.to_owned()));
        Ok(Self {
            start: ts(start)?,
            end: ts(end)?,
            participants: participants.iter().cloned().collect(),
        })
    }

    pub fn from_truth(e: &TruthEvent) -> Result<Self, EvalError> {
        Self::parse(&e.start, &e.end, &e.participants)
    }

    pub fn from_detection(e: &EventDump) -> Result<Self, EvalError> {
        Self::parse(&e.start, &e.end, &e.participants)
    }
}

/// Spans intersect and the detection holds at least half of the planted
/// participants.
pub fn matches(detected: &EventSpan, planted: &EventSpan) -> bool {
    let overlap = detected.start.max(planted.start) <= detected.end.min(planted.end);
    let shared = detected.participants.intersection(&planted.participants).count();
    overlap && shared >= planted.participants.len().div_ceil(2)
}

pub fn score(detected: &[EventSpan], truth: &[EventSpan]) -> EvalResult {
    let matched = truth.iter().filter(|t| detected.iter().any(|d| matches(d, t))).count();
    let matched_detections = detected.iter().filter(|d| truth.iter().any(|t| matches(d, t))).count();
    EvalResult::from_counts(matched, matched_detections, detected.len(), truth.len())
        .expect("matched counts are bounded by construction")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSeriesPoint {
    pub t: usize,
    pub timestamp: String,
    pub clusters: usize,
    pub candidates: usize,
    pub crowds: usize,
    pub unusual_crowds: usize,
    pub unusual_events: usize,
    pub active_users: usize,
    pub total_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub origin: String,
    pub step_secs: i64,
    pub points: Vec<TimeSeriesPoint>,
}

impl TimeSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything the statistics are computed from.
#[derive(Clone, Copy)]
pub struct RunView<'a> {
    pub grid: &'a TimeGrid,
    pub index: &'a CallIndex,
    pub clusters: &'a ClusterDb,
    /// Live candidates per timestamp, as traced by the miner.
    pub trace: &'a [CandidateStats],
    pub crowds: &'a [Crowd],
    /// Mean profile similarity per crowd, parallel to `crowds`.
    pub similarity: &'a [f64],
    pub unusual: &'a [Crowd],
    pub events: &'a [UnusualEvent],
}

fn coverage(n: usize, spans: impl Iterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut delta = vec![0i64; n + 1];
    for (s, e) in spans {
        if s < n {
            delta[s] += 1;
            delta[(e + 1).min(n)] -= 1;
        }
    }
    let mut running = 0;
    delta[..n]
        .iter()
        .map(|d| {
            running += d;
            running as usize
        })
        .collect()
}

/// Distinct clusters per timestamp used by at least one of `crowds`.
fn clusters_in(n: usize, crowds: &[Crowd]) -> Vec<usize> {
    let mut used: BTreeSet<(usize, AntennaIdx)> = BTreeSet::new();
    for c in crowds {
        used.extend(c.path());
    }
    let mut out = vec![0; n];
    for (t, _) in used {
        if t < n {
            out[t] += 1;
        }
    }
    out
}

/// Per-timestamp counts. Crowd columns count the clusters at `t` taken by
/// some (unusual) crowd, so forks sharing a cluster count once; events count
/// at every timestamp of their span.
pub fn timeseries(view: &RunView<'_>) -> TimeSeries {
    let n = view.grid.n_steps;
    let crowds = clusters_in(n, view.crowds);
    let unusual = clusters_in(n, view.unusual);
    let events = coverage(n, view.events.iter().map(|e| (e.start, e.end)));
    TimeSeries {
        origin: format_timestamp(view.grid.origin),
        step_secs: view.grid.step,
        points: (0..n)
            .map(|t| TimeSeriesPoint {
                t,
                timestamp: format_timestamp(view.grid.grid_time(t)),
                clusters: view.clusters.at(t).len(),
                candidates: view.trace.get(t).map_or(0, |s| s.candidates),
                crowds: crowds[t],
                unusual_crowds: unusual[t],
                unusual_events: events[t],
                active_users: view.index.active_users(t),
                total_calls: view.index.slot(t).len(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatGroup<T> {
    pub title: String,
    /// Parameter values drawn as threshold lines, keyed by series field.
    pub thresholds: BTreeMap<String, f64>,
    pub series: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub t: usize,
    pub crowds: usize,
    pub unusual_crowds: usize,
    pub unusual_events: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub t: usize,
    pub clusters: usize,
    pub candidates: usize,
    /// Crowds and events completed at `t`.
    pub crowds: usize,
    pub unusual_crowds: usize,
    pub unusual_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMonitoringPoint {
    pub t: usize,
    pub lifetime_max: usize,
    pub lifetime_min: usize,
    pub committed_max: usize,
    pub committed_min: usize,
    pub total_users_max: usize,
    pub total_users_min: usize,
    /// Over crowds covering `t`; absent when none does.
    pub similarity_max: Option<f64>,
    pub similarity_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMonitoringPoint {
    pub t: usize,
    pub max_cluster_size: usize,
    /// Smallest antenna radius among the clusters at `t`, in km.
    pub min_radius_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub clusters: usize,
    pub crowds: usize,
    pub unusual_crowds: usize,
    pub unusual_events: usize,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystStats {
    pub params: Params,
    pub totals: Totals,
    pub cumulative: StatGroup<CumulativePoint>,
    pub detection: StatGroup<DetectionPoint>,
    pub event_monitoring: StatGroup<EventMonitoringPoint>,
    pub cluster_monitoring: StatGroup<ClusterMonitoringPoint>,
}

/// Radius of each antenna's cell, taken as half the distance to the nearest
/// other antenna. A lone antenna gets radius 0.
pub fn antenna_radii_km(registry: &AntennaRegistry) -> Vec<f64> {
    let ref_lat = registry.mean_latitude();
    let pos: Vec<_> = registry.iter().map(|(i, _)| registry.position(i)).collect();
    (0..pos.len())
        .map(|i| {
            let nearest = (0..pos.len())
                .filter(|&j| j != i)
                .map(|j| geometry::distance_km(pos[i], pos[j], ref_lat))
                .fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                nearest / 2.0
            } else {
                0.0
            }
        })
        .collect()
}

fn thresholds(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_owned(), v)).collect()
}

pub fn analyst_stats(view: &RunView<'_>, params: &Params, radii_km: &[f64]) -> AnalystStats {
    let n = view.grid.n_steps;
    let mut ended_crowds = vec![0usize; n];
    let mut ended_unusual = vec![0usize; n];
    let mut ended_events = vec![0usize; n];
    for c in view.crowds {
        ended_crowds[c.end()] += 1;
    }
    for c in view.unusual {
        ended_unusual[c.end()] += 1;
    }
    for e in view.events {
        ended_events[e.end] += 1;
    }

    let mut cumulative = Vec::with_capacity(n);
    let (mut a, mut b, mut c) = (0, 0, 0);
    for t in 0..n {
        a += ended_crowds[t];
        b += ended_unusual[t];
        c += ended_events[t];
        cumulative.push(CumulativePoint {
            t,
            crowds: a,
            unusual_crowds: b,
            unusual_events: c,
        });
    }

    let detection = (0..n)
        .map(|t| DetectionPoint {
            t,
            clusters: view.clusters.at(t).len(),
            candidates: view.trace.get(t).map_or(0, |s| s.candidates),
            crowds: ended_crowds[t],
            unusual_crowds: ended_unusual[t],
            unusual_events: ended_events[t],
        })
        .collect();

    let mut similarity: Vec<Option<(f64, f64)>> = vec![None; n];
    for (crowd, &s) in view.crowds.iter().zip(view.similarity) {
        for slot in &mut similarity[crowd.start()..=crowd.end()] {
            *slot = Some(match *slot {
                None => (s, s),
                Some((lo, hi)) => (lo.min(s), hi.max(s)),
            });
        }
    }
    let event_monitoring = view
        .trace
        .iter()
        .enumerate()
        .filter_map(|(t, s)| {
            let (lifetime_min, lifetime_max) = s.lifetime?;
            let (committed_min, committed_max) = s.committed?;
            let (total_users_min, total_users_max) = s.total_users?;
            Some(EventMonitoringPoint {
                t,
                lifetime_max,
                lifetime_min,
                committed_max,
                committed_min,
                total_users_max,
                total_users_min,
                similarity_max: similarity[t].map(|s| s.1),
                similarity_min: similarity[t].map(|s| s.0),
            })
        })
        .collect();

    let cluster_monitoring = (0..n)
        .map(|t| {
            let at = view.clusters.at(t);
            ClusterMonitoringPoint {
                t,
                max_cluster_size: at.iter().map(|c| c.len()).max().unwrap_or(0),
                min_radius_km: at
                    .iter()
                    .filter_map(|c| radii_km.get(c.antenna.index()).copied())
                    .reduce(f64::min),
            }
        })
        .collect();

    AnalystStats {
        params: *params,
        totals: Totals {
            clusters: view.clusters.len(),
            crowds: view.crowds.len(),
            unusual_crowds: view.unusual.len(),
            unusual_events: view.events.len(),
            calls: view.index.total(),
        },
        cumulative: StatGroup {
            title: "Cumulative".into(),
            thresholds: BTreeMap::new(),
            series: cumulative,
        },
        detection: StatGroup {
            title: "Detection per timestamp".into(),
            thresholds: BTreeMap::new(),
            series: detection,
        },
        event_monitoring: StatGroup {
            title: "Event monitoring".into(),
            thresholds: thresholds(&[
                ("lifetime", params.lifetime as f64),
                ("committed", params.commitment as f64),
                ("total_users", params.scale as f64),
                ("similarity", params.similarity),
            ]),
            series: event_monitoring,
        },
        cluster_monitoring: StatGroup {
            title: "Cluster monitoring".into(),
            thresholds: thresholds(&[("max_cluster_size", params.scale as f64)]),
            series: cluster_monitoring,
        },
    }
}
