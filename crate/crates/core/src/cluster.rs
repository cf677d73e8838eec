//! Cylindrical cluster detection.
//!
//! At every grid index each calling user is pinned to one antenna (the most
//! used one in the window) and users sharing an antenna form a cluster when
//! there are at least `scale` of them.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ingest::{AntennaRegistry, CallIndex, Observation};
use crate::model::{AntennaIdx, Params, Trajectory, UserIdx, UserTable};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("no observations to resolve")]
    NoObservations,
}

/// Users co-located at one antenna around one grid timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CylindricalCluster {
    pub t: usize,
    pub antenna: AntennaIdx,
    members: Vec<UserIdx>,
    calls: Vec<u32>,
}

impl CylindricalCluster {
    /// Builds a cluster from `(user, call count)` pairs in any order.
    pub fn new(t: usize, antenna: AntennaIdx, mut members: Vec<(UserIdx, u32)>) -> Self {
        members.sort_unstable();
        members.dedup_by_key(|m| m.0);
        let (members, calls) = members.into_iter().unzip();
        Self {
            t,
            antenna,
            members,
            calls,
        }
    }

    pub fn from_users(t: usize, antenna: AntennaIdx, users: impl IntoIterator<Item = UserIdx>) -> Self {
        Self::new(t, antenna, users.into_iter().map(|u| (u, 1)).collect())
    }

    /// Members, sorted.
    pub fn members(&self) -> &[UserIdx] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, user: UserIdx) -> bool {
        self.members.binary_search(&user).is_ok()
    }

    /// Calls made by `user` at this antenna in the window.
    pub fn call_count(&self, user: UserIdx) -> u32 {
        self.members
            .binary_search(&user)
            .map_or(0, |i| self.calls[i])
    }
}

/// Picks one antenna out of a user's observations in a window: most calls,
/// then earliest call, then smallest antenna id.
pub fn resolve_position(observations: &[(AntennaIdx, i64)]) -> Result<AntennaIdx, ClusterError> {
    let mut tally: BTreeMap<AntennaIdx, (u32, i64)> = BTreeMap::new();
    for &(antenna, at) in observations {
        let e = tally.entry(antenna).or_insert((0, at));
        e.0 += 1;
        e.1 = e.1.min(at);
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)).then(a.0.cmp(&b.0)))
        .map(|(antenna, _)| antenna)
        .ok_or(ClusterError::NoObservations)
}

/// Resolves one user's run of observations (sorted by antenna, then time).
/// Returns the chosen antenna and the number of calls there.
fn resolve_sorted(run: &[Observation]) -> (AntennaIdx, u32) {
    let mut best: Option<(AntennaIdx, u32, i64)> = None;
    let mut i = 0;
    while i < run.len() {
        let antenna = run[i].antenna;
        let first = run[i].at;
        let mut j = i;
        while j < run.len() && run[j].antenna == antenna {
            j += 1;
        }
        let count = (j - i) as u32;
        let better = match best {
            None => true,
            Some((_, c, f)) => count > c || (count == c && first < f),
        };
        if better {
            best = Some((antenna, count, first));
        }
        i = j;
    }
    let (antenna, count, _) = best.expect("non-empty run");
    (antenna, count)
}

fn user_runs(slot: &[Observation]) -> impl Iterator<Item = &[Observation]> {
    slot.chunk_by(|a, b| a.user == b.user)
}

/// Clusters at grid index `t`, ordered by antenna.
pub fn detect_clusters(index: &CallIndex, t: usize, params: &Params) -> Vec<CylindricalCluster> {
    let mut by_antenna: BTreeMap<AntennaIdx, Vec<(UserIdx, u32)>> = BTreeMap::new();
    for run in user_runs(index.slot(t)) {
        let (antenna, calls) = resolve_sorted(run);
        by_antenna.entry(antenna).or_default().push((run[0].user, calls));
    }
    by_antenna
        .into_iter()
        .filter(|(_, users)| !users.is_empty() && users.len() >= params.scale)
        .map(|(antenna, users)| CylindricalCluster::new(t, antenna, users))
        .collect()
}

/// All clusters, indexed by grid timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterDb {
    slots: Vec<Vec<CylindricalCluster>>,
}

impl ClusterDb {
    /// Wraps pre-built clusters. Each slot is sorted by antenna; a slot's
    /// clusters must carry that slot's index and be pairwise disjoint.
    pub fn from_slots(mut slots: Vec<Vec<CylindricalCluster>>) -> Self {
        for (t, slot) in slots.iter_mut().enumerate() {
            slot.sort_by_key(|c| c.antenna);
            debug_assert!(slot.iter().all(|c| c.t == t));
        }
        Self { slots }
    }

    pub fn n_steps(&self) -> usize {
        self.slots.len()
    }

    pub fn at(&self, t: usize) -> &[CylindricalCluster] {
        self.slots.get(t).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CylindricalCluster> {
        self.slots.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One JSON object per line: `{t, antenna_id, members}`.
    pub fn write_jsonl<W: Write>(
        &self,
        mut out: W,
        users: &UserTable,
        registry: &AntennaRegistry,
    ) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            t: usize,
            antenna_id: &'a str,
            members: Vec<String>,
        }
        for c in self.iter() {
            let line = Line {
                t: c.t,
                antenna_id: registry.name(c.antenna),
                members: users.names_sorted(c.members()),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn cluster_stream(index: &CallIndex, params: &Params) -> ClusterDb {
    ClusterDb {
        slots: (0..index.n_steps())
            .map(|t| detect_clusters(index, t, params))
            .collect(),
    }
}

/// Same as [`cluster_stream`], fanned out across timestamps.
pub fn cluster_stream_par(index: &CallIndex, params: &Params) -> ClusterDb {
    ClusterDb {
        slots: (0..index.n_steps())
            .into_par_iter()
            .map(|t| detect_clusters(index, t, params))
            .collect(),
    }
}

/// Every user's resolved position per grid index.
pub fn resolved_trajectories(index: &CallIndex) -> Vec<Trajectory> {
    let mut points: HashMap<UserIdx, Vec<(usize, AntennaIdx)>> = HashMap::new();
    for t in 0..index.n_steps() {
        for run in user_runs(index.slot(t)) {
            points.entry(run[0].user).or_default().push((t, resolve_sorted(run).0));
        }
    }
    let mut out: Vec<Trajectory> = points
        .into_iter()
        .map(|(user, pts)| Trajectory::new(user, pts).expect("grid indices visited in order"))
        .collect();
    out.sort_by_key(|t| t.user);
    out
}
