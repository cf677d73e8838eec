//! Closed crowd mining over a [`ClusterDb`].
//!
//! Timestamps are swept in increasing order. Every cluster seeds a new
//! candidate; a candidate ending at `t - 1` forks into one extension per
//! admissible cluster at `t`. Candidates without an admissible extension
//! terminate, and a terminated candidate is emitted when it satisfies
//! durability and movement and no other live candidate ending at the same
//! timestamp contains it.
//!
//! Existence probabilities: a user observed in the newest cluster has
//! probability 1; a tracked user who is silent is multiplied by the carry
//! ratio `|prev ∩ next| / |prev|` of the newest step. A user whose
//! probability drops below `epsilon_p` is dropped from the candidate for
//! good. The remaining tracked users are the committed set.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cluster::{ClusterDb, CylindricalCluster};
use crate::ingest::AntennaRegistry;
use crate::model::{AntennaIdx, Params, UserIdx, UserTable};

/// Slack applied when comparing a probability product against a threshold.
pub const PROB_TOLERANCE: f64 = 1e-12;

fn meets(p: f64, threshold: f64) -> bool {
    p + PROB_TOLERANCE >= threshold
}

#[derive(Debug, Error, PartialEq)]
pub enum MineError {
    #[error("previous cluster is empty")]
    DegenerateChain,
    #[error("carried users ({carried}) exceed previous cluster size ({size})")]
    CarriedExceedsCluster { carried: usize, size: usize },
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("more than {0} live candidates at one timestamp")]
    CandidateLimit(usize),
    #[error("more than {0} closed crowds")]
    CrowdLimit(usize),
}

/// One step of the existence probability recurrence.
pub fn existence_step(
    prev_prob: f64,
    carried: usize,
    prev_cluster_size: usize,
    observed_now: bool,
) -> Result<f64, MineError> {
    if prev_cluster_size == 0 {
        return Err(MineError::DegenerateChain);
    }
    if carried > prev_cluster_size {
        return Err(MineError::CarriedExceedsCluster {
            carried,
            size: prev_cluster_size,
        });
    }
    if !(0.0..=1.0).contains(&prev_prob) {
        return Err(MineError::ProbabilityOutOfRange(prev_prob));
    }
    if observed_now {
        Ok(1.0)
    } else {
        Ok(prev_prob * carried as f64 / prev_cluster_size as f64)
    }
}

fn intersection_len(a: &[UserIdx], b: &[UserIdx]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Fraction of `prev`'s members who are also members of `next`.
pub fn carry_ratio(prev: &[UserIdx], next: &[UserIdx]) -> f64 {
    if prev.is_empty() {
        return 0.0;
    }
    intersection_len(prev, next) as f64 / prev.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackedUser {
    pub user: UserIdx,
    pub probability: f64,
    pub observed: bool,
}

/// Existence probabilities at a candidate's latest timestamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExistenceState {
    /// Users still above the threshold, sorted.
    tracked: Vec<TrackedUser>,
    /// Users that fell below the threshold, sorted; never re-admitted.
    dropped: Vec<UserIdx>,
}

impl ExistenceState {
    pub fn tracked(&self) -> &[TrackedUser] {
        &self.tracked
    }

    pub fn dropped(&self) -> &[UserIdx] {
        &self.dropped
    }

    pub fn probability(&self, user: UserIdx) -> f64 {
        self.tracked
            .binary_search_by_key(&user, |t| t.user)
            .map_or(0.0, |i| self.tracked[i].probability)
    }
}

/// A consecutive chain of clusters under construction.
#[derive(Debug, Clone)]
pub struct CandidateCrowd<'a> {
    links: Vec<&'a CylindricalCluster>,
    state: ExistenceState,
}

impl<'a> CandidateCrowd<'a> {
    pub fn seed(cluster: &'a CylindricalCluster) -> Self {
        let tracked = cluster
            .members()
            .iter()
            .map(|&user| TrackedUser {
                user,
                probability: 1.0,
                observed: true,
            })
            .collect();
        Self {
            links: vec![cluster],
            state: ExistenceState {
                tracked,
                dropped: Vec::new(),
            },
        }
    }

    pub fn links(&self) -> &[&'a CylindricalCluster] {
        &self.links
    }

    pub fn start(&self) -> usize {
        self.links[0].t
    }

    pub fn end(&self) -> usize {
        self.links[self.links.len() - 1].t
    }

    pub fn lifetime(&self) -> usize {
        self.links.len()
    }

    pub fn state(&self) -> &ExistenceState {
        &self.state
    }

    pub fn committed(&self) -> impl Iterator<Item = UserIdx> + '_ {
        self.state.tracked.iter().map(|t| t.user)
    }

    pub fn committed_len(&self) -> usize {
        self.state.tracked.len()
    }

    /// Users ever seen by this candidate, committed or dropped.
    pub fn total_users(&self) -> usize {
        self.state.tracked.len() + self.state.dropped.len()
    }

    pub fn distinct_antennas(&self) -> usize {
        distinct(self.links.iter().map(|c| c.antenna))
    }

    fn last(&self) -> &'a CylindricalCluster {
        self.links[self.links.len() - 1]
    }

    /// The candidate extended by `next`, or `None` when the step breaks
    /// commitment: the carry ratio itself is below `epsilon_p`, or fewer
    /// than `epsilon_ci` users keep `p >= epsilon_p` afterwards.
    pub fn extend(&self, next: &'a CylindricalCluster, params: &Params) -> Option<Self> {
        let prev = self.last();
        if next.t != prev.t + 1 {
            return None;
        }
        let ratio = carry_ratio(prev.members(), next.members());
        if !meets(ratio, params.commitment_probability) {
            return None;
        }

        let old = &self.state.tracked;
        let observed = next.members();
        let mut tracked = Vec::with_capacity(old.len() + observed.len());
        let mut newly_dropped = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < old.len() || j < observed.len() {
            let take_old = j == observed.len() || (i < old.len() && old[i].user < observed[j]);
            let take_new = i == old.len() || (j < observed.len() && observed[j] < old[i].user);
            if take_old {
                let p = old[i].probability * ratio;
                if meets(p, params.commitment_probability) {
                    tracked.push(TrackedUser {
                        user: old[i].user,
                        probability: p,
                        observed: false,
                    });
                } else {
                    newly_dropped.push(old[i].user);
                }
                i += 1;
            } else if take_new {
                let user = observed[j];
                if self.state.dropped.binary_search(&user).is_err() {
                    tracked.push(TrackedUser {
                        user,
                        probability: 1.0,
                        observed: true,
                    });
                }
                j += 1;
            } else {
                tracked.push(TrackedUser {
                    user: observed[j],
                    probability: 1.0,
                    observed: true,
                });
                i += 1;
                j += 1;
            }
        }
        if tracked.len() < params.commitment {
            return None;
        }

        let mut dropped = self.state.dropped.clone();
        if !newly_dropped.is_empty() {
            dropped.extend(newly_dropped);
            dropped.sort_unstable();
        }
        let mut links = Vec::with_capacity(self.links.len() + 1);
        links.extend_from_slice(&self.links);
        links.push(next);
        Some(Self {
            links,
            state: ExistenceState { tracked, dropped },
        })
    }

    pub fn is_crowd(&self, params: &Params) -> bool {
        self.lifetime() >= params.lifetime && self.distinct_antennas() >= params.min_locations
    }

    pub fn to_crowd(&self) -> Crowd {
        Crowd {
            chain: self
                .links
                .iter()
                .map(|c| ChainLink {
                    t: c.t,
                    antenna: c.antenna,
                    observed: c.members().to_vec(),
                })
                .collect(),
            committed: self.committed().collect(),
            total_users: self.total_users(),
        }
    }
}

fn distinct(antennas: impl Iterator<Item = AntennaIdx>) -> usize {
    let mut v: Vec<AntennaIdx> = antennas.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Admissible extensions of `candidate` among `clusters` (all at `end + 1`).
pub fn candidate_cluster_search<'a>(
    candidate: &CandidateCrowd<'a>,
    clusters: &'a [CylindricalCluster],
    params: &Params,
) -> Vec<CandidateCrowd<'a>> {
    clusters
        .iter()
        .filter(|c| c.len() >= params.scale)
        .filter_map(|c| candidate.extend(c, params))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainLink {
    pub t: usize,
    pub antenna: AntennaIdx,
    /// Members of the cluster, sorted.
    pub observed: Vec<UserIdx>,
}

/// A mined crowd: consecutive clusters plus its committed users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crowd {
    pub chain: Vec<ChainLink>,
    /// Sorted.
    pub committed: Vec<UserIdx>,
    pub total_users: usize,
}

impl Crowd {
    pub fn start(&self) -> usize {
        self.chain[0].t
    }

    pub fn end(&self) -> usize {
        self.chain[self.chain.len() - 1].t
    }

    pub fn lifetime(&self) -> usize {
        self.chain.len()
    }

    pub fn distinct_antennas(&self) -> usize {
        distinct(self.chain.iter().map(|l| l.antenna))
    }

    pub fn antennas(&self) -> Vec<AntennaIdx> {
        self.chain.iter().map(|l| l.antenna).collect()
    }

    /// `(t, antenna)` per link.
    pub fn path(&self) -> Vec<(usize, AntennaIdx)> {
        self.chain.iter().map(|l| (l.t, l.antenna)).collect()
    }

    /// Carry ratio into each link; the first entry is 1.
    pub fn carry_ratios(&self) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.chain.windows(2).map(|w| carry_ratio(&w[0].observed, &w[1].observed)))
            .collect()
    }

    /// `user`'s existence probability at every link, zero before the user
    /// is first observed.
    pub fn existence_vector(&self, user: UserIdx) -> Vec<f64> {
        self.existence_vector_with(user, &self.carry_ratios())
    }

    /// [`Crowd::existence_vector`] with precomputed [`Crowd::carry_ratios`].
    pub fn existence_vector_with(&self, user: UserIdx, ratios: &[f64]) -> Vec<f64> {
        let mut p = 0.0;
        self.chain
            .iter()
            .zip(ratios)
            .map(|(link, &ratio)| {
                if link.observed.binary_search(&user).is_ok() {
                    p = 1.0;
                } else {
                    p *= ratio;
                }
                p
            })
            .collect()
    }

    pub fn to_dump(&self, users: &UserTable, registry: &AntennaRegistry) -> CrowdDump {
        CrowdDump {
            start: self.start(),
            end: self.end(),
            chain: self
                .chain
                .iter()
                .map(|l| LinkDump {
                    t: l.t,
                    antenna_id: registry.name(l.antenna).to_owned(),
                    observed: users.names_sorted(&l.observed),
                })
                .collect(),
            committed: users.names_sorted(&self.committed),
            lifetime: self.lifetime(),
            distinct_antennas: self.distinct_antennas(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct LinkDump {
    pub t: usize,
    pub antenna_id: String,
    pub observed: Vec<String>,
}

/// Serialized crowd, one per line in crowd dumps.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CrowdDump {
    pub start: usize,
    pub end: usize,
    pub chain: Vec<LinkDump>,
    pub committed: Vec<String>,
    pub lifetime: usize,
    pub distinct_antennas: usize,
}

/// Read access to a chain of clusters for closedness checks.
pub trait ClusterChain {
    fn start(&self) -> usize;
    fn end(&self) -> usize;
    fn antenna_at(&self, t: usize) -> Option<AntennaIdx>;
    fn observed_at(&self, t: usize) -> Option<&[UserIdx]>;
}

impl ClusterChain for Crowd {
    fn start(&self) -> usize {
        Crowd::start(self)
    }
    fn end(&self) -> usize {
        Crowd::end(self)
    }
    fn antenna_at(&self, t: usize) -> Option<AntennaIdx> {
        t.checked_sub(self.start())
            .and_then(|k| self.chain.get(k))
            .map(|l| l.antenna)
    }
    fn observed_at(&self, t: usize) -> Option<&[UserIdx]> {
        t.checked_sub(self.start())
            .and_then(|k| self.chain.get(k))
            .map(|l| l.observed.as_slice())
    }
}

impl ClusterChain for CandidateCrowd<'_> {
    fn start(&self) -> usize {
        CandidateCrowd::start(self)
    }
    fn end(&self) -> usize {
        CandidateCrowd::end(self)
    }
    fn antenna_at(&self, t: usize) -> Option<AntennaIdx> {
        t.checked_sub(self.start())
            .and_then(|k| self.links.get(k))
            .map(|c| c.antenna)
    }
    fn observed_at(&self, t: usize) -> Option<&[UserIdx]> {
        t.checked_sub(self.start())
            .and_then(|k| self.links.get(k))
            .map(|c| c.members())
    }
}

fn is_subset(small: &[UserIdx], big: &[UserIdx]) -> bool {
    intersection_len(small, big) == small.len()
}

/// Whether `inner` is a contiguous piece of `outer`: same antenna at every
/// timestamp of `inner`, with `inner`'s members contained in `outer`'s.
pub fn is_subchain<A: ClusterChain + ?Sized, B: ClusterChain + ?Sized>(inner: &A, outer: &B) -> bool {
    if outer.start() > inner.start() || outer.end() < inner.end() {
        return false;
    }
    (inner.start()..=inner.end()).all(|t| {
        match (inner.antenna_at(t), outer.antenna_at(t), inner.observed_at(t), outer.observed_at(t)) {
            (Some(a), Some(b), Some(oa), Some(ob)) => a == b && is_subset(oa, ob),
            _ => false,
        }
    })
}

/// True when `candidate` is not a contiguous piece of any crowd in
/// `ending_same_time`. Only crowds ending at `candidate.end()` can contain a
/// candidate that could not be extended, so callers pass just those.
pub fn is_closed<A: ClusterChain, B: ClusterChain>(candidate: &A, ending_same_time: &[B]) -> bool {
    !ending_same_time.iter().any(|other| is_subchain(candidate, other))
}

/// Live-candidate statistics at one timestamp.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CandidateStats {
    pub candidates: usize,
    pub lifetime: Option<(usize, usize)>,
    pub committed: Option<(usize, usize)>,
    pub total_users: Option<(usize, usize)>,
}

fn widen(range: &mut Option<(usize, usize)>, v: usize) {
    *range = Some(match *range {
        None => (v, v),
        Some((lo, hi)) => (lo.min(v), hi.max(v)),
    });
}

impl CandidateStats {
    fn of(alive: &[CandidateCrowd<'_>]) -> Self {
        let mut s = Self {
            candidates: alive.len(),
            ..Self::default()
        };
        for c in alive {
            widen(&mut s.lifetime, c.lifetime());
            widen(&mut s.committed, c.committed_len());
            widen(&mut s.total_users, c.total_users());
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct MiningOutput {
    pub crowds: Vec<Crowd>,
    /// One entry per timestamp of the cluster database.
    pub trace: Vec<CandidateStats>,
}

/// Caps on mining work. `None` means unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MiningLimits {
    /// Live candidates at one timestamp.
    pub candidates: Option<usize>,
    /// Closed crowds over the whole run.
    pub crowds: Option<usize>,
}

/// Closed crowds of `db`, sorted by start then antenna sequence.
pub fn mine_closed_crowds(db: &ClusterDb, params: &Params) -> Vec<Crowd> {
    mine_with_trace(db, params, &MiningLimits::default())
        .expect("unbounded mining cannot hit a limit")
        .crowds
}

/// Mining with per-timestamp candidate statistics. Fails as soon as a limit
/// is exceeded, before the excess is materialized.
pub fn mine_with_trace(db: &ClusterDb, params: &Params, limits: &MiningLimits) -> Result<MiningOutput, MineError> {
    let n = db.n_steps();
    let mut alive: Vec<CandidateCrowd<'_>> = Vec::new();
    let mut crowds = Vec::new();
    let mut trace = Vec::with_capacity(n);
    let candidate_cap = limits.candidates.unwrap_or(usize::MAX);

    for t in 0..=n {
        let clusters = db.at(t);
        let produced = AtomicUsize::new(0);
        let extensions: Vec<Vec<CandidateCrowd<'_>>> = alive
            .par_iter()
            .map(|c| {
                if produced.load(Ordering::Relaxed) > candidate_cap {
                    return Vec::new();
                }
                let exts = candidate_cluster_search(c, clusters, params);
                produced.fetch_add(exts.len(), Ordering::Relaxed);
                exts
            })
            .collect();
        if produced.into_inner() > candidate_cap {
            return Err(MineError::CandidateLimit(candidate_cap));
        }

        let mut covered: Option<Vec<bool>> = None;
        for (i, exts) in extensions.iter().enumerate() {
            let c = &alive[i];
            if !exts.is_empty() || !c.is_crowd(params) {
                continue;
            }
            if covered.get_or_insert_with(|| suffix_covered(&alive))[i] {
                continue;
            }
            if limits.crowds.is_some_and(|cap| crowds.len() >= cap) {
                return Err(MineError::CrowdLimit(crowds.len()));
            }
            crowds.push(c.to_crowd());
        }

        if t == n {
            break;
        }
        let mut next: Vec<CandidateCrowd<'_>> = extensions.into_iter().flatten().collect();
        next.extend(
            clusters
                .iter()
                .filter(|c| c.len() >= params.scale && c.len() >= params.commitment)
                .map(CandidateCrowd::seed),
        );
        if next.len() > candidate_cap {
            return Err(MineError::CandidateLimit(candidate_cap));
        }
        trace.push(CandidateStats::of(&next));
        alive = next;
    }

    crowds.sort_by(|a, b| a.start().cmp(&b.start()).then_with(|| a.antennas().cmp(&b.antennas())));
    Ok(MiningOutput { crowds, trace })
}

/// For each candidate, whether another candidate ends on the same clusters
/// and reaches further back. Candidates all end at the same timestamp, so
/// this is a trie over link sequences read backwards: a candidate is covered
/// when its node has a child.
fn suffix_covered(alive: &[CandidateCrowd<'_>]) -> Vec<bool> {
    let mut children: HashMap<(usize, *const CylindricalCluster), usize> = HashMap::new();
    let mut has_child = vec![false];
    let mut ends = Vec::with_capacity(alive.len());
    for c in alive {
        let mut node = 0;
        for &link in c.links.iter().rev() {
            let key = (node, link as *const CylindricalCluster);
            node = match children.get(&key) {
                Some(&child) => child,
                None => {
                    let child = has_child.len();
                    has_child.push(false);
                    has_child[node] = true;
                    children.insert(key, child);
                    child
                }
            };
        }
        ends.push(node);
    }
    ends.into_iter().map(|n| has_child[n]).collect()
}
