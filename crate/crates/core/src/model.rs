//! Domain types shared by every stage: identifiers, calls, the timestamp
//! grid and the detection parameters.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Interned user identifier. Stable for the lifetime of a [`UserTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserIdx(pub u32);

/// Interned antenna identifier.
///
/// Registries assign indices in lexicographic order of the antenna id, so
/// comparing two `AntennaIdx` values compares the underlying ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AntennaIdx(pub u32);

impl AntennaIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl UserIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One CDR row: `user` used `antenna` at absolute time `at` (UTC seconds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Call {
    pub user: UserIdx,
    pub at: i64,
    pub antenna: AntennaIdx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Antenna {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
}

/// Maps opaque user ids to dense indices.
#[derive(Debug, Clone, Default)]
pub struct UserTable {
    names: Vec<String>,
    lookup: HashMap<String, UserIdx>,
}

impl UserTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> UserIdx {
        if let Some(&idx) = self.lookup.get(name) {
            return idx;
        }
        let idx = UserIdx(self.names.len() as u32);
        self.names.push(name.to_owned());
        self.lookup.insert(name.to_owned(), idx);
        idx
    }

    pub fn get(&self, name: &str) -> Option<UserIdx> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, idx: UserIdx) -> &str {
        &self.names[idx.index()]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Sorted external ids for a set of users.
    pub fn names_sorted<'a>(&'a self, users: impl IntoIterator<Item = &'a UserIdx>) -> Vec<String> {
        let mut out: Vec<String> = users.into_iter().map(|&u| self.name(u).to_owned()).collect();
        out.sort();
        out
    }
}

/// Regular grid of timestamps `origin + t * step`, each owning the window
/// `[grid_time(t) - half_window, grid_time(t) + half_window]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub origin: i64,
    pub step: i64,
    pub half_window: i64,
    pub n_steps: usize,
}

pub const HOUR: i64 = 3600;
pub const DAY: i64 = 24 * HOUR;

impl TimeGrid {
    pub fn new(origin: i64, step: i64, half_window: i64, n_steps: usize) -> Self {
        assert!(step > 0, "grid step must be positive");
        assert!(half_window > 0, "half window must be positive");
        Self {
            origin,
            step,
            half_window,
            n_steps,
        }
    }

    /// Hourly grid with tiling windows.
    pub fn hourly(origin: i64, n_steps: usize) -> Self {
        Self::new(origin, HOUR, HOUR / 2, n_steps)
    }

    /// Smallest hour-aligned grid whose points cover `[first, last]`.
    pub fn covering(first: i64, last: i64, step: i64, half_window: i64) -> Self {
        let mut origin = first.div_euclid(HOUR) * HOUR;
        if first - origin > half_window {
            origin += HOUR;
        }
        let beyond = (last - half_window - origin).max(0);
        let n_steps = (-(-beyond).div_euclid(step)) as usize + 1;
        Self::new(origin, step, half_window, n_steps)
    }

    pub fn with_half_window(self, half_window: i64) -> Self {
        Self::new(self.origin, self.step, half_window, self.n_steps)
    }

    pub fn grid_time(&self, t: usize) -> i64 {
        self.origin + t as i64 * self.step
    }

    /// Every grid index whose window contains `at`, boundaries included.
    pub fn indices_of(&self, at: i64) -> Range<usize> {
        if self.n_steps == 0 {
            return 0..0;
        }
        let rel = at - self.origin;
        let lo = -(-(rel - self.half_window)).div_euclid(self.step);
        let hi = (rel + self.half_window).div_euclid(self.step);
        let lo = lo.max(0);
        let hi = hi.min(self.n_steps as i64 - 1);
        if lo > hi {
            0..0
        } else {
            lo as usize..hi as usize + 1
        }
    }

    /// Hour of day (UTC) of grid point `t`.
    pub fn hour_of_day(&self, t: usize) -> u8 {
        (self.grid_time(t).rem_euclid(DAY) / HOUR) as u8
    }

    pub fn end(&self) -> i64 {
        self.grid_time(self.n_steps.saturating_sub(1))
    }
}

/// Free function form of [`TimeGrid::indices_of`].
pub fn grid_index_of(at: i64, grid: &TimeGrid) -> Range<usize> {
    grid.indices_of(at)
}

/// Detection thresholds. Serialized with the conventional epsilon names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Minimum users in a cylindrical cluster.
    #[serde(rename = "epsilon_n")]
    pub scale: usize,
    /// Minimum number of consecutive clusters in a crowd.
    #[serde(rename = "epsilon_lt")]
    pub lifetime: usize,
    /// Minimum committed users at every step of a crowd.
    #[serde(rename = "epsilon_ci")]
    pub commitment: usize,
    /// Existence probability a user must keep to stay committed.
    #[serde(rename = "epsilon_p")]
    pub commitment_probability: f64,
    /// Crowds whose mean profile similarity is below this are unusual.
    #[serde(rename = "epsilon_si")]
    pub similarity: f64,
    /// Minimum distinct antennas visited by a crowd.
    pub min_locations: usize,
    /// Half width of a cluster's time window, seconds.
    #[serde(rename = "epsilon_t")]
    pub half_window_secs: i64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            scale: 20,
            lifetime: 4,
            commitment: 10,
            commitment_probability: 0.2,
            similarity: 0.2,
            min_locations: 2,
            half_window_secs: 1800,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamViolation {
    CommitmentExceedsScale,
    LifetimeBelowTwo,
    MinLocationsBelowTwo,
    ProbabilityOutOfRange,
    SimilarityOutOfRange,
    NonPositiveWindow,
}

impl fmt::Display for ParamViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Self::CommitmentExceedsScale => "commitment exceeds scale",
            Self::LifetimeBelowTwo => "lifetime below 2",
            Self::MinLocationsBelowTwo => "min_locations below 2",
            Self::ProbabilityOutOfRange => "commitment probability outside [0, 1]",
            Self::SimilarityOutOfRange => "similarity outside [0, 1]",
            Self::NonPositiveWindow => "half window must be positive",
        };
        f.write_str(msg)
    }
}

impl Params {
    /// Every violated invariant; empty iff the parameter set is usable.
    pub fn validate(&self) -> Vec<ParamViolation> {
        let mut out = Vec::new();
        if self.commitment > self.scale {
            out.push(ParamViolation::CommitmentExceedsScale);
        }
        if self.lifetime < 2 {
            out.push(ParamViolation::LifetimeBelowTwo);
        }
        if self.min_locations < 2 {
            out.push(ParamViolation::MinLocationsBelowTwo);
        }
        if !(0.0..=1.0).contains(&self.commitment_probability) {
            out.push(ParamViolation::ProbabilityOutOfRange);
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            out.push(ParamViolation::SimilarityOutOfRange);
        }
        if self.half_window_secs <= 0 {
            out.push(ParamViolation::NonPositiveWindow);
        }
        out
    }
}

pub fn validate_params(params: &Params) -> Vec<ParamViolation> {
    params.validate()
}

/// A user's resolved positions, one per grid index at most.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub user: UserIdx,
    points: Vec<(usize, AntennaIdx)>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("trajectory grid indices must be strictly increasing (at position {0})")]
pub struct UnorderedTrajectory(pub usize);

impl Trajectory {
    pub fn new(user: UserIdx, points: Vec<(usize, AntennaIdx)>) -> Result<Self, UnorderedTrajectory> {
        if let Some(pos) = points.windows(2).position(|w| w[0].0 >= w[1].0) {
            return Err(UnorderedTrajectory(pos + 1));
        }
        Ok(Self { user, points })
    }

    pub fn points(&self) -> &[(usize, AntennaIdx)] {
        &self.points
    }

    pub fn position_at(&self, t: usize) -> Option<AntennaIdx> {
        self.points
            .binary_search_by_key(&t, |&(ti, _)| ti)
            .ok()
            .map(|i| self.points[i].1)
    }
}
