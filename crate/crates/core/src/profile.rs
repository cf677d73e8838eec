//! Mobility profiles and the unusual-crowd test.
//!
//! A profile counts, per user and hour of day, how often each antenna was
//! used. A crowd member's existence-probability vector along the crowd is
//! compared with the share of their history spent at the crowd's antenna at
//! the same hours; a crowd whose members look unlike their routine on
//! average is unusual.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AntennaRegistry, CallIndex};
use crate::miner::Crowd;
use crate::model::{AntennaIdx, Call, Params, TimeGrid, UserIdx, UserTable};

pub const HOURS_PER_DAY: usize = 24;
pub const PROFILE_FORMAT: &str = "crowdlens-profiles";
pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty vectors")]
    Empty,
    #[error("unsupported profile store {format} v{version}")]
    Version { format: String, version: u32 },
    #[error("bad profile key {0:?}")]
    BadKey(String),
    #[error("unknown antenna {0}")]
    UnknownAntenna(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserProfile {
    hours: [Vec<(AntennaIdx, u32)>; HOURS_PER_DAY],
}

impl UserProfile {
    pub fn add(&mut self, hour: u8, antenna: AntennaIdx, n: u32) {
        let bucket = &mut self.hours[hour as usize];
        match bucket.binary_search_by_key(&antenna, |e| e.0) {
            Ok(i) => bucket[i].1 += n,
            Err(i) => bucket.insert(i, (antenna, n)),
        }
    }

    pub fn count(&self, hour: u8, antenna: AntennaIdx) -> u32 {
        let bucket = &self.hours[hour as usize];
        bucket
            .binary_search_by_key(&antenna, |e| e.0)
            .map_or(0, |i| bucket[i].1)
    }

    pub fn total(&self, hour: u8) -> u32 {
        self.hours[hour as usize].iter().map(|e| e.1).sum()
    }

    /// Visit counts at `hour`, sorted by antenna.
    pub fn hour(&self, hour: u8) -> &[(AntennaIdx, u32)] {
        &self.hours[hour as usize]
    }

    /// Share of the user's calls at `hour` made at `antenna`; zero without history.
    pub fn fraction(&self, hour: u8, antenna: AntennaIdx) -> f64 {
        match self.total(hour) {
            0 => 0.0,
            total => self.count(hour, antenna) as f64 / total as f64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileStore {
    profiles: HashMap<UserIdx, UserProfile>,
}

impl ProfileStore {
    pub fn get(&self, user: UserIdx) -> Option<&UserProfile> {
        self.profiles.get(&user)
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn add(&mut self, user: UserIdx, hour: u8, antenna: AntennaIdx, n: u32) {
        self.profiles.entry(user).or_default().add(hour, antenna, n);
    }

    pub fn to_json(&self, users: &UserTable, registry: &AntennaRegistry) -> StoredProfiles {
        let mut counts = BTreeMap::new();
        for (&user, profile) in &self.profiles {
            for hour in 0..HOURS_PER_DAY {
                for &(antenna, n) in profile.hour(hour as u8) {
                    let key = format!("{}/{}/{}", users.name(user), hour, registry.name(antenna));
                    counts.insert(key, n);
                }
            }
        }
        StoredProfiles {
            format: PROFILE_FORMAT.to_owned(),
            version: PROFILE_VERSION,
            counts,
        }
    }

    /// Inverse of [`ProfileStore::to_json`]. Keys split on their last two
    /// `/`, so antenna ids must not contain one.
    pub fn from_json(
        stored: &StoredProfiles,
        users: &mut UserTable,
        registry: &AntennaRegistry,
    ) -> Result<Self, ProfileError> {
        if stored.format != PROFILE_FORMAT || stored.version != PROFILE_VERSION {
            return Err(ProfileError::Version {
                format: stored.format.clone(),
                version: stored.version,
            });
        }
        let mut store = Self::default();
        for (key, &n) in &stored.counts {
            let mut parts = key.rsplitn(3, '/');
            let (Some(antenna), Some(hour), Some(user)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(ProfileError::BadKey(key.clone()));
            };
            let hour: u8 = hour
                .parse()
                .ok()
                .filter(|&h| (h as usize) < HOURS_PER_DAY)
                .ok_or_else(|| ProfileError::BadKey(key.clone()))?;
            let antenna = registry
                .get(antenna)
                .ok_or_else(|| ProfileError::UnknownAntenna(antenna.to_owned()))?;
            store.add(users.intern(user), hour, antenna, n);
        }
        Ok(store)
    }
}

/// On-disk profile store: `user_id/hour/antenna_id -> count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredProfiles {
    pub format: String,
    pub version: u32,
    pub counts: BTreeMap<String, u32>,
}

/// One pass over `calls`; a call counts once for every grid window it falls in.
pub fn build_profiles(calls: &[Call], grid: &TimeGrid) -> ProfileStore {
    let mut store = ProfileStore::default();
    for call in calls {
        for t in grid.indices_of(call.at) {
            store.add(call.user, grid.hour_of_day(t), call.antenna, 1);
        }
    }
    store
}

/// Share of the user's history at each chain antenna during the chain
/// timestamp's hour of day.
pub fn profile_vector(profile: Option<&UserProfile>, chain: &[(usize, AntennaIdx)], grid: &TimeGrid) -> Vec<f64> {
    chain
        .iter()
        .map(|&(t, antenna)| profile.map_or(0.0, |p| p.fraction(grid.hour_of_day(t), antenna)))
        .collect()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ProfileError> {
    if a.len() != b.len() {
        return Err(ProfileError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(ProfileError::Empty);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserSimilarity {
    pub user: UserIdx,
    pub w_c: Vec<f64>,
    pub w_m: Vec<f64>,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub users: Vec<UserSimilarity>,
    /// Mean cosine over committed users; zero when there are none.
    pub mean: f64,
}

/// Like [`profile_vector`], but with the user's own calls at each chain
/// timestamp removed from the counts first. Used when the profile was built
/// from the same window the crowd was mined from.
pub fn held_out_vector(
    profile: Option<&UserProfile>,
    user: UserIdx,
    chain: &[(usize, AntennaIdx)],
    grid: &TimeGrid,
    index: &CallIndex,
) -> Vec<f64> {
    let Some(profile) = profile else {
        return vec![0.0; chain.len()];
    };
    chain
        .iter()
        .map(|&(t, antenna)| {
            let slot = index.slot(t);
            let lo = slot.partition_point(|o| o.user < user);
            let hi = slot.partition_point(|o| o.user <= user);
            let own = &slot[lo..hi];
            let own_at = own.iter().filter(|o| o.antenna == antenna).count() as u32;
            let hour = grid.hour_of_day(t);
            let total = profile.total(hour).saturating_sub(own.len() as u32);
            if total == 0 {
                0.0
            } else {
                f64::from(profile.count(hour, antenna).saturating_sub(own_at)) / f64::from(total)
            }
        })
        .collect()
}

/// Scores every committed user of `crowd`; the crowd is unusual when the
/// mean similarity is strictly below `epsilon_si`. With `holdout`, each
/// user's calls at the crowd's own timestamps are left out of the profile.
pub fn classify_unusual(
    crowd: &Crowd,
    profiles: &ProfileStore,
    grid: &TimeGrid,
    params: &Params,
    holdout: Option<&CallIndex>,
) -> (bool, SimilarityReport) {
    let path = crowd.path();
    let ratios = crowd.carry_ratios();
    let users: Vec<UserSimilarity> = crowd
        .committed
        .iter()
        .map(|&user| {
            let w_c = crowd.existence_vector_with(user, &ratios);
            let w_m = match holdout {
                Some(index) => held_out_vector(profiles.get(user), user, &path, grid, index),
                None => profile_vector(profiles.get(user), &path, grid),
            };
            let cosine = cosine(&w_c, &w_m).expect("both vectors follow the crowd path");
            UserSimilarity { user, w_c, w_m, cosine }
        })
        .collect();
    let mean = if users.is_empty() {
        0.0
    } else {
        users.iter().map(|u| u.cosine).sum::<f64>() / users.len() as f64
    };
    (is_unusual(mean, params), SimilarityReport { users, mean })
}

pub fn is_unusual(mean_similarity: f64, params: &Params) -> bool {
    mean_similarity < params.similarity
}
