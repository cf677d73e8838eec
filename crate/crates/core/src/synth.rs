//! Synthetic CDR city with planted unusual events.
//!
//! Every user has a home and a work antenna and calls with an hour-of-day
//! activity curve peaking at commute times. A few "venue" antennas are never
//! anyone's home or work; planted events move a group of users across venue
//! antennas for several consecutive hours.

use std::collections::{BTreeSet, HashMap};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{format_timestamp, write_calls, AntennaRegistry, IngestError};
use crate::model::{Antenna, AntennaIdx, Call, UserIdx, UserTable, HOUR};

/// 2012-01-02T00:00:00Z, a Monday.
pub const DEFAULT_ORIGIN: i64 = 1_325_462_400;

/// Relative call activity per hour of day.
const DIURNAL: [f64; 24] = [
    0.02, 0.01, 0.01, 0.01, 0.02, 0.05, 0.25, 0.7, 1.0, 0.85, 0.8, 0.8, 0.85, 0.8, 0.75, 0.75, 0.8, 0.95, 1.0, 0.85,
    0.8, 0.7, 0.5, 0.2,
];

/// Calls land within this many seconds of the hour mark.
const JITTER: i64 = 900;

const WORK_HOURS: std::ops::RangeInclusive<u32> = 9..=18;
const EVENT_START_HOUR: usize = 17;
/// Zipf exponent of home/work antenna popularity.
const POPULARITY_EXPONENT: f64 = 1.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown antenna {0:?} in planted event")]
    UnknownAntenna(String),
    #[error("unknown user {0:?} in planted event")]
    UnknownUser(String),
    #[error("planted event grid index {0} outside the generated period")]
    ChainOutOfRange(usize),
    #[error("planted event chain must be strictly increasing in time")]
    UnorderedChain,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub participants: Vec<String>,
    /// `(hourly grid index from the origin, antenna id)`.
    pub chain: Vec<(usize, String)>,
    pub call_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_antennas: usize,
    pub n_days: usize,
    pub origin: i64,
    /// Probability of a call in the busiest hour of the day.
    pub call_probability: f64,
    pub excursion_probability: f64,
    pub venue_fraction: f64,
    /// Events planted at random venues in addition to `planted`.
    pub n_events: usize,
    pub event_participants: usize,
    pub event_hours: usize,
    pub event_call_probability: f64,
    /// Upper bound on each participant's profile share at a planted chain
    /// antenna during the chain hour.
    pub leak_bound: f64,
    /// Keep only the earliest calls.
    pub max_calls: Option<usize>,
    pub planted: Vec<PlantedEvent>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_users: 5000,
            n_antennas: 50,
            n_days: 14,
            origin: DEFAULT_ORIGIN,
            call_probability: 0.9,
            excursion_probability: 0.05,
            venue_fraction: 0.1,
            n_events: 3,
            event_participants: 150,
            event_hours: 5,
            event_call_probability: 0.8,
            leak_bound: 0.2,
            max_calls: None,
            planted: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub event_id: String,
    pub start: String,
    pub end: String,
    pub antenna_ids: Vec<String>,
    pub participants: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub events: Vec<TruthEvent>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub registry: AntennaRegistry,
    pub users: UserTable,
    /// Sorted by time, then user.
    pub calls: Vec<Call>,
    pub truth: GroundTruth,
    /// Event calls removed to respect the leak bound.
    pub leak_removals: usize,
}

impl SynthDataset {
    pub fn calls_csv(&self) -> Result<Vec<u8>, SynthError> {
        let mut out = Vec::with_capacity(self.calls.len() * 40);
        write_calls(&self.calls, &self.users, &self.registry, &mut out)?;
        Ok(out)
    }

    pub fn antennas_csv(&self) -> Result<Vec<u8>, SynthError> {
        let mut out = Vec::new();
        self.registry.write_csv(&mut out)?;
        Ok(out)
    }

    pub fn ground_truth_json(&self) -> Result<Vec<u8>, SynthError> {
        let mut out = serde_json::to_vec_pretty(&self.truth)?;
        out.push(b'\n');
        Ok(out)
    }
}

struct Event {
    participants: Vec<UserIdx>,
    chain: Vec<(usize, AntennaIdx)>,
    call_probability: f64,
}

struct Draft {
    call: Call,
    hour: u32,
    event: bool,
}

fn pad(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

fn check_config(c: &SynthConfig) -> Result<(), SynthError> {
    let prob = |name: &str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(SynthError::Config(format!("{name} outside [0, 1]")))
        }
    };
    prob("call_probability", c.call_probability)?;
    prob("excursion_probability", c.excursion_probability)?;
    prob("venue_fraction", c.venue_fraction)?;
    prob("event_call_probability", c.event_call_probability)?;
    prob("leak_bound", c.leak_bound)?;
    for e in &c.planted {
        prob("planted call_probability", e.call_probability)?;
    }
    if c.n_users == 0 || c.n_days == 0 {
        return Err(SynthError::Config("need at least one user and one day".into()));
    }
    if c.n_antennas < 4 {
        return Err(SynthError::Config("need at least 4 antennas".into()));
    }
    if c.n_events > 0 && !(1..=24).contains(&c.event_hours) {
        return Err(SynthError::Config("event_hours must be between 1 and 24".into()));
    }
    Ok(())
}

fn build_antennas(c: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<AntennaRegistry, SynthError> {
    let side = (c.n_antennas as f64).sqrt().ceil() as usize;
    let width = pad(c.n_antennas);
    let antennas = (0..c.n_antennas)
        .map(|i| {
            let (row, col) = (i / side, i % side);
            let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.003..0.003);
            let round = |v: f64| (v * 1e6).round() / 1e6;
            Antenna {
                id: format!("A{i:0width$}"),
                lon: round(-4.10 + col as f64 * 0.01 + jitter(rng)),
                lat: round(5.25 + row as f64 * 0.01 + jitter(rng)),
            }
        })
        .collect();
    Ok(AntennaRegistry::new(antennas)?)
}

fn resolve_planted(
    c: &SynthConfig,
    registry: &AntennaRegistry,
    users: &UserTable,
    n_steps: usize,
) -> Result<Vec<Event>, SynthError> {
    c.planted
        .iter()
        .map(|e| {
            let participants = e
                .participants
                .iter()
                .map(|u| users.get(u).ok_or_else(|| SynthError::UnknownUser(u.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let chain = e
                .chain
                .iter()
                .map(|(t, a)| {
                    let idx = registry.get(a).ok_or_else(|| SynthError::UnknownAntenna(a.clone()))?;
                    if *t >= n_steps {
                        return Err(SynthError::ChainOutOfRange(*t));
                    }
                    Ok((*t, idx))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if chain.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(SynthError::UnorderedChain);
            }
            Ok(Event {
                participants,
                chain,
                call_probability: e.call_probability,
            })
        })
        .collect()
}

/// Generates the dataset described by `config`. Same config, same output.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    check_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let registry = build_antennas(config, &mut rng)?;
    let n_steps = config.n_days * 24;

    let width = pad(config.n_users).max(5);
    let mut users = UserTable::new();
    for i in 0..config.n_users {
        users.intern(&format!("U{i:0width$}"));
    }

    let mut events = resolve_planted(config, &registry, &users, n_steps)?;

    // venues: antennas of explicit events plus a random share of the rest
    let mut venues: BTreeSet<AntennaIdx> = events.iter().flat_map(|e| e.chain.iter().map(|&(_, a)| a)).collect();
    let wanted = ((config.n_antennas as f64 * config.venue_fraction).round() as usize).max(2);
    let mut order: Vec<u32> = (0..config.n_antennas as u32).collect();
    order.shuffle(&mut rng);
    for &a in &order {
        if venues.len() >= wanted {
            break;
        }
        venues.insert(AntennaIdx(a));
    }
    let routine: Vec<AntennaIdx> = order.iter().map(|&a| AntennaIdx(a)).filter(|a| !venues.contains(a)).collect();
    if routine.len() < 2 {
        return Err(SynthError::Config("too few non-venue antennas".into()));
    }
    // uneven popularity so that small antennas only cluster at busy hours
    let weights: Vec<f64> = (0..routine.len()).map(|r| 1.0 / (r as f64 + 1.0).powf(POPULARITY_EXPONENT)).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");

    let anchors: Vec<(AntennaIdx, AntennaIdx)> = (0..config.n_users)
        .map(|_| {
            let home = routine[pick.sample(&mut rng)];
            let mut work = routine[pick.sample(&mut rng)];
            while work == home {
                work = routine[pick.sample(&mut rng)];
            }
            (home, work)
        })
        .collect();

    // random events on distinct days with disjoint participants
    if config.n_events > 0 {
        let taken: BTreeSet<UserIdx> = events.iter().flat_map(|e| e.participants.iter().copied()).collect();
        let mut pool: Vec<UserIdx> = (0..config.n_users as u32).map(UserIdx).filter(|u| !taken.contains(u)).collect();
        if pool.len() < config.n_events * config.event_participants {
            return Err(SynthError::Config("not enough users for planted events".into()));
        }
        pool.shuffle(&mut rng);
        let venue_list: Vec<AntennaIdx> = venues.iter().copied().collect();
        for k in 0..config.n_events {
            let day = (k + 1) * config.n_days / (config.n_events + 1);
            let start = day * 24 + EVENT_START_HOUR;
            let first = venue_list[rng.gen_range(0..venue_list.len())];
            let mut second = venue_list[rng.gen_range(0..venue_list.len())];
            while second == first {
                second = venue_list[rng.gen_range(0..venue_list.len())];
            }
            let split = config.event_hours.div_ceil(2);
            let chain: Vec<(usize, AntennaIdx)> = (0..config.event_hours)
                .map(|h| (start + h, if h < split { first } else { second }))
                .filter(|&(t, _)| t < n_steps)
                .collect();
            let mut participants = pool[k * config.event_participants..(k + 1) * config.event_participants].to_vec();
            participants.sort_unstable();
            events.push(Event {
                participants,
                chain,
                call_probability: config.event_call_probability,
            });
        }
    }

    let mut attending: HashMap<(UserIdx, usize), (AntennaIdx, f64)> = HashMap::new();
    for e in &events {
        for &u in &e.participants {
            for &(t, a) in &e.chain {
                attending.insert((u, t), (a, e.call_probability));
            }
        }
    }

    let mut drafts: Vec<Draft> = Vec::new();
    let end = config.origin + n_steps as i64 * HOUR;
    for (u, &(home, work)) in anchors.iter().enumerate() {
        let user = UserIdx(u as u32);
        for t in 0..n_steps {
            let hour = (t % 24) as u32;
            let base = config.origin + t as i64 * HOUR;
            let (antenna, event) = if let Some(&(a, p)) = attending.get(&(user, t)) {
                if !rng.gen_bool(p) {
                    continue;
                }
                (a, true)
            } else {
                if !rng.gen_bool(config.call_probability * DIURNAL[hour as usize]) {
                    continue;
                }
                let a = if rng.gen_bool(config.excursion_probability) {
                    routine[rng.gen_range(0..routine.len())]
                } else if WORK_HOURS.contains(&hour) {
                    work
                } else {
                    home
                };
                (a, false)
            };
            drafts.push(Draft {
                call: Call {
                    user,
                    at: (base + rng.gen_range(-JITTER..=JITTER)).clamp(config.origin, end - 1),
                    antenna,
                },
                hour,
                event,
            });
        }
    }

    let leak_removals = enforce_leak_bound(&mut drafts, &events, config.leak_bound);

    let mut calls: Vec<Call> = drafts.into_iter().map(|d| d.call).collect();
    calls.sort_by_key(|c| (c.at, c.user, c.antenna));
    if let Some(max) = config.max_calls {
        calls.truncate(max);
    }

    let truth = GroundTruth {
        events: events
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.chain.is_empty())
            .map(|(k, e)| {
                let mut antenna_ids: Vec<String> = Vec::new();
                for &(_, a) in &e.chain {
                    let name = registry.name(a).to_owned();
                    if !antenna_ids.contains(&name) {
                        antenna_ids.push(name);
                    }
                }
                let at = |t: usize| format_timestamp(config.origin + t as i64 * HOUR);
                TruthEvent {
                    event_id: format!("E{k}"),
                    start: at(e.chain[0].0),
                    end: at(e.chain[e.chain.len() - 1].0),
                    antenna_ids,
                    participants: users.names_sorted(&e.participants),
                }
            })
            .collect(),
    };

    Ok(SynthDataset {
        registry,
        users,
        calls,
        truth,
        leak_removals,
    })
}

/// Drops calls in any `(participant, chain hour, chain antenna)` bucket whose
/// share of the participant's calls at that hour exceeds `bound`, event calls
/// first. Returns the number of calls removed.
fn enforce_leak_bound(drafts: &mut Vec<Draft>, events: &[Event], bound: f64) -> usize {
    let mut per_hour: HashMap<(UserIdx, u32), u32> = HashMap::new();
    let mut per_bucket: HashMap<(UserIdx, u32, AntennaIdx), (u32, u32)> = HashMap::new();
    for d in drafts.iter() {
        *per_hour.entry((d.call.user, d.hour)).or_default() += 1;
        let entry = per_bucket.entry((d.call.user, d.hour, d.call.antenna)).or_default();
        if d.event {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }

    // how many calls of each kind to drop per bucket
    let mut drop: HashMap<(UserIdx, u32, AntennaIdx), (u32, u32)> = HashMap::new();
    for e in events {
        for &u in &e.participants {
            for &(t, a) in &e.chain {
                let hour = (t % 24) as u32;
                let key = (u, hour, a);
                if drop.contains_key(&key) {
                    continue;
                }
                let (mut ev, mut rt) = per_bucket.get(&key).copied().unwrap_or_default();
                let mut total = per_hour.get(&(u, hour)).copied().unwrap_or_default();
                let (mut drop_ev, mut drop_rt) = (0, 0);
                while ev + rt > 0 && f64::from(ev + rt) > bound * f64::from(total) + 1e-9 {
                    if ev > 0 {
                        ev -= 1;
                        drop_ev += 1;
                    } else {
                        rt -= 1;
                        drop_rt += 1;
                    }
                    total -= 1;
                }
                drop.insert(key, (drop_ev, drop_rt));
            }
        }
    }

    let before = drafts.len();
    drafts.retain(|d| {
        let Some(quota) = drop.get_mut(&(d.call.user, d.hour, d.call.antenna)) else {
            return true;
        };
        let slot = if d.event { &mut quota.0 } else { &mut quota.1 };
        if *slot > 0 {
            *slot -= 1;
            false
        } else {
            true
        }
    });
    before - drafts.len()
}
