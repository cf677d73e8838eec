//! Exhaustive reference implementations for small instances.
//!
//! Nothing here shares code with the miner or the event builder: chains are
//! enumerated one by one and every property is recomputed from the chain.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::cluster::{ClusterDb, CylindricalCluster};
use crate::miner::{ChainLink, Crowd};
use crate::model::{AntennaIdx, Params, UserIdx};

pub const MAX_ANTENNAS: usize = 5;
pub const MAX_TIMESTAMPS: usize = 10;
pub const MAX_USERS: usize = 15;
pub const MAX_CROWDS: usize = 100;

const SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("instance too large for the oracle: {what} = {got} > {max}")]
    TooLarge { what: &'static str, got: usize, max: usize },
}

fn check(what: &'static str, got: usize, max: usize) -> Result<(), OracleError> {
    if got > max {
        Err(OracleError::TooLarge { what, got, max })
    } else {
        Ok(())
    }
}

/// Replayed probability of `user` along `chain`: 0 before the first
/// sighting, 1 when seen, otherwise the previous value times the share of
/// the previous cluster found again in the current one.
fn replay(chain: &[&CylindricalCluster], user: UserIdx) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(chain.len());
    let mut p: Option<f64> = None;
    for (k, c) in chain.iter().enumerate() {
        if c.members().contains(&user) {
            p = Some(1.0);
        } else if let Some(v) = p {
            let prev = chain[k - 1].members();
            let kept = prev.iter().filter(|u| c.members().contains(u)).count();
            p = Some(v * kept as f64 / prev.len() as f64);
        }
        out.push(p);
    }
    out
}

/// Users committed after the first `upto + 1` links: seen at least once and
/// never below `epsilon_p` from then on.
fn committed_upto(chain: &[&CylindricalCluster], upto: usize, params: &Params) -> Vec<UserIdx> {
    let everyone: BTreeSet<UserIdx> = chain[..=upto].iter().flat_map(|c| c.members().iter().copied()).collect();
    everyone
        .into_iter()
        .filter(|&u| {
            replay(&chain[..=upto], u)
                .into_iter()
                .flatten()
                .all(|p| p >= params.commitment_probability - SLACK)
        })
        .collect()
}

/// Every prefix respects commitment: the seed cluster is large enough, each
/// step carries at least `epsilon_p` of the previous cluster, and at least
/// `epsilon_ci` users stay committed.
fn admissible(chain: &[&CylindricalCluster], params: &Params) -> bool {
    if chain.iter().any(|c| c.len() < params.scale) {
        return false;
    }
    if chain[0].len() < params.commitment {
        return false;
    }
    (1..chain.len()).all(|k| {
        let (prev, next) = (chain[k - 1].members(), chain[k].members());
        let kept = prev.iter().filter(|u| next.contains(u)).count();
        kept as f64 / prev.len() as f64 >= params.commitment_probability - SLACK
            && committed_upto(chain, k, params).len() >= params.commitment
    })
}

fn is_crowd(chain: &[&CylindricalCluster], params: &Params) -> bool {
    let antennas: BTreeSet<_> = chain.iter().map(|c| c.antenna).collect();
    chain.len() >= params.lifetime && antennas.len() >= params.min_locations
}

fn contains(outer: &[&CylindricalCluster], inner: &[&CylindricalCluster]) -> bool {
    outer.len() > inner.len()
        && outer
            .windows(inner.len())
            .any(|w| w.iter().zip(inner).all(|(a, b)| std::ptr::eq(*a, *b)))
}

/// Closed crowds by enumeration of every admissible chain of consecutive
/// clusters. Sorted like the miner's output.
pub fn oracle_mine(db: &ClusterDb, params: &Params) -> Result<Vec<Crowd>, OracleError> {
    check("timestamps", db.n_steps(), MAX_TIMESTAMPS)?;
    let antennas: BTreeSet<_> = db.iter().map(|c| c.antenna).collect();
    check("antennas", antennas.len(), MAX_ANTENNAS)?;
    let users: BTreeSet<_> = db.iter().flat_map(|c| c.members().iter().copied()).collect();
    check("users", users.len(), MAX_USERS)?;

    let mut chains: Vec<Vec<&CylindricalCluster>> = Vec::new();
    let mut stack: Vec<Vec<&CylindricalCluster>> = db.iter().map(|c| vec![c]).collect();
    while let Some(chain) = stack.pop() {
        if !admissible(&chain, params) {
            continue;
        }
        let t = chain[chain.len() - 1].t;
        for next in db.at(t + 1) {
            let mut longer = chain.clone();
            longer.push(next);
            stack.push(longer);
        }
        chains.push(chain);
    }

    let crowds: Vec<&Vec<&CylindricalCluster>> = chains.iter().filter(|c| is_crowd(c, params)).collect();
    let mut out: Vec<Crowd> = crowds
        .iter()
        .filter(|c| !crowds.iter().any(|o| contains(o, c)))
        .map(|chain| {
            let total: BTreeSet<UserIdx> = chain.iter().flat_map(|c| c.members().iter().copied()).collect();
            Crowd {
                chain: chain
                    .iter()
                    .map(|c| ChainLink {
                        t: c.t,
                        antenna: c.antenna,
                        observed: c.members().to_vec(),
                    })
                    .collect(),
                committed: committed_upto(chain, chain.len() - 1, params),
                total_users: total.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.start().cmp(&b.start()).then_with(|| a.antennas().cmp(&b.antennas())));
    Ok(out)
}

/// Random instance within the oracle's size bounds. Users travel in a few
/// loose groups so that consecutive clusters overlap often.
pub fn random_cluster_db(rng: &mut impl Rng) -> ClusterDb {
    let n_steps = rng.gen_range(1..=MAX_TIMESTAMPS);
    let n_antennas = rng.gen_range(1..=MAX_ANTENNAS) as u32;
    let n_users = rng.gen_range(1..=MAX_USERS) as u32;
    let n_groups = rng.gen_range(1..=3u32);
    let group_of: Vec<u32> = (0..n_users).map(|_| rng.gen_range(0..n_groups)).collect();
    let stray = rng.gen_range(0.0..0.5);
    let silent = rng.gen_range(0.0..0.4);
    let slots = (0..n_steps)
        .map(|t| {
            let spots: Vec<u32> = (0..n_groups).map(|_| rng.gen_range(0..n_antennas)).collect();
            let mut at: BTreeMap<AntennaIdx, Vec<UserIdx>> = BTreeMap::new();
            for u in 0..n_users {
                if rng.gen_bool(silent) {
                    continue;
                }
                let a = if rng.gen_bool(stray) {
                    rng.gen_range(0..n_antennas)
                } else {
                    spots[group_of[u as usize] as usize]
                };
                at.entry(AntennaIdx(a)).or_default().push(UserIdx(u));
            }
            at.into_iter()
                .map(|(a, users)| CylindricalCluster::from_users(t, a, users))
                .collect()
        })
        .collect();
    ClusterDb::from_slots(slots)
}

/// Parameters suited to [`random_cluster_db`] instances. `epsilon_p = 0`
/// never prunes, so the oracle's chain count grows exponentially with the
/// number of timestamps; it is not drawn.
pub fn random_params(rng: &mut impl Rng) -> Params {
    const PROBS: [f64; 8] = [0.1, 0.2, 0.25, 1.0 / 3.0, 0.4, 0.5, 0.6, 0.8];
    Params {
        scale: rng.gen_range(1..=3),
        lifetime: rng.gen_range(2..=5),
        commitment: rng.gen_range(1..=4),
        commitment_probability: PROBS[rng.gen_range(0..PROBS.len())],
        min_locations: rng.gen_range(2..=3),
        ..Params::default()
    }
}

/// Connected components by breadth-first search over an explicit adjacency
/// matrix. Components are sorted internally and by smallest member.
pub fn oracle_components(n: usize, connected: impl Fn(usize, usize) -> bool) -> Result<Vec<Vec<usize>>, OracleError> {
    check("crowds", n, MAX_CROWDS)?;
    let adjacency: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| i != j && connected(i, j)).collect())
        .collect();
    let mut seen = vec![false; n];
    let mut parts = Vec::new();
    for root in 0..n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut part = vec![root];
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if adjacency[i][j] && !seen[j] {
                    seen[j] = true;
                    part.push(j);
                    queue.push_back(j);
                }
            }
        }
        part.sort_unstable();
        parts.push(part);
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AntennaIdx;

    fn cl(t: usize, a: u32, users: &[u32]) -> CylindricalCluster {
        CylindricalCluster::from_users(t, AntennaIdx(a), users.iter().map(|&u| UserIdx(u)))
    }

    fn db(clusters: Vec<CylindricalCluster>) -> ClusterDb {
        let n = clusters.iter().map(|c| c.t + 1).max().unwrap_or(0);
        let mut slots = vec![Vec::new(); n];
        for c in clusters {
            slots[c.t].push(c);
        }
        ClusterDb::from_slots(slots)
    }

    fn params() -> Params {
        Params {
            scale: 1,
            lifetime: 4,
            commitment: 1,
            commitment_probability: 0.2,
            ..Params::default()
        }
    }

    #[test]
    fn single_cluster_gives_nothing() {
        assert!(oracle_mine(&db(vec![cl(0, 0, &[1, 2])]), &params()).unwrap().is_empty());
    }

    #[test]
    fn no_shared_users_gives_nothing() {
        let d = db((0..6).map(|t| cl(t, t as u32 % 3, &[t as u32 * 2, t as u32 * 2 + 1])).collect());
        assert!(oracle_mine(&d, &params()).unwrap().is_empty());
    }

    #[test]
    fn moving_group_found_once() {
        let d = db((0..5).map(|t| cl(t, t as u32 % 2, &[1, 2, 3])).collect());
        let out = oracle_mine(&d, &params()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].lifetime(), 5);
        assert_eq!(out[0].committed, vec![UserIdx(1), UserIdx(2), UserIdx(3)]);
    }

    #[test]
    fn size_bounds_enforced() {
        let d = db((0..11).map(|t| cl(t, 0, &[1])).collect());
        assert_eq!(
            oracle_mine(&d, &params()),
            Err(OracleError::TooLarge {
                what: "timestamps",
                got: 11,
                max: 10
            })
        );
        let d = db((0..6).map(|a| cl(0, a, &[a])).collect());
        assert!(oracle_mine(&d, &params()).is_err());
        let d = db(vec![cl(0, 0, &(0..16).collect::<Vec<_>>())]);
        assert!(oracle_mine(&d, &params()).is_err());
    }

    #[test]
    fn replay_matches_worked_example() {
        let (a, b) = (cl(0, 0, &[1, 2, 3]), cl(1, 1, &[2, 4]));
        let (c, d) = (cl(2, 2, &[1, 2, 3]), cl(3, 2, &[1, 2]));
        let chain = [&a, &b, &c, &d];
        let v = replay(&chain, UserIdx(4));
        assert_eq!(v[0], None);
        for (got, want) in v[1..].iter().zip([1.0, 0.5, 1.0 / 3.0]) {
            assert!((got.unwrap() - want).abs() <= 1e-12);
        }
        let u3 = replay(&chain, UserIdx(3));
        assert!((u3[1].unwrap() - 1.0 / 3.0).abs() <= 1e-12);
        let committed = committed_upto(&chain, 3, &params());
        assert_eq!(committed, [1, 2, 3, 4].map(UserIdx));
        let committed = committed_upto(&chain, 3, &Params { commitment_probability: 0.4, ..params() });
        assert_eq!(committed, vec![UserIdx(2)]);
    }

    #[test]
    fn components_basic() {
        assert!(oracle_components(0, |_, _| true).unwrap().is_empty());
        assert_eq!(oracle_components(5, |_, _| true).unwrap(), vec![vec![0, 1, 2, 3, 4]]);
        let parts = oracle_components(5, |i, j| i.abs_diff(j) == 2).unwrap();
        assert_eq!(parts, vec![vec![0, 2, 4], vec![1, 3]]);
        assert!(oracle_components(101, |_, _| false).is_err());
    }
}
