//! Grouping of unusual crowds into unusual events.
//!
//! Two crowds are linked when their spans intersect and they share at least
//! half of their combined committed users. Events are the connected
//! components of that graph; an isolated crowd is an event on its own.

use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, Point};
use crate::ingest::{format_timestamp, AntennaRegistry};
use crate::miner::{Crowd, CrowdDump};
use crate::model::{AntennaIdx, TimeGrid, UserIdx, UserTable};

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

pub fn spans_overlap(a: &Crowd, b: &Crowd) -> bool {
    a.end().min(b.end()) >= a.start().max(b.start())
}

/// `|A ∩ B| >= ceil(|A ∪ B| / 2)` over committed users.
pub fn shares_majority(a: &[UserIdx], b: &[UserIdx]) -> bool {
    let common = intersection_len(a, b);
    let union = a.len() + b.len() - common;
    common >= union.div_ceil(2)
}

pub fn are_connected(a: &Crowd, b: &Crowd) -> bool {
    spans_overlap(a, b) && shares_majority(&a.committed, &b.committed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnusualEvent {
    pub id: usize,
    /// Indices into the crowd list passed to [`build_events`], ascending.
    pub members: Vec<usize>,
    pub start: usize,
    pub end: usize,
    /// Union of member crowds' committed users, sorted.
    pub participants: Vec<UserIdx>,
    /// Antennas visited by member crowds, sorted.
    pub antennas: Vec<AntennaIdx>,
    /// Counterclockwise hull of the visited antennas.
    pub hull: Vec<Point>,
}

impl UnusualEvent {
    pub fn covers(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Connected components of the crowd graph.
pub fn components(crowds: &[Crowd]) -> Vec<Vec<usize>> {
    let n = crowds.len();
    let edges: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n)
                .filter(move |&j| are_connected(&crowds[i], &crowds[j]))
                .map(move |j| (i, j))
        })
        .collect();
    let mut uf = UnionFind::<usize>::new(n);
    for (i, j) in edges {
        uf.union(i, j);
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..n {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    groups.into_values().collect()
}

fn crowd_key(c: &Crowd) -> (usize, Vec<AntennaIdx>, usize, &[UserIdx]) {
    (c.start(), c.antennas(), c.end(), &c.committed)
}

/// Events ordered by start, then participant count (descending).
pub fn build_events(unusual: &[Crowd], registry: &AntennaRegistry) -> Vec<UnusualEvent> {
    let mut events: Vec<UnusualEvent> = components(unusual)
        .into_iter()
        .map(|members| {
            let start = members.iter().map(|&i| unusual[i].start()).min().unwrap_or(0);
            let end = members.iter().map(|&i| unusual[i].end()).max().unwrap_or(0);
            let mut participants: Vec<UserIdx> = members
                .iter()
                .flat_map(|&i| unusual[i].committed.iter().copied())
                .collect();
            participants.sort_unstable();
            participants.dedup();
            let mut antennas: Vec<AntennaIdx> = members.iter().flat_map(|&i| unusual[i].antennas()).collect();
            antennas.sort_unstable();
            antennas.dedup();
            let points: Vec<Point> = antennas.iter().map(|&a| registry.position(a)).collect();
            let hull = geometry::convex_hull(&points).unwrap_or_default();
            UnusualEvent {
                id: 0,
                members,
                start,
                end,
                participants,
                antennas,
                hull,
            }
        })
        .collect();
    events.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then(b.participants.len().cmp(&a.participants.len()))
            .then_with(|| {
                let ka = a.members.iter().map(|&i| crowd_key(&unusual[i])).min();
                let kb = b.members.iter().map(|&i| crowd_key(&unusual[i])).min();
                ka.cmp(&kb)
            })
    });
    for (id, e) in events.iter_mut().enumerate() {
        e.id = id;
    }
    events
}

/// Pop-up attributes of one cluster of an event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAttributes {
    pub t: usize,
    pub timestamp: String,
    pub antenna_id: String,
    pub users: usize,
    pub area_km2: f64,
    /// Users per km²; absent for zero-area polygons.
    pub density: Option<f64>,
    pub pois: Vec<String>,
}

/// Serialized event as written to `events.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDump {
    pub event_id: usize,
    pub start: String,
    pub end: String,
    pub start_t: usize,
    pub end_t: usize,
    pub n_crowds: usize,
    pub participants: Vec<String>,
    pub antenna_ids: Vec<String>,
    pub hull: Vec<[f64; 2]>,
    pub area_km2: f64,
    pub crowds: Vec<CrowdDump>,
    #[serde(default)]
    pub clusters: Vec<ClusterAttributes>,
}

impl UnusualEvent {
    pub fn to_dump(
        &self,
        crowds: &[Crowd],
        users: &UserTable,
        registry: &AntennaRegistry,
        grid: &TimeGrid,
        pois: &dyn Fn(AntennaIdx) -> Vec<String>,
    ) -> EventDump {
        let ref_lat = registry.mean_latitude();
        let mut clusters: Vec<ClusterAttributes> = self
            .members
            .iter()
            .flat_map(|&i| crowds[i].chain.iter())
            .map(|link| {
                // a cluster sits at a single antenna, so its polygon is a point
                let polygon = [registry.position(link.antenna)];
                let area = geometry::area_km2(&polygon, ref_lat);
                ClusterAttributes {
                    t: link.t,
                    timestamp: format_timestamp(grid.grid_time(link.t)),
                    antenna_id: registry.name(link.antenna).to_owned(),
                    users: link.observed.len(),
                    area_km2: area,
                    density: (area > 0.0).then(|| link.observed.len() as f64 / area),
                    pois: pois(link.antenna),
                }
            })
            .collect();
        clusters.sort_by(|a, b| (a.t, &a.antenna_id).cmp(&(b.t, &b.antenna_id)));
        clusters.dedup_by(|a, b| a.t == b.t && a.antenna_id == b.antenna_id);

        EventDump {
            event_id: self.id,
            start: format_timestamp(grid.grid_time(self.start)),
            end: format_timestamp(grid.grid_time(self.end)),
            start_t: self.start,
            end_t: self.end,
            n_crowds: self.members.len(),
            participants: users.names_sorted(&self.participants),
            antenna_ids: self.antennas.iter().map(|&a| registry.name(a).to_owned()).collect(),
            hull: self.hull.iter().map(|&(x, y)| [x, y]).collect(),
            area_km2: geometry::area_km2(&self.hull, ref_lat),
            crowds: self.members.iter().map(|&i| crowds[i].to_dump(users, registry)).collect(),
            clusters,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miner::ChainLink;
    use crate::model::Antenna;

    fn crowd(start: usize, len: usize, antenna: u32, committed: &[u32]) -> Crowd {
        let committed: Vec<UserIdx> = committed.iter().map(|&u| UserIdx(u)).collect();
        Crowd {
            chain: (0..len)
                .map(|k| ChainLink {
                    t: start + k,
                    antenna: AntennaIdx(antenna + k as u32 % 2),
                    observed: committed.clone(),
                })
                .collect(),
            total_users: committed.len(),
            committed,
        }
    }

    fn registry() -> AntennaRegistry {
        AntennaRegistry::new(
            (0..10)
                .map(|i| Antenna {
                    id: format!("a{i}"),
                    lon: i as f64 * 0.01,
                    lat: (i % 3) as f64 * 0.01,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_of_five_shared() {
        let a = crowd(0, 4, 0, &[1, 2, 3, 4]);
        let b = crowd(2, 4, 0, &[1, 2, 3, 5]);
        assert!(are_connected(&a, &b));
    }

    #[test]
    fn two_of_five_not_shared() {
        let a = crowd(0, 4, 0, &[1, 2, 3]);
        let b = crowd(2, 4, 0, &[1, 2, 4, 5]);
        assert!(!are_connected(&a, &b));
    }

    #[test]
    fn identical_crowds_connected() {
        let a = crowd(0, 4, 0, &[1, 2, 3]);
        assert!(are_connected(&a, &a.clone()));
    }

    #[test]
    fn disjoint_spans_not_connected() {
        let a = crowd(0, 4, 0, &[1, 2, 3]);
        let b = crowd(4, 4, 0, &[1, 2, 3]);
        assert!(!are_connected(&a, &b));
        let touching = crowd(3, 4, 0, &[1, 2, 3]);
        assert!(are_connected(&a, &touching));
    }

    #[test]
    fn path_connectivity_merges() {
        let a = crowd(0, 4, 0, &[1, 2, 3, 4]);
        let b = crowd(2, 4, 2, &[2, 3, 4, 5]);
        let c = crowd(4, 4, 4, &[3, 4, 5, 6]);
        assert!(are_connected(&a, &b) && are_connected(&b, &c) && !are_connected(&a, &c));
        let events = build_events(&[a, b, c], &registry());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].members, vec![0, 1, 2]);
        assert_eq!(events[0].participants.len(), 6);
        assert_eq!((events[0].start, events[0].end), (0, 7));
    }

    #[test]
    fn isolated_crowds_are_singleton_events() {
        let crowds: Vec<Crowd> = (0..4).map(|i| crowd(i * 10, 4, i as u32, &[i as u32 * 10])).collect();
        let events = build_events(&crowds, &registry());
        assert_eq!(events.len(), 4);
        assert!(events.iter().all(|e| e.members.len() == 1));
        assert_eq!(events.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn event_hull_and_dump() {
        let a = crowd(0, 4, 0, &[1, 2]);
        let events = build_events(std::slice::from_ref(&a), &registry());
        assert_eq!(events[0].antennas, vec![AntennaIdx(0), AntennaIdx(1)]);
        assert_eq!(events[0].hull.len(), 2);

        let mut users = UserTable::new();
        users.intern("zero");
        users.intern("one");
        users.intern("two");
        let grid = TimeGrid::hourly(0, 24);
        let dump = events[0].to_dump(&[a], &users, &registry(), &grid, &|_| vec!["market".into()]);
        assert_eq!(dump.start, "1970-01-01T00:00:00Z");
        assert_eq!(dump.end, "1970-01-01T03:00:00Z");
        assert_eq!(dump.participants, vec!["one", "two"]);
        assert_eq!(dump.area_km2, 0.0);
        assert_eq!(dump.clusters.len(), 4);
        assert_eq!(dump.clusters[0].density, None);
        assert_eq!(dump.clusters[0].pois, vec!["market"]);
        let json = serde_json::to_value(&dump).unwrap();
        for key in ["event_id", "start", "end", "n_crowds", "participants", "hull", "crowds"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn empty_input() {
        assert!(build_events(&[], &registry()).is_empty());
    }
}
