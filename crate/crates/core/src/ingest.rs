//! CSV readers for antenna and call files, and the per-timestamp call index.
//!
//! Antenna files carry `antenna_id,longitude,latitude`. Call files carry
//! either `user_id,timestamp,antenna_id` (ISO-8601 UTC, `Z` suffix) or the
//! split form `user_id,date,time,antenna_id`. Call rows are streamed; bad
//! rows are counted in an [`IngestReport`] and skipped.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Antenna, AntennaIdx, Call, TimeGrid, UserIdx, UserTable, HOUR};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("line {line}: {field} {value} out of range")]
    OutOfRange {
        line: u64,
        field: &'static str,
        value: f64,
    },
    #[error("duplicate antenna id {0}")]
    DuplicateAntenna(String),
    #[error("no antennas")]
    NoAntennas,
    #[error("unrecognized header: {0}")]
    Header(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Antennas keyed by id. Indices follow lexicographic id order.
#[derive(Debug, Clone)]
pub struct AntennaRegistry {
    antennas: Vec<Antenna>,
    lookup: HashMap<String, AntennaIdx>,
}

impl AntennaRegistry {
    pub fn new(mut antennas: Vec<Antenna>) -> Result<Self, IngestError> {
        if antennas.is_empty() {
            return Err(IngestError::NoAntennas);
        }
        for a in &antennas {
            check_position(a, 0)?;
        }
        antennas.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = antennas.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(IngestError::DuplicateAntenna(w[0].id.clone()));
        }
        let lookup = antennas
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), AntennaIdx(i as u32)))
            .collect();
        Ok(Self { antennas, lookup })
    }

    pub fn get(&self, id: &str) -> Option<AntennaIdx> {
        self.lookup.get(id).copied()
    }

    pub fn antenna(&self, idx: AntennaIdx) -> &Antenna {
        &self.antennas[idx.index()]
    }

    pub fn name(&self, idx: AntennaIdx) -> &str {
        &self.antennas[idx.index()].id
    }

    pub fn position(&self, idx: AntennaIdx) -> (f64, f64) {
        let a = self.antenna(idx);
        (a.lon, a.lat)
    }

    pub fn len(&self) -> usize {
        self.antennas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.antennas.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AntennaIdx, &Antenna)> {
        self.antennas
            .iter()
            .enumerate()
            .map(|(i, a)| (AntennaIdx(i as u32), a))
    }

    pub fn mean_latitude(&self) -> f64 {
        self.antennas.iter().map(|a| a.lat).sum::<f64>() / self.antennas.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["antenna_id", "longitude", "latitude"])?;
        for a in &self.antennas {
            w.write_record([a.id.as_str(), &a.lon.to_string(), &a.lat.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_position(a: &Antenna, line: u64) -> Result<(), IngestError> {
    if !(-180.0..=180.0).contains(&a.lon) {
        return Err(IngestError::OutOfRange {
            line,
            field: "longitude",
            value: a.lon,
        });
    }
    if !(-90.0..=90.0).contains(&a.lat) {
        return Err(IngestError::OutOfRange {
            line,
            field: "latitude",
            value: a.lat,
        });
    }
    Ok(())
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::Header(headers.iter().collect::<Vec<_>>().join(",")))
}

pub fn load_antennas<R: Read>(source: R) -> Result<AntennaRegistry, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let headers = rdr.headers()?.clone();
    let (id_col, lon_col, lat_col) = (
        column(&headers, "antenna_id")?,
        column(&headers, "longitude")?,
        column(&headers, "latitude")?,
    );

    let mut antennas = Vec::new();
    let mut seen = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| {
            row.get(i).map(str::trim).ok_or_else(|| IngestError::Malformed {
                line,
                msg: format!("expected at least {} fields", i + 1),
            })
        };
        let number = |i: usize, name: &str| -> Result<f64, IngestError> {
            let raw = field(i)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IngestError::Malformed {
                    line,
                    msg: format!("invalid {name} {raw:?}"),
                })
        };
        let id = field(id_col)?;
        if id.is_empty() {
            return Err(IngestError::Malformed {
                line,
                msg: "empty antenna_id".into(),
            });
        }
        let antenna = Antenna {
            id: id.to_owned(),
            lon: number(lon_col, "longitude")?,
            lat: number(lat_col, "latitude")?,
        };
        check_position(&antenna, line)?;
        if seen.insert(antenna.id.clone(), line).is_some() {
            return Err(IngestError::DuplicateAntenna(antenna.id));
        }
        antennas.push(antenna);
    }
    AntennaRegistry::new(antennas)
}

/// One observation of a user inside a grid window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Observation {
    pub user: UserIdx,
    pub antenna: AntennaIdx,
    pub at: i64,
}

/// For every grid index, the calls falling inside its window.
///
/// Slots are kept sorted by `(user, antenna, at)` so two indexes built from
/// the same calls compare equal regardless of input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallIndex {
    slots: Vec<Vec<Observation>>,
}

impl CallIndex {
    pub fn empty(n_steps: usize) -> Self {
        Self {
            slots: vec![Vec::new(); n_steps],
        }
    }

    /// Indexes every call under each grid index whose window contains it.
    /// Returns the index and the number of calls that mapped nowhere.
    pub fn build(calls: &[Call], grid: &TimeGrid) -> (Self, usize) {
        let mut index = Self::empty(grid.n_steps);
        let mut missed = 0;
        for call in calls {
            if index.insert(call, grid) == 0 {
                missed += 1;
            }
        }
        index.finish();
        (index, missed)
    }

    fn insert(&mut self, call: &Call, grid: &TimeGrid) -> usize {
        let range = grid.indices_of(call.at);
        let n = range.len();
        for t in range {
            self.slots[t].push(Observation {
                user: call.user,
                antenna: call.antenna,
                at: call.at,
            });
        }
        n
    }

    fn finish(&mut self) {
        for slot in &mut self.slots {
            slot.sort_unstable();
        }
    }

    pub fn n_steps(&self) -> usize {
        self.slots.len()
    }

    /// Observations at `t`, sorted by user.
    pub fn slot(&self, t: usize) -> &[Observation] {
        self.slots.get(t).map_or(&[], Vec::as_slice)
    }

    pub fn by_antenna(&self, t: usize) -> BTreeMap<AntennaIdx, Vec<(UserIdx, i64)>> {
        let mut out: BTreeMap<AntennaIdx, Vec<(UserIdx, i64)>> = BTreeMap::new();
        for o in self.slot(t) {
            out.entry(o.antenna).or_default().push((o.user, o.at));
        }
        out
    }

    pub fn total(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    /// Distinct users observed at `t`.
    pub fn active_users(&self, t: usize) -> usize {
        let slot = self.slot(t);
        let mut n = 0;
        let mut last = None;
        for o in slot {
            if last != Some(o.user) {
                n += 1;
                last = Some(o.user);
            }
        }
        n
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub admitted: u64,
    pub unknown_antenna: u64,
    pub out_of_range: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone)]
pub struct LoadedCalls {
    pub calls: Vec<Call>,
    pub index: CallIndex,
    pub report: IngestReport,
}

enum Layout {
    Iso { user: usize, ts: usize, antenna: usize },
    Split { user: usize, date: usize, time: usize, antenna: usize },
}

impl Layout {
    fn detect(headers: &csv::ByteRecord) -> Result<Self, IngestError> {
        let names: Vec<String> = headers
            .iter()
            .map(|h| String::from_utf8_lossy(h).trim().to_owned())
            .collect();
        let find = |n: &str| names.iter().position(|h| h == n);
        match (find("user_id"), find("timestamp"), find("date"), find("time"), find("antenna_id")) {
            (Some(user), Some(ts), _, _, Some(antenna)) => Ok(Layout::Iso { user, ts, antenna }),
            (Some(user), None, Some(date), Some(time), Some(antenna)) => Ok(Layout::Split {
                user,
                date,
                time,
                antenna,
            }),
            _ => Err(IngestError::Header(names.join(","))),
        }
    }

    fn fields<'r>(&self, row: &'r csv::ByteRecord) -> Option<(&'r str, i64, &'r str)> {
        let text = |i: usize| row.get(i).and_then(|b| std::str::from_utf8(b).ok()).map(str::trim);
        match *self {
            Layout::Iso { user, ts, antenna } => {
                let at = parse_timestamp(text(ts)?)?;
                Some((text(user)?, at, text(antenna)?))
            }
            Layout::Split {
                user,
                date,
                time,
                antenna,
            } => {
                let at = parse_split(text(date)?, text(time)?)?;
                Some((text(user)?, at, text(antenna)?))
            }
        }
    }
}

/// Parses `YYYY-MM-DDTHH:MM:SSZ` into UTC seconds.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(raw).ok().map(|d| d.timestamp())
}

fn parse_split(date: &str, time: &str) -> Option<i64> {
    let d = NaiveDate::parse_from_str(date, "%Y-%m-%d").ok()?;
    let t = NaiveTime::parse_from_str(time, "%H:%M:%S").ok()?;
    Some(d.and_time(t).and_utc().timestamp())
}

pub fn format_timestamp(at: i64) -> String {
    DateTime::from_timestamp(at, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| at.to_string())
}

/// Reads call rows with known antennas. Does not apply any time range, so
/// `report.admitted` counts parsed rows and `out_of_range` stays zero.
pub fn parse_calls<R: Read>(
    source: R,
    registry: &AntennaRegistry,
    users: &mut UserTable,
) -> Result<(Vec<Call>, IngestReport), IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .buffer_capacity(1 << 20)
        .from_reader(source);
    let layout = Layout::detect(rdr.byte_headers()?)?;
    let mut report = IngestReport::default();
    let mut calls = Vec::new();
    let mut row = csv::ByteRecord::new();

    while rdr.read_byte_record(&mut row)? {
        let Some((user, at, antenna)) = layout.fields(&row) else {
            report.malformed += 1;
            continue;
        };
        if user.is_empty() {
            report.malformed += 1;
            continue;
        }
        let Some(antenna) = registry.get(antenna) else {
            report.unknown_antenna += 1;
            continue;
        };
        calls.push(Call {
            user: users.intern(user),
            at,
            antenna,
        });
        report.admitted += 1;
    }
    Ok((calls, report))
}

/// Streams a call file into calls and a [`CallIndex`] over `grid`.
pub fn load_calls<R: Read>(
    source: R,
    registry: &AntennaRegistry,
    grid: &TimeGrid,
    users: &mut UserTable,
) -> Result<LoadedCalls, IngestError> {
    let (calls, report) = parse_calls(source, registry, users)?;
    Ok(index_calls(calls, report, grid))
}

/// Drops calls outside `grid` (counting them as out of range) and indexes the rest.
pub fn index_calls(mut calls: Vec<Call>, mut report: IngestReport, grid: &TimeGrid) -> LoadedCalls {
    let before = calls.len();
    calls.retain(|c| !grid.indices_of(c.at).is_empty());
    let dropped = (before - calls.len()) as u64;
    report.out_of_range += dropped;
    report.admitted -= dropped;
    let (index, _) = CallIndex::build(&calls, grid);
    LoadedCalls {
        calls,
        index,
        report,
    }
}

/// Earliest and latest timestamps among `calls`.
pub fn time_span(calls: &[Call]) -> Option<(i64, i64)> {
    let first = calls.iter().map(|c| c.at).min()?;
    let last = calls.iter().map(|c| c.at).max()?;
    Some((first, last))
}

/// Writes calls in the canonical format.
pub fn write_calls<W: Write>(
    calls: &[Call],
    users: &UserTable,
    registry: &AntennaRegistry,
    out: W,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "timestamp", "antenna_id"])?;
    for c in calls {
        w.write_record([users.name(c.user), &format_timestamp(c.at), registry.name(c.antenna)])?;
    }
    w.flush()?;
    Ok(())
}

/// Distribution of gaps between consecutive calls of the same user, rounded
/// to the nearest whole hour. Fractions sum to one when any pair exists.
pub fn inter_call_gap_histogram(calls: &[Call]) -> BTreeMap<i64, f64> {
    let mut per_user: HashMap<UserIdx, Vec<i64>> = HashMap::new();
    for c in calls {
        per_user.entry(c.user).or_default().push(c.at);
    }
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    let mut total = 0u64;
    for times in per_user.values_mut() {
        times.sort_unstable();
        for w in times.windows(2) {
            let gap = (w[1] - w[0] + HOUR / 2).div_euclid(HOUR);
            *counts.entry(gap).or_default() += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|(gap, n)| (gap, n as f64 / total as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ANTENNAS: &str = "antenna_id,longitude,latitude\nB,10.5,45.1\nA,10.0,45.0\n";

    fn registry() -> AntennaRegistry {
        load_antennas(ANTENNAS.as_bytes()).unwrap()
    }

    #[test]
    fn two_antennas_sorted_by_id() {
        let r = registry();
        assert_eq!(r.len(), 2);
        assert_eq!(r.get("A"), Some(AntennaIdx(0)));
        assert_eq!(r.name(AntennaIdx(1)), "B");
    }

    #[test]
    fn latitude_out_of_range() {
        let err = load_antennas("antenna_id,longitude,latitude\nA,10,95\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::OutOfRange { field: "latitude", line: 2, .. }), "{err}");
    }

    #[test]
    fn header_only_has_no_antennas() {
        let err = load_antennas("antenna_id,longitude,latitude\n".as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "no antennas");
    }

    #[test]
    fn duplicate_antenna_named() {
        let err = load_antennas("antenna_id,longitude,latitude\nA,1,1\nA,2,2\n".as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "duplicate antenna id A");
    }

    #[test]
    fn malformed_antenna_row_reports_line() {
        let err = load_antennas("antenna_id,longitude,latitude\nA,1,1\nB,east,1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn three_valid_calls() {
        let r = registry();
        let grid = TimeGrid::hourly(parse_timestamp("2012-01-01T00:00:00Z").unwrap(), 24);
        let csv = "user_id,timestamp,antenna_id\n\
                   u1,2012-01-01T01:00:00Z,A\n\
                   u2,2012-01-01T01:10:00Z,A\n\
                   u1,2012-01-01T02:05:00Z,B\n";
        let mut users = UserTable::new();
        let loaded = load_calls(csv.as_bytes(), &r, &grid, &mut users).unwrap();
        assert_eq!(loaded.report.admitted, 3);
        assert_eq!(loaded.index.total(), 3);
        assert_eq!(loaded.index.slot(1).len(), 2);
        assert_eq!(loaded.index.active_users(1), 2);
    }

    #[test]
    fn unknown_antenna_and_malformed_rows_are_counted() {
        let r = registry();
        let origin = parse_timestamp("2012-01-01T00:00:00Z").unwrap();
        let grid = TimeGrid::hourly(origin, 2);
        let csv = "user_id,timestamp,antenna_id\n\
                   u1,2012-01-01T01:00:00Z,Z\n\
                   u1,yesterday,A\n\
                   u2\n\
                   ,2012-01-01T01:00:00Z,A\n\
                   u3,2012-03-01T01:00:00Z,A\n\
                   u4,2012-01-01T00:20:00Z,A\n";
        let mut users = UserTable::new();
        let loaded = load_calls(csv.as_bytes(), &r, &grid, &mut users).unwrap();
        assert_eq!(
            loaded.report,
            IngestReport {
                admitted: 1,
                unknown_antenna: 1,
                out_of_range: 1,
                malformed: 3
            }
        );
        let json = serde_json::to_value(loaded.report).unwrap();
        assert_eq!(json["unknown_antenna"], 1);
    }

    #[test]
    fn split_layout_is_merged() {
        let r = registry();
        let origin = parse_timestamp("2012-01-01T00:00:00Z").unwrap();
        let grid = TimeGrid::hourly(origin, 24);
        let csv = "user_id,date,time,antenna_id\nu1,2012-01-01,05:00:00,A\n";
        let mut users = UserTable::new();
        let loaded = load_calls(csv.as_bytes(), &r, &grid, &mut users).unwrap();
        assert_eq!(loaded.calls[0].at, origin + 5 * HOUR);
        assert_eq!(loaded.index.slot(5).len(), 1);
    }

    #[test]
    fn unknown_header_rejected() {
        let r = registry();
        let grid = TimeGrid::hourly(0, 1);
        let mut users = UserTable::new();
        let err = load_calls("who,when,where\n".as_bytes(), &r, &grid, &mut users).unwrap_err();
        assert!(matches!(err, IngestError::Header(_)));
    }

    #[test]
    fn boundary_call_indexed_twice() {
        let calls = [Call {
            user: UserIdx(0),
            at: 1800,
            antenna: AntennaIdx(0),
        }];
        let (index, missed) = CallIndex::build(&calls, &TimeGrid::hourly(0, 4));
        assert_eq!(missed, 0);
        assert_eq!(index.total(), 2);
    }

    fn calls_at_hours(hours: &[i64]) -> Vec<Call> {
        hours
            .iter()
            .map(|&h| Call {
                user: UserIdx(0),
                at: h * HOUR,
                antenna: AntennaIdx(0),
            })
            .collect()
    }

    #[test]
    fn gap_histogram_consecutive_hours() {
        let h = inter_call_gap_histogram(&calls_at_hours(&[0, 1, 2]));
        assert_eq!(h, BTreeMap::from([(1, 1.0)]));
    }

    #[test]
    fn gap_histogram_two_gaps() {
        let h = inter_call_gap_histogram(&calls_at_hours(&[0, 1, 3]));
        assert_eq!(h, BTreeMap::from([(1, 0.5), (2, 0.5)]));
    }

    #[test]
    fn gap_histogram_empty_without_pairs() {
        assert!(inter_call_gap_histogram(&calls_at_hours(&[4])).is_empty());
    }

    proptest! {
        #[test]
        fn write_and_reload_gives_same_index(
            rows in prop::collection::vec((0u32..6, 0i64..(30 * HOUR), 0u32..2), 0..60)
        ) {
            let r = registry();
            let mut users = UserTable::new();
            let calls: Vec<Call> = rows
                .iter()
                .map(|&(u, at, a)| Call { user: users.intern(&format!("u{u}")), at, antenna: AntennaIdx(a) })
                .collect();
            let grid = TimeGrid::hourly(0, 24);
            let first = index_calls(calls.clone(), IngestReport { admitted: calls.len() as u64, ..Default::default() }, &grid);

            let mut buf = Vec::new();
            write_calls(&first.calls, &users, &r, &mut buf).unwrap();
            let mut users2 = UserTable::new();
            let second = load_calls(buf.as_slice(), &r, &grid, &mut users2).unwrap();

            let rename = |idx: &CallIndex, table: &UserTable| -> Vec<Vec<(String, u32, i64)>> {
                (0..idx.n_steps())
                    .map(|t| {
                        let mut v: Vec<_> = idx.slot(t).iter().map(|o| (table.name(o.user).to_owned(), o.antenna.0, o.at)).collect();
                        v.sort();
                        v
                    })
                    .collect()
            };
            prop_assert_eq!(rename(&first.index, &users), rename(&second.index, &users2));
            prop_assert_eq!(second.report.admitted as usize, first.calls.len());
        }

        #[test]
        fn index_total_matches_window_counts(times in prop::collection::vec(-4000i64..(30 * HOUR), 0..80)) {
            let calls: Vec<Call> = times.iter().map(|&at| Call { user: UserIdx(0), at, antenna: AntennaIdx(0) }).collect();
            let grid = TimeGrid::hourly(0, 24);
            let (index, _) = CallIndex::build(&calls, &grid);
            let expected: usize = calls.iter().map(|c| grid.indices_of(c.at).len()).sum();
            prop_assert_eq!(index.total(), expected);
        }

        #[test]
        fn gap_fractions_sum_to_one(times in prop::collection::vec(0i64..(200 * HOUR), 2..50)) {
            let calls: Vec<Call> = times.iter().map(|&at| Call { user: UserIdx(0), at, antenna: AntennaIdx(0) }).collect();
            let sum: f64 = inter_call_gap_histogram(&calls).values().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
        }
    }
}
