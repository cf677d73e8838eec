//! Points of interest attached to antennas, read from `antenna_id,name` rows.

use std::collections::HashMap;
use std::io::Read;

use crowdlens_core::{AntennaIdx, AntennaRegistry};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoiError {
    #[error("poi file: {0}")]
    Csv(#[from] csv::Error),
    #[error("poi file line {line}: unknown antenna {antenna_id:?}")]
    UnknownAntenna { line: u64, antenna_id: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoiTable {
    by_antenna: HashMap<AntennaIdx, Vec<String>>,
}

#[derive(Deserialize)]
struct Row {
    antenna_id: String,
    name: String,
}

impl PoiTable {
    pub fn load<R: Read>(source: R, registry: &AntennaRegistry) -> Result<Self, PoiError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut by_antenna: HashMap<AntennaIdx, Vec<String>> = HashMap::new();
        let headers = reader.headers()?.clone();
        for record in reader.records() {
            let record = record?;
            let row: Row = record.deserialize(Some(&headers))?;
            let Some(a) = registry.get(&row.antenna_id) else {
                return Err(PoiError::UnknownAntenna {
                    line: record.position().map_or(0, |p| p.line()),
                    antenna_id: row.antenna_id,
                });
            };
            by_antenna.entry(a).or_default().push(row.name);
        }
        for names in by_antenna.values_mut() {
            names.sort();
            names.dedup();
        }
        Ok(Self { by_antenna })
    }

    pub fn at(&self, antenna: AntennaIdx) -> Vec<String> {
        self.by_antenna.get(&antenna).cloned().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.by_antenna.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_antenna.is_empty()
    }
}
