//! Chip manifests, in-memory datasets and leave-one-year-out splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::chip::{read_chip, Chip};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Which chips count as complete.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletenessRule {
    /// No missing target pixel.
    #[default]
    Strict,
    /// At most one missing target pixel; the gap is filled from neighbours
    /// on load.
    Lenient,
}

impl CompletenessRule {
    pub fn accepts(self, missing_pixels: usize) -> bool {
        match self {
            CompletenessRule::Strict => missing_pixels == 0,
            CompletenessRule::Lenient => missing_pixels <= 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipRecord {
    /// Path of the `.bin` file relative to the manifest's directory.
    pub path: String,
    pub year: i32,
    pub date: NaiveDate,
    pub grid_pos: (u32, u32),
    pub missing_pixels: usize,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipManifest {
    pub schema_version: u32,
    pub completeness: CompletenessRule,
    pub records: Vec<ChipRecord>,
    /// Complete chips per year.
    pub year_counts: BTreeMap<i32, usize>,
}

fn count_years<'a>(records: impl Iterator<Item = &'a ChipRecord>) -> BTreeMap<i32, usize> {
    let mut counts = BTreeMap::new();
    for r in records.filter(|r| r.complete) {
        *counts.entry(r.year).or_insert(0) += 1;
    }
    counts
}

impl ChipManifest {
    pub fn new(mut records: Vec<ChipRecord>, completeness: CompletenessRule) -> Self {
        for r in &mut records {
            r.complete = completeness.accepts(r.missing_pixels);
        }
        let year_counts = count_years(records.iter());
        ChipManifest { schema_version: MANIFEST_SCHEMA_VERSION, completeness, records, year_counts }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: ChipManifest = serde_json::from_slice(&bytes)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::InvalidData(format!("manifest schema version {} unsupported", m.schema_version)));
        }
        if let Some(r) = m.records.iter().find(|r| r.complete != m.completeness.accepts(r.missing_pixels)) {
            return Err(Error::InvalidData(format!("record {} has an inconsistent completeness flag", r.path)));
        }
        let recomputed = count_years(m.records.iter());
        if recomputed != m.year_counts {
            return Err(Error::InvalidData(format!(
                "manifest year counts {:?} disagree with its records {:?}",
                m.year_counts, recomputed
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn complete_records(&self) -> impl Iterator<Item = &ChipRecord> {
        self.records.iter().filter(|r| r.complete)
    }

    pub fn total_complete(&self) -> usize {
        self.year_counts.values().sum()
    }

    /// Leave-one-year-out split over the complete records. Ids index
    /// [`ChipManifest::complete_records`].
    pub fn cv_split(&self, leave_out_year: i32) -> Result<CvSplit> {
        let years: Vec<i32> = self.complete_records().map(|r| r.year).collect();
        cv_split(&years, leave_out_year)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CvSplit {
    pub leave_out_year: i32,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Validation = every sample of `leave_out_year`, training = the rest.
pub fn cv_split(years: &[i32], leave_out_year: i32) -> Result<CvSplit> {
    if !years.contains(&leave_out_year) {
        return Err(Error::invalid(format!("year {leave_out_year} is not present in the data")));
    }
    let (val_ids, train_ids): (Vec<usize>, Vec<usize>) = (0..years.len()).partition(|&i| years[i] == leave_out_year);
    Ok(CvSplit { leave_out_year, train_ids, val_ids })
}

/// Complete chips held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub chips: Vec<Chip>,
}

impl Dataset {
    pub fn from_chips(chips: Vec<Chip>) -> Self {
        Dataset { chips }
    }

    /// Loads every complete chip of a manifest, in record order.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = ChipManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut chips = Vec::with_capacity(manifest.total_complete());
        for rec in manifest.complete_records() {
            let mut chip = read_chip(&root.join(&rec.path))?;
            if chip.year != rec.year || chip.date != rec.date || chip.grid_pos != rec.grid_pos {
                return Err(Error::InvalidData(format!("{}: sidecar disagrees with manifest record", rec.path)));
            }
            if chip.missing_pixels() > 0 {
                chip.fill_missing_target();
            }
            chips.push(chip);
        }
        Ok(Dataset { chips })
    }

    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    /// Distinct years, ascending.
    pub fn years(&self) -> Vec<i32> {
        let mut y: Vec<i32> = self.chips.iter().map(|c| c.year).collect();
        y.sort_unstable();
        y.dedup();
        y
    }

    pub fn cv_split(&self, leave_out_year: i32) -> Result<CvSplit> {
        let years: Vec<i32> = self.chips.iter().map(|c| c.year).collect();
        cv_split(&years, leave_out_year)
    }
}
