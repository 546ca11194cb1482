//! In-memory chips and the on-disk chip format.
//!
//! A chip on disk is a pair of files sharing a stem:
//!
//! * `<stem>.bin`: little-endian `f32`, features `[T×C×H×W]` followed by
//!   the target `[H×W]`. Missing target pixels are NaN.
//! * `<stem>.json`: the [`ChipSidecar`].

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{CHIP_SIZE, N_BANDS, SEQ_LEN};

pub const CHIP_SCHEMA_VERSION: u32 = 1;

pub const BAND_NAMES: [&str; N_BANDS] =
    ["red", "nir", "blue", "green", "swir1", "swir2", "swir3", "elevation", "slope", "hand"];

const HW: usize = CHIP_SIZE * CHIP_SIZE;
const FEATURE_LEN: usize = SEQ_LEN * N_BANDS * HW;

/// One training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    /// `[T=10 × 10 × 32 × 32]`, timesteps oldest first, bands in
    /// [`BAND_NAMES`] order.
    pub features: Vec<f32>,
    /// `[32 × 32]` fractional inundated area.
    pub target: Vec<f32>,
    pub year: i32,
    /// Date of the time-t composite.
    pub date: NaiveDate,
    /// `(row, col)` in the chip grid.
    pub grid_pos: (u32, u32),
}

impl Chip {
    pub fn missing_pixels(&self) -> usize {
        self.target.iter().filter(|v| v.is_nan()).count()
    }

    /// Checks shapes and that every feature and every present target value
    /// lies in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != FEATURE_LEN || self.target.len() != HW {
            return Err(Error::shape(
                "Chip",
                format!("features {} (expected {FEATURE_LEN}), target {} (expected {HW})", self.features.len(), self.target.len()),
            ));
        }
        if let Some(v) = self.features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidData(format!("feature value {v} outside [0, 1]")));
        }
        if let Some(v) = self.target.iter().find(|v| !v.is_nan() && !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidData(format!("target value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Feature planes of one timestep, `10×32×32`.
    pub fn step(&self, t: usize) -> &[f32] {
        &self.features[t * N_BANDS * HW..(t + 1) * N_BANDS * HW]
    }

    /// Replaces each missing target pixel by the mean of its present
    /// 8-neighbours (0 when none are present).
    pub fn fill_missing_target(&mut self) {
        let src = self.target.clone();
        let n = CHIP_SIZE as isize;
        for (i, v) in self.target.iter_mut().enumerate() {
            if !v.is_nan() {
                continue;
            }
            let (r, c) = ((i / CHIP_SIZE) as isize, (i % CHIP_SIZE) as isize);
            let (mut sum, mut cnt) = (0.0f32, 0);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (dr, dc) != (0, 0) && (0..n).contains(&rr) && (0..n).contains(&cc) {
                        let u = src[(rr * n + cc) as usize];
                        if !u.is_nan() {
                            sum += u;
                            cnt += 1;
                        }
                    }
                }
            }
            *v = if cnt > 0 { sum / cnt as f32 } else { 0.0 };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipSidecar {
    pub schema_version: u32,
    pub shape: Vec<usize>,
    pub target_shape: Vec<usize>,
    pub bands: Vec<String>,
    pub date: NaiveDate,
    pub year: i32,
    pub grid_pos: (u32, u32),
    pub missing_pixels: usize,
}

impl ChipSidecar {
    fn for_chip(chip: &Chip) -> Self {
        ChipSidecar {
            schema_version: CHIP_SCHEMA_VERSION,
            shape: vec![SEQ_LEN, N_BANDS, CHIP_SIZE, CHIP_SIZE],
            target_shape: vec![CHIP_SIZE, CHIP_SIZE],
            bands: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
            date: chip.date,
            year: chip.year,
            grid_pos: chip.grid_pos,
            missing_pixels: chip.missing_pixels(),
        }
    }
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir` and returns the `.bin` path.
pub fn write_chip(chip: &Chip, dir: &Path, stem: &str) -> Result<PathBuf> {
    let bin = dir.join(format!("{stem}.bin"));
    let mut bytes = Vec::with_capacity((chip.features.len() + chip.target.len()) * 4);
    for v in chip.features.iter().chain(&chip.target) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let side = sidecar_path(&bin);
    let json = serde_json::to_vec_pretty(&ChipSidecar::for_chip(chip))?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(bin)
}

pub fn read_chip(bin: &Path) -> Result<Chip> {
    let side = sidecar_path(bin);
    let meta: ChipSidecar =
        serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bad = |m: String| Error::InvalidData(format!("{}: {m}", bin.display()));
    if meta.schema_version != CHIP_SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {}", meta.schema_version)));
    }
    if meta.shape != [SEQ_LEN, N_BANDS, CHIP_SIZE, CHIP_SIZE] || meta.target_shape != [CHIP_SIZE, CHIP_SIZE] {
        return Err(bad(format!("unexpected shapes {:?} / {:?}", meta.shape, meta.target_shape)));
    }
    if meta.bands.iter().map(String::as_str).ne(BAND_NAMES) {
        return Err(bad(format!("band order {:?}", meta.bands)));
    }
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != (FEATURE_LEN + HW) * 4 {
        return Err(bad(format!("{} bytes, expected {}", bytes.len(), (FEATURE_LEN + HW) * 4)));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let chip = Chip {
        features: values[..FEATURE_LEN].to_vec(),
        target: values[FEATURE_LEN..].to_vec(),
        year: meta.year,
        date: meta.date,
        grid_pos: meta.grid_pos,
    };
    chip.validate().map_err(|e| bad(e.to_string()))?;
    if chip.missing_pixels() != meta.missing_pixels {
        return Err(bad(format!("sidecar reports {} missing pixels, blob has {}", meta.missing_pixels, chip.missing_pixels())));
    }
    Ok(chip)
}
