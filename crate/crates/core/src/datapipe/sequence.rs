//! 8-day composite calendar and input-sequence assembly.
//!
//! Composites restart on January 1 each year: composite `k` of a year starts
//! on day-of-year `1 + 8k`, `k = 0..46`, and the last one absorbs the
//! remaining days of the year. "Consecutive" follows this calendar, so the
//! composite before `(y, 0)` is `(y - 1, 45)`.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate};

use crate::error::{Error, Result};
use crate::{CHIP_SIZE, N_BANDS, N_OPTICAL, SEQ_LEN};

pub const COMPOSITE_DAYS: i64 = 8;
pub const COMPOSITES_PER_YEAR: u32 = 46;

const HW: usize = CHIP_SIZE * CHIP_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CompositeKey {
    pub year: i32,
    pub index: u32,
}

pub fn composite_start(key: CompositeKey) -> NaiveDate {
    NaiveDate::from_yo_opt(key.year, 1).expect("valid year") + Duration::days(COMPOSITE_DAYS * key.index as i64)
}

/// The composite whose period contains `date`.
pub fn composite_index(date: NaiveDate) -> CompositeKey {
    let k = ((date.ordinal() - 1) / COMPOSITE_DAYS as u32).min(COMPOSITES_PER_YEAR - 1);
    CompositeKey { year: date.year(), index: k }
}

pub fn previous_composite(key: CompositeKey) -> CompositeKey {
    if key.index == 0 {
        CompositeKey { year: key.year - 1, index: COMPOSITES_PER_YEAR - 1 }
    } else {
        CompositeKey { year: key.year, index: key.index - 1 }
    }
}

/// Normalised optical composites (`7×32×32` each) of one chip location.
#[derive(Clone, Debug, Default)]
pub struct CompositeSeries {
    frames: BTreeMap<CompositeKey, Vec<f64>>,
}

impl CompositeSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: CompositeKey, optical: Vec<f64>) -> Result<()> {
        if optical.len() != N_OPTICAL * HW {
            return Err(Error::shape("CompositeSeries::insert", format!("{} values, expected {}", optical.len(), N_OPTICAL * HW)));
        }
        self.frames.insert(key, optical);
        Ok(())
    }

    pub fn get(&self, key: CompositeKey) -> Option<&[f64]> {
        self.frames.get(&key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Normalised static bands `[elevation, slope, HAND] × 32 × 32`.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticBands(Vec<f64>);

impl StaticBands {
    pub fn new(elevation: &[f64], slope: &[f64], hand: &[f64]) -> Result<Self> {
        if elevation.len() != HW || slope.len() != HW || hand.len() != HW {
            return Err(Error::shape("StaticBands::new", format!("each band must hold {HW} values")));
        }
        Ok(StaticBands([elevation, slope, hand].concat()))
    }

    pub fn data(&self) -> &[f64] {
        &self.0
    }
}

/// Builds the `T×10×32×32` feature stack ending at the composite that
/// overlaps `date_t`, oldest first. The static bands are repeated at every
/// timestep. A missing composite anywhere in the window is an error.
pub fn assemble_sequence(date_t: NaiveDate, composites: &CompositeSeries, statics: &StaticBands) -> Result<Vec<f32>> {
    let mut keys = Vec::with_capacity(SEQ_LEN);
    let mut key = composite_index(date_t);
    for _ in 0..SEQ_LEN {
        keys.push(key);
        key = previous_composite(key);
    }
    keys.reverse();
    let mut out = Vec::with_capacity(SEQ_LEN * N_BANDS * HW);
    for k in keys {
        let optical = composites.get(k).ok_or_else(|| {
            log::warn!("sequence for {date_t} is missing composite {}-{:02}", k.year, k.index);
            Error::InvalidData(format!("missing composite {}/{} in the window ending {date_t}", k.year, k.index))
        })?;
        out.extend(optical.iter().map(|&v| v as f32));
        out.extend(statics.0.iter().map(|&v| v as f32));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn statics() -> StaticBands {
        let e: Vec<f64> = (0..HW).map(|i| i as f64 / HW as f64).collect();
        StaticBands::new(&e, &vec![0.25; HW], &vec![0.75; HW]).unwrap()
    }

    fn series(year: i32, upto: u32) -> CompositeSeries {
        let mut s = CompositeSeries::new();
        for k in 0..=upto {
            s.insert(CompositeKey { year, index: k }, vec![k as f64 / 100.0; N_OPTICAL * HW]).unwrap();
        }
        s
    }

    #[test]
    fn calendar_round_trip() {
        let key = CompositeKey { year: 2020, index: 20 };
        let d = composite_start(key);
        assert_eq!(composite_index(d), key);
        assert_eq!(composite_index(d + Duration::days(7)), key);
        assert_eq!(composite_index(NaiveDate::from_ymd_opt(2021, 12, 31).unwrap()).index, 45);
        assert_eq!(previous_composite(CompositeKey { year: 2020, index: 0 }), CompositeKey { year: 2019, index: 45 });
    }

    #[test]
    fn window_spans_eighty_days() {
        let t = CompositeKey { year: 2019, index: 30 };
        let mut oldest = t;
        for _ in 0..SEQ_LEN - 1 {
            oldest = previous_composite(oldest);
        }
        let span = composite_start(t) + Duration::days(COMPOSITE_DAYS) - composite_start(oldest);
        assert_eq!(span.num_days(), 80);
    }

    #[test]
    fn order_oldest_first_and_statics_repeated() {
        let s = series(2019, 9);
        let date = composite_start(CompositeKey { year: 2019, index: 9 }) + Duration::days(3);
        let seq = assemble_sequence(date, &s, &statics()).unwrap();
        assert_eq!(seq.len(), SEQ_LEN * N_BANDS * HW);
        let step = N_BANDS * HW;
        for t in 0..SEQ_LEN {
            assert_eq!(seq[t * step], t as f32 / 100.0);
            assert_eq!(seq[t * step + N_OPTICAL * HW..(t + 1) * step], seq[N_OPTICAL * HW..step]);
        }
    }

    #[test]
    fn missing_composite_is_rejected() {
        let s = series(2019, 8);
        let date = composite_start(CompositeKey { year: 2019, index: 9 });
        assert!(assemble_sequence(date, &s, &statics()).is_err());
    }
}
