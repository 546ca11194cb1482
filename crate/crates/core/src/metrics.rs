//! Evaluation statistics and result aggregations.
//!
//! `slope` is the least-squares slope of predictions regressed on
//! observations, so 1 means predicted amplitudes match observed ones.
//! R² is pooled over every pixel passed in and may be negative.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::CHIP_SIZE;

/// Fields that are undefined for constant inputs are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r2: Option<f64>,
    pub slope: Option<f64>,
    pub spearman: Option<f64>,
    pub rmse: f64,
    pub n_samples: usize,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("rmse of empty input"));
    }
    Ok((a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Ranks starting at 1, ties receiving the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn compute_metrics(pred: &[f64], obs: &[f64]) -> Result<MetricReport> {
    if pred.len() != obs.len() {
        return Err(Error::invalid(format!("length mismatch: {} predictions, {} observations", pred.len(), obs.len())));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("metrics need at least 2 samples"));
    }
    let mo = mean(obs);
    let ss_tot: f64 = obs.iter().map(|o| (o - mo) * (o - mo)).sum();
    let ss_res: f64 = pred.iter().zip(obs).map(|(p, o)| (o - p) * (o - p)).sum();
    let mp = mean(pred);
    let sxy: f64 = pred.iter().zip(obs).map(|(p, o)| (p - mp) * (o - mo)).sum();
    let defined = ss_tot > 0.0;
    Ok(MetricReport {
        r2: defined.then(|| 1.0 - ss_res / ss_tot),
        slope: defined.then(|| sxy / ss_tot),
        spearman: spearman(pred, obs),
        rmse: rmse(pred, obs)?,
        n_samples: pred.len(),
    })
}

/// Percentile with linear interpolation between closest ranks
/// (`q ∈ [0, 100]`, position `q/100 · (n−1)` in the sorted sample).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub date: NaiveDate,
    pub median: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub n_chips: usize,
}

/// Per date: median of chip-mean fractions and the 25th–75th percentile band.
pub fn aggregate_series(chip_means: &[(NaiveDate, f64)]) -> Vec<SeriesPoint> {
    let mut by_date: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
    for &(d, v) in chip_means {
        by_date.entry(d).or_default().push(v);
    }
    by_date
        .into_iter()
        .map(|(date, mut v)| {
            v.sort_by(f64::total_cmp);
            SeriesPoint {
                date,
                median: percentile(&v, 50.0),
                band_low: percentile(&v, 25.0),
                band_high: percentile(&v, 75.0),
                n_chips: v.len(),
            }
        })
        .collect()
}

/// Inclusive month/day range within each year.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonsoonWindow {
    pub start: (u32, u32),
    pub end: (u32, u32),
}

impl Default for MonsoonWindow {
    fn default() -> Self {
        MonsoonWindow { start: (6, 1), end: (10, 31) }
    }
}

impl MonsoonWindow {
    pub fn contains(&self, d: NaiveDate) -> bool {
        let md = (d.month(), d.day());
        self.start <= md && md <= self.end
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(m, d): (u32, u32)| NaiveDate::from_ymd_opt(2000, m, d).is_some();
        if !ok(self.start) || !ok(self.end) || self.start > self.end {
            return Err(Error::invalid(format!("invalid monsoon window {:?}..{:?}", self.start, self.end)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnualMax {
    pub year: i32,
    /// `None` when no sample of the year falls inside the window.
    pub max: Option<f64>,
    pub date: Option<NaiveDate>,
}

/// Largest median value inside the window for every year the series touches.
pub fn annual_monsoon_max(series: &[SeriesPoint], window: &MonsoonWindow) -> Vec<AnnualMax> {
    let mut out: BTreeMap<i32, AnnualMax> = BTreeMap::new();
    for p in series {
        let e = out.entry(p.date.year()).or_insert(AnnualMax { year: p.date.year(), max: None, date: None });
        if window.contains(p.date) && e.max.is_none_or(|m| p.median > m) {
            e.max = Some(p.median);
            e.date = Some(p.date);
        }
    }
    out.into_values().collect()
}

/// Mean signed error per pixel of the national grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    /// Grid size in chips.
    pub chip_rows: usize,
    pub chip_cols: usize,
    /// Summed `prediction − target`, `(chip_rows·32) × (chip_cols·32)`.
    pub sum: Vec<f64>,
    /// Visits per chip cell, `chip_rows × chip_cols`.
    pub visits: Vec<usize>,
    pub min_visits: usize,
}

pub const DEFAULT_MIN_VISITS: usize = 5;

impl ErrorMap {
    pub fn width(&self) -> usize {
        self.chip_cols * CHIP_SIZE
    }

    pub fn height(&self) -> usize {
        self.chip_rows * CHIP_SIZE
    }

    fn chip_of(&self, pixel: usize) -> usize {
        let (r, c) = (pixel / self.width(), pixel % self.width());
        (r / CHIP_SIZE) * self.chip_cols + c / CHIP_SIZE
    }

    pub fn excluded(&self, chip: (usize, usize)) -> bool {
        self.visits[chip.0 * self.chip_cols + chip.1] < self.min_visits
    }

    /// Per-pixel mean error; `None` under excluded chips.
    pub fn mean(&self) -> Vec<Option<f64>> {
        (0..self.sum.len())
            .map(|i| {
                let v = self.visits[self.chip_of(i)];
                (v >= self.min_visits && v > 0).then(|| self.sum[i] / v as f64)
            })
            .collect()
    }

    /// Little-endian f32 raster (NaN where excluded) plus a JSON header.
    pub fn write(&self, raw: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.sum.len() * 4);
        for v in self.mean() {
            bytes.extend_from_slice(&(v.map_or(f32::NAN, |x| x as f32)).to_le_bytes());
        }
        fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
        let header = serde_json::json!({
            "schema_version": 1,
            "dtype": "f32le",
            "height": self.height(),
            "width": self.width(),
            "chip_rows": self.chip_rows,
            "chip_cols": self.chip_cols,
            "min_visits": self.min_visits,
            "visits": self.visits,
            "value": "mean(prediction - target)",
        });
        let h = raw.with_extension("json");
        fs::write(&h, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&h, e))
    }
}

/// Accumulates `prediction − target` maps (each `32×32`) at chip positions
/// on a `chip_rows × chip_cols` grid.
pub fn error_map(
    predictions: &[Vec<f64>],
    targets: &[Vec<f64>],
    positions: &[(u32, u32)],
    grid: (usize, usize),
    min_visits: usize,
) -> Result<ErrorMap> {
    if predictions.len() != targets.len() || predictions.len() != positions.len() {
        return Err(Error::invalid("error_map inputs must be aligned"));
    }
    let mut map = ErrorMap {
        chip_rows: grid.0,
        chip_cols: grid.1,
        sum: vec![0.0; grid.0 * grid.1 * CHIP_SIZE * CHIP_SIZE],
        visits: vec![0; grid.0 * grid.1],
        min_visits,
    };
    let width = map.width();
    for ((p, t), &(r, c)) in predictions.iter().zip(targets).zip(positions) {
        let (r, c) = (r as usize, c as usize);
        if r >= grid.0 || c >= grid.1 {
            return Err(Error::invalid(format!("chip position ({r}, {c}) outside the {}×{} grid", grid.0, grid.1)));
        }
        if p.len() != CHIP_SIZE * CHIP_SIZE || t.len() != p.len() {
            return Err(Error::invalid("prediction and target maps must be 32×32"));
        }
        map.visits[r * grid.1 + c] += 1;
        for i in 0..CHIP_SIZE {
            for j in 0..CHIP_SIZE {
                let k = i * CHIP_SIZE + j;
                map.sum[(r * CHIP_SIZE + i) * width + c * CHIP_SIZE + j] += p[k] - t[k];
            }
        }
    }
    Ok(map)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidData(format!("{other:?}")),
    })?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per report; undefined statistics are left empty.
pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    write_rows(
        path,
        &["label", "r2", "slope", "spearman", "rmse", "n_samples"],
        rows.iter().map(|(label, m)| {
            vec![label.clone(), opt(m.r2), opt(m.slope), opt(m.spearman), format!("{}", m.rmse), m.n_samples.to_string()]
        }),
    )
}

pub fn write_series_csv(path: &Path, series: &[SeriesPoint]) -> Result<()> {
    write_rows(
        path,
        &["date", "median", "low", "high"],
        series.iter().map(|p| {
            vec![p.date.to_string(), format!("{}", p.median), format!("{}", p.band_low), format!("{}", p.band_high)]
        }),
    )
}

pub fn write_maxima_csv(path: &Path, maxima: &[AnnualMax]) -> Result<()> {
    write_rows(path, &["year", "max"], maxima.iter().map(|m| vec![m.year.to_string(), opt(m.max)]))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let x = [0.1, 0.5, 0.2, 0.9];
        let m = compute_metrics(&x, &x).unwrap();
        assert_eq!((m.r2, m.slope, m.spearman, m.rmse), (Some(1.0), Some(1.0), Some(1.0), 0.0));
    }

    #[test]
    fn mean_prediction_has_zero_r2() {
        let obs = [0.1, 0.5, 0.2, 0.8];
        let m = compute_metrics(&[0.4; 4], &obs).unwrap();
        assert!(m.r2.unwrap().abs() < 1e-15);
        assert_eq!(m.spearman, None);
    }

    #[test]
    fn spearman_small_example() {
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((s - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_observations_are_flagged() {
        let m = compute_metrics(&[0.1, 0.2], &[0.3, 0.3]).unwrap();
        assert_eq!((m.r2, m.slope, m.spearman), (None, None, None));
        assert!(compute_metrics(&[0.1], &[0.3]).is_err());
        assert!(compute_metrics(&[0.1, 0.2], &[0.3]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn series_band_for_three_chips() {
        let day = d(2019, 7, 4);
        let s = aggregate_series(&[(day, 0.3), (day, 0.1), (day, 0.2)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].median - 0.2).abs() < 1e-15);
        assert!((s[0].band_low - 0.15).abs() < 1e-15);
        assert!((s[0].band_high - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_chip_series_has_zero_band() {
        let s = aggregate_series(&[(d(2019, 1, 1), 0.42), (d(2019, 1, 9), 0.1)]);
        assert!(s.iter().all(|p| p.band_low == p.median && p.band_high == p.median));
        assert_eq!(s[0].median, 0.42);
    }

    #[test]
    fn monsoon_window_ignores_spring_peak() {
        let mut series = Vec::new();
        for (m, v) in [(3, 0.9), (4, 0.5), (7, 0.6), (8, 0.7), (11, 0.8)] {
            series.push(SeriesPoint { date: d(2019, m, 10), median: v, band_low: v, band_high: v, n_chips: 1 });
        }
        series.push(SeriesPoint { date: d(2020, 2, 1), median: 0.2, band_low: 0.2, band_high: 0.2, n_chips: 1 });
        let mx = annual_monsoon_max(&series, &MonsoonWindow::default());
        assert_eq!(mx[0], AnnualMax { year: 2019, max: Some(0.7), date: Some(d(2019, 8, 10)) });
        assert_eq!(mx[1].max, None);
    }

    #[test]
    fn constant_bias_error_map() {
        let p = vec![vec![0.6; 1024]; 6];
        let t = vec![vec![0.5; 1024]; 6];
        let pos = vec![(0, 1); 6];
        let m = error_map(&p, &t, &pos, (2, 2), 5).unwrap();
        assert!(!m.excluded((0, 1)));
        assert!(m.excluded((0, 0)));
        for (i, v) in m.mean().into_iter().enumerate() {
            if m.chip_of(i) == 1 {
                assert!((v.unwrap() - 0.1).abs() < 1e-12);
            } else {
                assert_eq!(v, None);
            }
        }
    }

    #[test]
    fn error_map_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = error_map(&[vec![0.25; 1024]], &[vec![0.0; 1024]], &[(0, 0)], (1, 2), 1).unwrap();
        let raw = dir.path().join("err.f32");
        m.write(&raw).unwrap();
        let bytes = fs::read(&raw).unwrap();
        assert_eq!(bytes.len(), 2 * 1024 * 4);
        assert_eq!(f32::from_le_bytes(bytes[0..4].try_into().unwrap()), 0.25);
        assert!(f32::from_le_bytes(bytes[32 * 4..33 * 4].try_into().unwrap()).is_nan());
        assert!(raw.with_extension("json").exists());
    }

    proptest! {
        #[test]
        fn self_metrics(x in proptest::collection::vec(0.0f64..1.0, 2..40)) {
            prop_assume!(x.iter().any(|&v| v != x[0]));
            let m = compute_metrics(&x, &x).unwrap();
            prop_assert!((m.r2.unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((m.slope.unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((m.spearman.unwrap() - 1.0).abs() < 1e-12);
            prop_assert_eq!(m.rmse, 0.0);
        }

        #[test]
        fn spearman_monotone_invariance(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..30)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let s = spearman(&a, &b);
            let ta: Vec<f64> = a.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            let tb: Vec<f64> = b.iter().map(|v| v.powi(3)).collect();
            prop_assert_eq!(s.map(|v| (v * 1e12).round()), spearman(&ta, &tb).map(|v| (v * 1e12).round()));
            if let Some(v) = s { prop_assert!((-1.0..=1.0).contains(&v)); }
        }

        #[test]
        fn joint_permutation_invariance(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..30),
            seed in 0u64..1000
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p, o): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (ps, os): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            let a = compute_metrics(&p, &o).unwrap();
            let b = compute_metrics(&ps, &os).unwrap();
            prop_assert!((a.r2.unwrap() - b.r2.unwrap()).abs() < 1e-9);
            prop_assert!((a.slope.unwrap() - b.slope.unwrap()).abs() < 1e-9);
            prop_assert!(a.r2.unwrap() <= 1.0);
        }

        #[test]
        fn rmse_symmetric_and_triangle(
            triples in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30)
        ) {
            let a: Vec<f64> = triples.iter().map(|t| t.0).collect();
            let b: Vec<f64> = triples.iter().map(|t| t.1).collect();
            let c: Vec<f64> = triples.iter().map(|t| t.2).collect();
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            prop_assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn error_map_bounded(vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..4)) {
            let p: Vec<Vec<f64>> = vals.iter().map(|v| vec![v.0; 1024]).collect();
            let t: Vec<Vec<f64>> = vals.iter().map(|v| vec![v.1; 1024]).collect();
            let pos = vec![(0u32, 0u32); vals.len()];
            let m = error_map(&p, &t, &pos, (1, 1), 1).unwrap();
            prop_assert!(m.mean().into_iter().flatten().all(|v| (-1.0..=1.0).contains(&v)));
        }

        #[test]
        fn symmetric_sample_median_equals_mean(
            half in proptest::collection::vec(0.0f64..0.5, 1..10)
        ) {
            let day = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
            let pts: Vec<(NaiveDate, f64)> = half.iter().flat_map(|&h| [(day, 0.5 - h), (day, 0.5 + h)]).collect();
            let s = aggregate_series(&pts);
            prop_assert!((s[0].median - 0.5).abs() < 1e-12);
            prop_assert!(s[0].band_low <= s[0].median && s[0].median <= s[0].band_high);
        }
    }
}
