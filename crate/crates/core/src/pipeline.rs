//! File-level workflows behind the command-line subcommands.
//!
//! Layout conventions:
//!
//! * dataset directory: `manifest.json` plus the chip files it lists;
//! * runs directory: `<kind>_<year>.ckpt` and `<kind>_<year>_log.csv` per
//!   fold, `cv_table.csv` for a cross-validation;
//! * output directory: metrics, series, maxima and map rasters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use image::GrayImage;

use crate::config::{DateRange, MetricOptions};
use crate::datapipe::{read_chip, Chip, ChipManifest, ChipRecord, CompletenessRule, Dataset, COMPOSITE_DAYS};
use crate::error::{Error, Result};
use crate::infer::{predict_chips, Ensemble};
use crate::metrics::{
    aggregate_series, annual_monsoon_max, compute_metrics, error_map, write_maxima_csv, write_metrics_csv,
    write_series_csv, AnnualMax, MetricReport, SeriesPoint,
};
use crate::model::{self, ModelKind};
use crate::synth::{self, SceneParams, MANIFEST_FILE};
use crate::train::{fit, run_cv, write_cv_table, write_epoch_log, CvFold, TrainConfig, TrainOutcome};
use crate::{CHIP_SIZE, SEQ_LEN};

pub const CV_TABLE_FILE: &str = "cv_table.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn manifest_path(data_dir: &Path) -> PathBuf {
    data_dir.join(MANIFEST_FILE)
}

pub fn checkpoint_path(runs: &Path, kind: ModelKind, year: i32) -> PathBuf {
    runs.join(format!("{}_{year}.ckpt", kind.as_str()))
}

pub fn log_path(runs: &Path, kind: ModelKind, year: i32) -> PathBuf {
    runs.join(format!("{}_{year}_log.csv", kind.as_str()))
}

/// Fold checkpoints of one model kind in `runs`, sorted by name.
pub fn fold_checkpoints(runs: &Path, kind: ModelKind) -> Result<Vec<PathBuf>> {
    let prefix = format!("{}_", kind.as_str());
    let mut out = Vec::new();
    for entry in fs::read_dir(runs).map_err(|e| Error::io(runs, e))? {
        let path = entry.map_err(|e| Error::io(runs, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with(&prefix) && name.ends_with(".ckpt") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::NotFound(runs.join(format!("{prefix}*.ckpt"))));
    }
    Ok(out)
}

pub fn synth(params: &SceneParams, out: &Path) -> Result<ChipManifest> {
    synth::write_dataset(params, out)
}

fn collect_bins(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_bins(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "bin") {
            out.push(path);
        }
    }
    Ok(())
}

/// Validates every chip file under `dir` and writes `dir/manifest.json`.
/// Chips failing the completeness rule are recorded but flagged incomplete.
pub fn ingest(dir: &Path, rule: CompletenessRule) -> Result<ChipManifest> {
    let mut bins = Vec::new();
    collect_bins(dir, &mut bins)?;
    bins.sort();
    let mut records = Vec::with_capacity(bins.len());
    for bin in &bins {
        let chip = read_chip(bin)?;
        let rel = bin.strip_prefix(dir).unwrap_or(bin);
        let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        records.push(ChipRecord {
            path,
            year: chip.year,
            date: chip.date,
            grid_pos: chip.grid_pos,
            missing_pixels: chip.missing_pixels(),
            complete: true,
        });
    }
    let manifest = ChipManifest::new(records, rule);
    let skipped = manifest.records.len() - manifest.total_complete();
    if skipped > 0 {
        log::warn!("{skipped} of {} chips are incomplete under the {rule:?} rule", manifest.records.len());
    }
    manifest.save(&manifest_path(dir))?;
    Ok(manifest)
}

fn save_fold(runs: &Path, kind: ModelKind, year: i32, outcome: &TrainOutcome) -> Result<()> {
    model::save(&outcome.network, &checkpoint_path(runs, kind, year))?;
    write_epoch_log(&log_path(runs, kind, year), &outcome.log)
}

/// Trains the fold withheld by `config.leave_out_year`.
pub fn train(config: &TrainConfig, data_dir: &Path, runs: &Path) -> Result<TrainOutcome> {
    let year = config.leave_out_year.ok_or_else(|| Error::Config {
        path: "train.leave_out_year".into(),
        message: "a single-fold run needs a leave-out year".into(),
    })?;
    let data = Dataset::load(&manifest_path(data_dir))?;
    let split = data.cv_split(year)?;
    let outcome = fit(config, &data.chips, &split.train_ids, &split.val_ids)?;
    create_dir(runs)?;
    save_fold(runs, config.model, year, &outcome)?;
    Ok(outcome)
}

/// Every leave-one-year-out fold for each kind, with checkpoints, logs and
/// the comparison table.
pub fn cv(config: &TrainConfig, data_dir: &Path, runs: &Path, kinds: &[ModelKind]) -> Result<Vec<CvFold>> {
    let data = Dataset::load(&manifest_path(data_dir))?;
    let folds = run_cv(config, &data, kinds)?;
    create_dir(runs)?;
    for f in &folds {
        save_fold(runs, f.kind, f.year, &f.outcome)?;
    }
    write_cv_table(&runs.join(CV_TABLE_FILE), &folds)?;
    Ok(folds)
}

fn grid_of(chips: &[&Chip]) -> (usize, usize) {
    let rows = chips.iter().map(|c| c.grid_pos.0 as usize + 1).max().unwrap_or(0);
    let cols = chips.iter().map(|c| c.grid_pos.1 as usize + 1).max().unwrap_or(0);
    (rows, cols)
}

fn chip_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Raw little-endian f32 raster and an 8-bit preview scaled from `[lo, hi]`.
/// NaN cells are written as NaN and shown black.
pub fn write_map(raw: &Path, width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::invalid(format!("map of {} values is not {width}×{height}", values.len())));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    let pixels = values
        .iter()
        .map(|&v| if v.is_nan() { 0 } else { (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8 })
        .collect();
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).expect("buffer matches dimensions");
    img.save(raw.with_extension("png"))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub metrics: MetricReport,
    pub series: Vec<SeriesPoint>,
}

/// Scores one checkpoint on the dataset, or on one year of it. Writes
/// `metrics.csv`, `series.csv` (predicted), `target_series.csv` and the
/// `error_map.f32` raster with its header and preview.
pub fn eval(checkpoint: &Path, data_dir: &Path, year: Option<i32>, opts: &MetricOptions, out: &Path) -> Result<EvalOutput> {
    let mut net = model::load(checkpoint)?;
    let data = Dataset::load(&manifest_path(data_dir))?;
    let chips: Vec<&Chip> = data.chips.iter().filter(|c| year.is_none_or(|y| c.year == y)).collect();
    if chips.is_empty() {
        return Err(Error::invalid(format!("no chips to evaluate for year {year:?}")));
    }
    let preds = predict_chips(&mut net, &chips, 16)?;
    let targets: Vec<Vec<f64>> = chips.iter().map(|c| c.target.iter().map(|&v| v as f64).collect()).collect();
    let pooled_pred: Vec<f64> = preds.iter().flatten().copied().collect();
    let pooled_obs: Vec<f64> = targets.iter().flatten().copied().collect();
    let metrics = compute_metrics(&pooled_pred, &pooled_obs)?;
    create_dir(out)?;
    let label = match year {
        Some(y) => format!("{}_{y}", net.kind().as_str()),
        None => net.kind().as_str().to_string(),
    };
    write_metrics_csv(&out.join("metrics.csv"), &[(label, metrics)])?;

    let positions: Vec<(u32, u32)> = chips.iter().map(|c| c.grid_pos).collect();
    let map = error_map(&preds, &targets, &positions, grid_of(&chips), opts.min_visits)?;
    let raw = out.join("error_map.f32");
    map.write(&raw)?;
    let mean: Vec<f64> = map.mean().into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let img = GrayImage::from_raw(
        map.width() as u32,
        map.height() as u32,
        mean.iter().map(|&v| if v.is_nan() { 0 } else { (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8 }).collect(),
    )
    .expect("buffer matches dimensions");
    img.save(raw.with_extension("png"))?;

    let series = aggregate_series(&chips.iter().zip(&preds).map(|(c, p)| (c.date, chip_mean(p))).collect::<Vec<_>>());
    write_series_csv(&out.join("series.csv"), &series)?;
    let observed = aggregate_series(&chips.iter().zip(&targets).map(|(c, t)| (c.date, chip_mean(t))).collect::<Vec<_>>());
    write_series_csv(&out.join("target_series.csv"), &observed)?;
    Ok(EvalOutput { metrics, series })
}

/// First and last day covered by a sample's input window.
pub fn input_window(date_t: NaiveDate) -> (NaiveDate, NaiveDate) {
    let start = date_t - Duration::days(COMPOSITE_DAYS * (SEQ_LEN as i64 - 1));
    (start, date_t + Duration::days(COMPOSITE_DAYS - 1))
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub series: Vec<SeriesPoint>,
    pub maxima: Vec<AnnualMax>,
    pub n_predicted: usize,
    pub n_skipped: usize,
}

/// Ensemble run over every sample of the dataset. Writes `series.csv`,
/// `maxima.csv` and, per date, `maps/<date>_mean.f32` and
/// `maps/<date>_spread.f32` mosaics with PNG previews.
pub fn infer(
    checkpoints: &[PathBuf],
    data_dir: &Path,
    exclude: &[DateRange],
    opts: &MetricOptions,
    batch: usize,
    out: &Path,
) -> Result<InferOutput> {
    let mut ensemble = Ensemble::load(checkpoints)?;
    let data = Dataset::load(&manifest_path(data_dir))?;
    let mut chips: Vec<&Chip> = Vec::with_capacity(data.len());
    let mut n_skipped = 0;
    for c in &data.chips {
        let (a, b) = input_window(c.date);
        if let Some(r) = exclude.iter().find(|r| r.overlaps(a, b)) {
            log::warn!("skipping chip {:?} at {}: input window touches excluded {}..{}", c.grid_pos, c.date, r.start, r.end);
            n_skipped += 1;
        } else {
            chips.push(c);
        }
    }
    if chips.is_empty() {
        return Err(Error::invalid("every sample was excluded"));
    }
    let preds = ensemble.predict(&chips, batch)?;

    create_dir(out)?;
    let series = aggregate_series(&chips.iter().zip(&preds).map(|(c, p)| (c.date, chip_mean(&p.mean))).collect::<Vec<_>>());
    write_series_csv(&out.join("series.csv"), &series)?;
    let maxima = annual_monsoon_max(&series, &opts.monsoon);
    write_maxima_csv(&out.join("maxima.csv"), &maxima)?;

    let maps = out.join("maps");
    create_dir(&maps)?;
    let (rows, cols) = grid_of(&chips);
    let width = cols * CHIP_SIZE;
    let mut by_date: BTreeMap<NaiveDate, Vec<usize>> = BTreeMap::new();
    for (i, c) in chips.iter().enumerate() {
        by_date.entry(c.date).or_default().push(i);
    }
    for (date, idx) in by_date {
        let mut mean = vec![f64::NAN; rows * CHIP_SIZE * width];
        let mut spread = mean.clone();
        for i in idx {
            let (r, c) = (chips[i].grid_pos.0 as usize, chips[i].grid_pos.1 as usize);
            for y in 0..CHIP_SIZE {
                for x in 0..CHIP_SIZE {
                    let k = (r * CHIP_SIZE + y) * width + c * CHIP_SIZE + x;
                    mean[k] = preds[i].mean[y * CHIP_SIZE + x];
                    spread[k] = preds[i].spread[y * CHIP_SIZE + x];
                }
            }
        }
        write_map(&maps.join(format!("{date}_mean.f32")), width, rows * CHIP_SIZE, &mean, 0.0, 1.0)?;
        write_map(&maps.join(format!("{date}_spread.f32")), width, rows * CHIP_SIZE, &spread, 0.0, 1.0)?;
    }
    Ok(InferOutput { series, maxima, n_predicted: chips.len(), n_skipped })
}
