//! Seeded synthetic seasonal-inundation scenes.
//!
//! A scene is a fine-resolution terrain over a `grid × grid` block of chips.
//! Water covers every fine pixel whose elevation lies below a scene-wide
//! water level that follows a two-peak annual hydrograph (spring irrigation,
//! summer monsoon). Targets are the exact fractional upscaling of that mask;
//! optical bands are reflectance mixtures of land and water with noise.
//!
//! Clouds hide a whole chip composite at once: with probability
//! `cloud_prob` every optical value of that chip at that composite is
//! replaced by a fixed bright cloud reflectance. The level is shared by the
//! whole scene, so a partly visible chip would give the level away to a
//! single-frame model; whole-chip occlusion leaves the history as the only
//! source of information on cloudy dates.

use std::fs;
use std::path::Path;

use chrono::Datelike;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    assemble_sequence, composite_start, fractional_upscale, normalize_elevation, normalize_hand, normalize_modis,
    normalize_slope, previous_composite, write_chip, Chip, ChipManifest, ChipRecord, CompletenessRule, CompositeKey,
    CompositeSeries, StaticBands, COMPOSITES_PER_YEAR, DEFAULT_HAND_MAX,
};
use crate::error::{Error, Result};
use crate::{CHIP_SIZE, N_OPTICAL, SEQ_LEN};

const HW: usize = CHIP_SIZE * CHIP_SIZE;

/// Edge length of one coarse cell in metres.
pub const COARSE_CELL_M: f64 = 500.0;
/// Raw reflectance written for cloud-covered pixels in every optical band.
pub const CLOUD_RAW: i32 = 9000;

/// Raw land reflectance per band as a function of vegetation `v ∈ [0, 1]`,
/// in the band order red, NIR, blue, green, SWIR1, SWIR2, SWIR3.
fn land_reflectance(v: f64) -> [f64; N_OPTICAL] {
    [
        900.0 - 500.0 * v,
        2500.0 + 2000.0 * v,
        500.0 - 100.0 * v,
        900.0 + 200.0 * v,
        2400.0 - 700.0 * v,
        1600.0 - 600.0 * v,
        1100.0 - 400.0 * v,
    ]
}

const WATER_REFLECTANCE: [f64; N_OPTICAL] = [400.0, 300.0, 600.0, 700.0, 200.0, 100.0, 80.0];

/// Noise-free raw reflectance of a coarse cell with water fraction `w` and
/// vegetation `v`.
pub fn mixed_reflectance(w: f64, v: f64) -> [f64; N_OPTICAL] {
    let land = land_reflectance(v);
    std::array::from_fn(|b| (1.0 - w) * land[b] + w * WATER_REFLECTANCE[b])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub seed: u64,
    /// Chips per side of the square scene.
    pub grid: usize,
    pub years: Vec<i32>,
    /// Must equal the 8-day calendar's 46.
    pub composites_per_year: u32,
    /// Fine pixels per coarse cell edge (50 for 10 m pixels under 500 m cells).
    pub fine_factor: usize,
    /// Terrain height range in metres.
    pub relief: f64,
    /// Water level outside both seasonal bumps, metres.
    pub base_level: f64,
    pub irrigation_peak_day: f64,
    pub irrigation_amplitude: f64,
    pub monsoon_peak_day: f64,
    pub monsoon_amplitude: f64,
    pub cloud_prob: f64,
    /// Reflectance noise standard deviation as a fraction of 10,000.
    pub noise_scale: f64,
    /// A sample is emitted at every `sample_stride`-th composite of each year.
    pub sample_stride: u32,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            seed: 0,
            grid: 4,
            years: vec![2017, 2018, 2019],
            composites_per_year: COMPOSITES_PER_YEAR,
            fine_factor: 10,
            relief: 20.0,
            base_level: 7.0,
            irrigation_peak_day: 75.0,
            irrigation_amplitude: 2.0,
            monsoon_peak_day: 230.0,
            monsoon_amplitude: 3.5,
            cloud_prob: 0.5,
            noise_scale: 0.02,
            sample_stride: 4,
        }
    }
}

/// Half-widths of the raised-cosine bumps, days.
pub const IRRIGATION_HALF_WIDTH: f64 = 30.0;
pub const MONSOON_HALF_WIDTH: f64 = 60.0;
/// Largest seeded shift of a bump centre from its nominal day.
pub const MAX_PEAK_SHIFT: f64 = 8.0;

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(0.0..1.0).contains(&self.cloud_prob) {
            return bad("cloud_prob must lie in [0, 1)");
        }
        if !(self.irrigation_amplitude >= 0.0 && self.monsoon_amplitude >= 0.0) {
            return bad("hydrograph amplitudes must be nonnegative");
        }
        if !(self.noise_scale >= 0.0 && self.relief >= 0.0) {
            return bad("noise_scale and relief must be nonnegative");
        }
        if self.grid == 0 || self.fine_factor == 0 || self.sample_stride == 0 {
            return bad("grid, fine_factor and sample_stride must be positive");
        }
        if self.years.is_empty() {
            return bad("at least one year is required");
        }
        if self.composites_per_year != COMPOSITES_PER_YEAR {
            return bad("composites_per_year must be 46 (8-day cadence)");
        }
        // Keeps the two seasonal bumps disjoint for any seeded shift.
        let gap = self.monsoon_peak_day - self.irrigation_peak_day;
        if gap < IRRIGATION_HALF_WIDTH + MONSOON_HALF_WIDTH + 2.0 * MAX_PEAK_SHIFT {
            return bad("monsoon peak too close to the irrigation peak");
        }
        Ok(())
    }

    /// Fine pixels per scene edge.
    pub fn fine_size(&self) -> usize {
        self.grid * CHIP_SIZE * self.fine_factor
    }
}

/// Independent RNG stream for one purpose within a seeded scene.
fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ b);
    rng
}

const TAG_TERRAIN: u64 = 1;
const TAG_VEGETATION: u64 = 2;
const TAG_YEAR: u64 = 3;
const TAG_CLOUD: u64 = 4;
const TAG_NOISE: u64 = 5;

/// Terrain fields on the fine grid, row-major `size × size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    pub size: usize,
    pub elevation: Vec<f64>,
    /// Gradient magnitude as rise over run.
    pub slope: Vec<f64>,
    /// Elevation above the lowest point of the surrounding window.
    pub hand: Vec<f64>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of smoothly interpolated lattice-noise octaves, scaled into `[0, 1)`.
pub fn octave_noise(rng: &mut ChaCha8Rng, size: usize, base_cell: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut cell = base_cell.max(1);
    let mut amp = 1.0;
    let mut total = 0.0;
    loop {
        let n = size / cell + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        for i in 0..size {
            let gy = i as f64 / cell as f64;
            let (y0, ty) = (gy.floor() as usize, smoothstep(gy.fract()));
            for j in 0..size {
                let gx = j as f64 / cell as f64;
                let (x0, tx) = (gx.floor() as usize, smoothstep(gx.fract()));
                let l = |y: usize, x: usize| lattice[y * n + x];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                out[i * size + j] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        if cell <= 4 {
            break;
        }
        cell /= 2;
        amp *= 0.5;
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Square-window minimum of radius `r`, computed separably.
fn min_filter(src: &[f64], size: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; src.len()];
    for i in 0..size {
        for j in 0..size {
            let (lo, hi) = (j.saturating_sub(r), (j + r).min(size - 1));
            rows[i * size + j] = src[i * size + lo..=i * size + hi].iter().copied().fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; src.len()];
    for i in 0..size {
        let (lo, hi) = (i.saturating_sub(r), (i + r).min(size - 1));
        for j in 0..size {
            out[i * size + j] = (lo..=hi).map(|k| rows[k * size + j]).fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Terrain of `size × size` fine pixels of edge `pixel_m` metres.
///
/// `relief = 0` gives a flat plain at zero elevation.
pub fn gen_terrain(seed: u64, size: usize, relief: f64, pixel_m: f64, hand_radius: usize) -> Terrain {
    let mut rng = stream(seed, TAG_TERRAIN, 0, 0);
    let noise = octave_noise(&mut rng, size, (size / 4).max(1));
    let elevation: Vec<f64> = noise.iter().map(|&n| relief * n).collect();

    let mut slope = vec![0.0; size * size];
    let at = |i: usize, j: usize| elevation[i * size + j];
    for i in 0..size {
        for j in 0..size {
            let (jl, jr) = (j.saturating_sub(1), (j + 1).min(size - 1));
            let (iu, id) = (i.saturating_sub(1), (i + 1).min(size - 1));
            let dx = if jr > jl { (at(i, jr) - at(i, jl)) / ((jr - jl) as f64 * pixel_m) } else { 0.0 };
            let dy = if id > iu { (at(id, j) - at(iu, j)) / ((id - iu) as f64 * pixel_m) } else { 0.0 };
            slope[i * size + j] = dx.hypot(dy);
        }
    }

    let floor = min_filter(&elevation, size, hand_radius);
    let hand = elevation.iter().zip(&floor).map(|(e, m)| e - m).collect();
    Terrain { size, elevation, slope, hand }
}

fn raised_cosine(day: f64, centre: f64, half_width: f64) -> f64 {
    let d = (day - centre).abs();
    if d >= half_width {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * d / half_width).cos())
    }
}

/// Seeded per-year variation of the hydrograph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YearVariation {
    pub irrigation_scale: f64,
    pub monsoon_scale: f64,
    pub irrigation_shift: f64,
    pub monsoon_shift: f64,
}

impl YearVariation {
    pub const NONE: YearVariation =
        YearVariation { irrigation_scale: 1.0, monsoon_scale: 1.0, irrigation_shift: 0.0, monsoon_shift: 0.0 };

    pub fn draw(seed: u64, year: i32) -> Self {
        let mut rng = stream(seed, TAG_YEAR, year as u64, 0);
        YearVariation {
            irrigation_scale: rng.random_range(0.6..1.4),
            monsoon_scale: rng.random_range(0.6..1.4),
            irrigation_shift: rng.random_range(-MAX_PEAK_SHIFT..MAX_PEAK_SHIFT),
            monsoon_shift: rng.random_range(-MAX_PEAK_SHIFT..MAX_PEAK_SHIFT),
        }
    }
}

/// Scene water level on day-of-year `day` (1-based).
pub fn hydrograph(day: f64, p: &SceneParams, var: &YearVariation) -> f64 {
    p.base_level
        + p.irrigation_amplitude
            * var.irrigation_scale
            * raised_cosine(day, p.irrigation_peak_day + var.irrigation_shift, IRRIGATION_HALF_WIDTH)
        + p.monsoon_amplitude
            * var.monsoon_scale
            * raised_cosine(day, p.monsoon_peak_day + var.monsoon_shift, MONSOON_HALF_WIDTH)
}

/// Fine terrain plus per-cell vegetation for a whole scene.
#[derive(Clone, Debug)]
pub struct LatentScene {
    pub params: SceneParams,
    pub terrain: Terrain,
    /// Coarse vegetation proxy in `[0, 1)`, row-major over the scene's cells.
    pub vegetation: Vec<f64>,
}

impl LatentScene {
    pub fn generate(params: &SceneParams) -> Result<Self> {
        params.validate()?;
        let size = params.fine_size();
        let pixel_m = COARSE_CELL_M / params.fine_factor as f64;
        let terrain = gen_terrain(params.seed, size, params.relief, pixel_m, 2 * params.fine_factor);
        let cells = params.grid * CHIP_SIZE;
        let mut rng = stream(params.seed, TAG_VEGETATION, 0, 0);
        let vegetation = octave_noise(&mut rng, cells, 16);
        Ok(LatentScene { params: params.clone(), terrain, vegetation })
    }

    pub fn level(&self, key: CompositeKey) -> f64 {
        let day = composite_start(key).ordinal() as f64;
        hydrograph(day, &self.params, &YearVariation::draw(self.params.seed, key.year))
    }

    fn chip_fine(&self, field: &[f64], chip: (usize, usize)) -> Vec<f64> {
        let edge = CHIP_SIZE * self.params.fine_factor;
        let size = self.terrain.size;
        let mut out = Vec::with_capacity(edge * edge);
        for i in 0..edge {
            let row = (chip.0 * edge + i) * size + chip.1 * edge;
            out.extend_from_slice(&field[row..row + edge]);
        }
        out
    }

    /// Fine binary water mask of one chip: `elevation < level`.
    pub fn water_mask(&self, chip: (usize, usize), level: f64) -> Vec<bool> {
        self.chip_fine(&self.terrain.elevation, chip).into_iter().map(|e| e < level).collect()
    }

    /// Fractional inundation target of one chip.
    pub fn target(&self, chip: (usize, usize), level: f64) -> Result<Vec<f64>> {
        let edge = CHIP_SIZE * self.params.fine_factor;
        fractional_upscale(&self.water_mask(chip, level), edge, edge, self.params.fine_factor)
    }

    fn coarse_mean(&self, field: &[f64], chip: (usize, usize)) -> Vec<f64> {
        let f = self.params.fine_factor;
        let edge = CHIP_SIZE * f;
        let fine = self.chip_fine(field, chip);
        let mut out = vec![0.0; HW];
        for i in 0..edge {
            for j in 0..edge {
                out[(i / f) * CHIP_SIZE + j / f] += fine[i * edge + j];
            }
        }
        let n = (f * f) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Normalised elevation, slope and HAND bands of one chip.
    pub fn statics(&self, chip: (usize, usize)) -> Result<StaticBands> {
        let elev = normalize_elevation(&self.coarse_mean(&self.terrain.elevation, chip));
        let slope = normalize_slope(&self.coarse_mean(&self.terrain.slope, chip))?;
        let hand = normalize_hand(&self.coarse_mean(&self.terrain.hand, chip), DEFAULT_HAND_MAX)?;
        StaticBands::new(&elev, &slope, &hand)
    }

    fn chip_vegetation(&self, chip: (usize, usize)) -> Vec<f64> {
        let cells = self.params.grid * CHIP_SIZE;
        let mut out = Vec::with_capacity(HW);
        for i in 0..CHIP_SIZE {
            let row = (chip.0 * CHIP_SIZE + i) * cells + chip.1 * CHIP_SIZE;
            out.extend_from_slice(&self.vegetation[row..row + CHIP_SIZE]);
        }
        out
    }

    /// Whether a chip composite is hidden by cloud.
    pub fn occluded(&self, chip: (usize, usize), key: CompositeKey) -> bool {
        let mut rng = stream(self.params.seed, TAG_CLOUD, self.chip_id(chip), key_id(key));
        rng.random::<f64>() < self.params.cloud_prob
    }

    fn chip_id(&self, chip: (usize, usize)) -> u64 {
        (chip.0 * self.params.grid + chip.1) as u64
    }

    /// Normalised optical bands (`7×32×32`) and target (`32×32`) of one chip
    /// composite.
    pub fn render_composite(&self, chip: (usize, usize), key: CompositeKey, occluded: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let target = self.target(chip, self.level(key))?;
        let mut raw = vec![0i32; N_OPTICAL * HW];
        if occluded {
            raw.fill(CLOUD_RAW);
        } else {
            let veg = self.chip_vegetation(chip);
            let mut rng = stream(self.params.seed, TAG_NOISE, self.chip_id(chip), key_id(key));
            let sigma = self.params.noise_scale * 10_000.0;
            for px in 0..HW {
                let refl = mixed_reflectance(target[px], veg[px]);
                for (b, r) in refl.iter().enumerate() {
                    let n: f64 = rng.sample(StandardNormal);
                    raw[b * HW + px] = (r + sigma * n).round() as i32;
                }
            }
        }
        Ok((normalize_modis(&raw), target))
    }

    /// Every sample of one chip: composites of each configured year at the
    /// sample stride, each with its 9-composite history.
    pub fn chip_samples(&self, chip: (usize, usize)) -> Result<Vec<Chip>> {
        let statics = self.statics(chip)?;
        let mut series = CompositeSeries::new();
        let mut targets = std::collections::BTreeMap::new();
        let mut keys = Vec::new();
        for &year in &self.params.years {
            let mut k = CompositeKey { year, index: 0 };
            for _ in 0..SEQ_LEN - 1 {
                k = previous_composite(k);
            }
            for _ in 0..SEQ_LEN - 1 {
                keys.push(k);
                k = CompositeKey { year: k.year, index: k.index + 1 };
                if k.index == COMPOSITES_PER_YEAR {
                    k = CompositeKey { year: k.year + 1, index: 0 };
                }
            }
            keys.extend((0..COMPOSITES_PER_YEAR).map(|index| CompositeKey { year, index }));
        }
        for key in keys {
            if series.get(key).is_some() {
                continue;
            }
            let (optical, target) = self.render_composite(chip, key, self.occluded(chip, key))?;
            series.insert(key, optical)?;
            targets.insert(key, target);
        }
        let mut out = Vec::new();
        for &year in &self.params.years {
            for index in (0..COMPOSITES_PER_YEAR).step_by(self.params.sample_stride as usize) {
                let key = CompositeKey { year, index };
                let date = composite_start(key);
                let features = assemble_sequence(date, &series, &statics)?;
                let target = targets[&key].iter().map(|&v| v as f32).collect();
                out.push(Chip { features, target, year, date, grid_pos: (chip.0 as u32, chip.1 as u32) });
            }
        }
        Ok(out)
    }

    /// All samples, ordered by date then grid position.
    pub fn samples(&self) -> Result<Vec<Chip>> {
        let g = self.params.grid;
        let mut out = Vec::new();
        for r in 0..g {
            for c in 0..g {
                out.extend(self.chip_samples((r, c))?);
            }
        }
        out.sort_by_key(|c| (c.date, c.grid_pos));
        Ok(out)
    }
}

fn key_id(key: CompositeKey) -> u64 {
    ((key.year as i64 as u64) << 8) | key.index as u64
}

/// In-memory synthetic dataset.
pub fn generate(params: &SceneParams) -> Result<Vec<Chip>> {
    LatentScene::generate(params)?.samples()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "scene.json";

/// Writes every sample under `out/chips/` with `out/manifest.json` and the
/// scene parameters in `out/scene.json`.
pub fn write_dataset(params: &SceneParams, out: &Path) -> Result<ChipManifest> {
    let chips = generate(params)?;
    let dir = out.join("chips");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(chips.len());
    for chip in &chips {
        let stem = format!("{}_{}_r{:02}_c{:02}", chip.year, chip.date.format("%m%d"), chip.grid_pos.0, chip.grid_pos.1);
        write_chip(chip, &dir, &stem)?;
        records.push(ChipRecord {
            path: format!("chips/{stem}.bin"),
            year: chip.year,
            date: chip.date,
            grid_pos: chip.grid_pos,
            missing_pixels: chip.missing_pixels(),
            complete: true,
        });
    }
    let manifest = ChipManifest::new(records, CompletenessRule::Strict);
    manifest.save(&out.join(MANIFEST_FILE))?;
    let p = out.join(PARAMS_FILE);
    fs::write(&p, serde_json::to_vec_pretty(params)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}
