//! Chip construction and feature engineering.

mod augment;
mod chip;
mod manifest;
mod normalize;
mod sequence;
mod upscale;

pub use augment::{augment_chip, Dihedral};
pub use chip::{read_chip, write_chip, Chip, ChipSidecar, BAND_NAMES, CHIP_SCHEMA_VERSION};
pub use manifest::{cv_split, ChipManifest, ChipRecord, CompletenessRule, CvSplit, Dataset, MANIFEST_SCHEMA_VERSION};
pub use normalize::{
    normalize_elevation, normalize_hand, normalize_modis, normalize_slope, DEFAULT_HAND_MAX, ELEVATION_MAX, MODIS_MAX,
    MODIS_MIN,
};
pub use sequence::{
    assemble_sequence, composite_index, composite_start, previous_composite, CompositeKey, CompositeSeries,
    StaticBands, COMPOSITES_PER_YEAR, COMPOSITE_DAYS,
};
pub use upscale::fractional_upscale;
