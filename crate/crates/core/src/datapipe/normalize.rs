//! Fixed-range feature normalisers. Every output lies in `[0, 1]`;
//! out-of-range inputs are clamped, never rescaled per scene.

use crate::error::{Error, Result};

/// Surface-reflectance sensor range used for min-max scaling.
pub const MODIS_MIN: f64 = -100.0;
pub const MODIS_MAX: f64 = 16_000.0;
/// Elevation range in metres.
pub const ELEVATION_MAX: f64 = 100.0;
/// Default HAND upper bound in metres.
pub const DEFAULT_HAND_MAX: f64 = 100.0;

/// `clamp((raw + 100) / 16100, 0, 1)`.
pub fn normalize_modis(raw: &[i32]) -> Vec<f64> {
    let mut clamped = 0usize;
    let out = raw
        .iter()
        .map(|&r| {
            let v = (r as f64 - MODIS_MIN) / (MODIS_MAX - MODIS_MIN);
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    if clamped > 0 {
        log::debug!("normalize_modis: clamped {clamped} out-of-range values");
    }
    out
}

/// `clamp(elev / 100, 0, 1)`.
pub fn normalize_elevation(elev_m: &[f64]) -> Vec<f64> {
    elev_m.iter().map(|e| (e / ELEVATION_MAX).clamp(0.0, 1.0)).collect()
}

/// `tanh(slope)` for a dimensionless rise/run slope.
pub fn normalize_slope(slope: &[f64]) -> Result<Vec<f64>> {
    if let Some(s) = slope.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("slope must be non-negative, got {s}")));
    }
    Ok(slope.iter().map(|s| s.tanh()).collect())
}

/// `clamp(ln(1 + hand) / ln(1 + h_max), 0, 1)`.
pub fn normalize_hand(hand_m: &[f64], h_max: f64) -> Result<Vec<f64>> {
    if !(h_max > 0.0) {
        return Err(Error::invalid(format!("HAND upper bound must be positive, got {h_max}")));
    }
    let denom = h_max.ln_1p();
    Ok(hand_m.iter().map(|h| (h.max(0.0).ln_1p() / denom).clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn modis_range_endpoints() {
        assert_eq!(normalize_modis(&[-100, 16_000, 7_950]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_modis(&[-5_000, 30_000]), vec![0.0, 1.0]);
    }

    #[test]
    fn elevation_range_and_clamp() {
        assert_eq!(normalize_elevation(&[0.0, 100.0, 50.0, 250.0, -3.0]), vec![0.0, 1.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn slope_tanh() {
        let v = normalize_slope(&[0.0, 1.0, 10.0]).unwrap();
        assert_eq!(v[0], 0.0);
        // tanh(1) = (e² - 1) / (e² + 1)
        let e2 = std::f64::consts::E.powi(2);
        assert!((v[1] - (e2 - 1.0) / (e2 + 1.0)).abs() < 1e-15);
        assert!((v[1] - 0.7616).abs() < 1e-4);
        assert!((1.0 - v[2]).abs() < 1e-8);
        assert!(normalize_slope(&[0.5, -0.1]).is_err());
    }

    #[test]
    fn hand_log_scaling() {
        let v = normalize_hand(&[0.0, 100.0, 5.0], 100.0).unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0).abs() < 1e-15);
        assert!((v[2] - 6f64.ln() / 101f64.ln()).abs() < 1e-15);
        assert!((v[2] - 0.3882).abs() < 1e-4);
        assert!(normalize_hand(&[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn normalizers_monotone_and_bounded(a in -1e3f64..2e4, b in -1e3f64..2e4) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m = normalize_modis(&[lo as i32, hi as i32]);
            prop_assert!(m[0] <= m[1] && (0.0..=1.0).contains(&m[0]) && (0.0..=1.0).contains(&m[1]));
            let e = normalize_elevation(&[lo, hi]);
            prop_assert!(e[0] <= e[1] && (0.0..=1.0).contains(&e[0]) && (0.0..=1.0).contains(&e[1]));
            let (slo, shi) = (lo.abs().min(hi.abs()), lo.abs().max(hi.abs()));
            let s = normalize_slope(&[slo, shi]).unwrap();
            prop_assert!(s[0] <= s[1] && (0.0..=1.0).contains(&s[0]) && (0.0..=1.0).contains(&s[1]));
            let h = normalize_hand(&[slo, shi], 100.0).unwrap();
            prop_assert!(h[0] <= h[1] && (0.0..=1.0).contains(&h[0]) && (0.0..=1.0).contains(&h[1]));
        }
    }
}
