//! Scores on a canonical decimal grid.
//!
//! Probability-mass functions over scores are keyed by exact score values, so
//! two scores must compare equal iff they denote the same grid point. Raw
//! floating-point comparison breaks that (e.g. mass placed exactly at a
//! threshold), so every score is snapped to a decimal grid at construction and
//! compares by its snapped representation.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::Serialize;
use thiserror::Error;

/// Default grid resolution: one millionth.
pub const DEFAULT_GRID_RESOLUTION: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("score {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("score {0} is not finite")]
    NotFinite(f64),
    #[error("grid resolution {0} must lie in (0, 1]")]
    BadResolution(f64),
}

/// Decimal grid that scores snap to at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreGrid {
    resolution: f64,
}

impl Default for ScoreGrid {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_GRID_RESOLUTION,
        }
    }
}

impl ScoreGrid {
    pub fn new(resolution: f64) -> Result<Self, ScoreError> {
        if !resolution.is_finite() || resolution <= 0.0 || resolution > 1.0 {
            return Err(ScoreError::BadResolution(resolution));
        }
        Ok(Self { resolution })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Snap a raw value to the nearest grid point in `[0, 1]`.
    pub fn snap(&self, raw: f64) -> Result<Score, ScoreError> {
        if !raw.is_finite() {
            return Err(ScoreError::NotFinite(raw));
        }
        let ticks = (raw / self.resolution).round();
        let mut snapped = ticks * self.resolution;
        if snapped == 0.0 {
            snapped = 0.0; // normalize -0.0
        }
        if !(0.0..=1.0).contains(&snapped) {
            return Err(ScoreError::OutOfRange(raw));
        }
        Ok(Score(snapped))
    }
}

/// A calibrated score in `[0, 1]`, snapped to its grid.
///
/// Equality, ordering, and hashing all go through the snapped value, so grid
/// points are exact map keys.
#[derive(Debug, Clone, Copy, Serialize)]
#[serde(transparent)]
pub struct Score(f64);

impl Score {
    /// Snap with the default grid.
    pub fn new(raw: f64) -> Result<Self, ScoreError> {
        ScoreGrid::default().snap(raw)
    }

    /// Keep the value at full precision instead of rounding to a grid.
    ///
    /// For empirically derived rates (a count divided by a count) the exact
    /// quotient is already a canonical key: recomputing it from the same
    /// data yields the same bits. Rounding such rates to a coarse grid would
    /// break the exact-calibration identities downstream.
    pub fn exact(raw: f64) -> Result<Self, ScoreError> {
        if !raw.is_finite() {
            return Err(ScoreError::NotFinite(raw));
        }
        if !(0.0..=1.0).contains(&raw) {
            return Err(ScoreError::OutOfRange(raw));
        }
        Ok(Self(if raw == 0.0 { 0.0 } else { raw }))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl PartialEq for Score {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        // Scores are finite by construction.
        self.0.partial_cmp(&other.0).expect("scores are finite")
    }
}

impl Hash for Score {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snap_rounds_to_grid() {
        let grid = ScoreGrid::default();
        let a = grid.snap(0.1234567).unwrap();
        let b = grid.snap(0.1234571).unwrap();
        assert_eq!(a, b);
        assert!((a.value() - 0.123457).abs() < 1e-12);
    }

    #[test]
    fn snapped_scores_are_exact_keys() {
        let grid = ScoreGrid::default();
        let a = grid.snap(0.1 + 0.2).unwrap();
        let b = grid.snap(0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_zero_normalizes() {
        let grid = ScoreGrid::default();
        let a = grid.snap(-1e-9).unwrap();
        let b = grid.snap(0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_rejected() {
        let grid = ScoreGrid::default();
        assert!(matches!(grid.snap(1.5), Err(ScoreError::OutOfRange(_))));
        assert!(matches!(grid.snap(-0.2), Err(ScoreError::OutOfRange(_))));
        assert!(matches!(grid.snap(f64::NAN), Err(ScoreError::NotFinite(_))));
    }

    #[test]
    fn bad_resolution_rejected() {
        assert!(ScoreGrid::new(0.0).is_err());
        assert!(ScoreGrid::new(2.0).is_err());
        assert!(ScoreGrid::new(1e-3).is_ok());
    }

    #[test]
    fn coarse_grid_merges_nearby_scores() {
        let grid = ScoreGrid::new(0.1).unwrap();
        assert_eq!(grid.snap(0.52).unwrap(), grid.snap(0.49).unwrap());
    }
}
