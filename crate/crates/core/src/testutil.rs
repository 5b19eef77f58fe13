//! Shared helpers for unit tests.

use crate::profiles::{AccuracyProfile, ProfileFamily};
use crate::score::Score;

pub fn score(v: f64) -> Score {
    Score::new(v).unwrap()
}

pub fn profile(group: &str, points: &[(f64, f64)]) -> AccuracyProfile {
    AccuracyProfile::new(group, points.iter().map(|&(s, p)| (score(s), p)))
        .unwrap()
}

pub fn family(profiles: &[AccuracyProfile]) -> ProfileFamily {
    ProfileFamily::new(profiles.iter().cloned()).unwrap()
}
