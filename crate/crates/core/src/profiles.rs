//! Accuracy profiles: per-group probability mass functions over calibrated
//! scores, and the calibrated joint distribution they induce.
//!
//! Under groupwise calibration the joint law of (score, true type) within a
//! group is fully determined by the score PMF: `Pr[Y = 1, S = s] = s * P(s)`.
//! Everything downstream (statistics, threshold searches, deferral policies)
//! is computed from these PMFs rather than by sampling.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{Score, ScoreError, ScoreGrid};

/// Tolerance for "sums to one" and similar probability identities.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("group {0}: probability mass {1} at score {2} is negative")]
    NegativeMass(GroupId, f64, Score),
    #[error("group {0}: masses sum to {1}, expected 1")]
    NotNormalized(GroupId, f64),
    #[error("group {0}: profile has empty support")]
    EmptySupport(GroupId),
    #[error("profile family has no groups")]
    EmptyFamily,
    #[error("common support of the profile family is empty")]
    EmptyCommonSupport,
    #[error("group {0} has no rows in the dataset")]
    EmptyGroup(GroupId),
    #[error("malformed profile JSON: {0}")]
    Json(String),
}

/// Identifier for a protected group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(String);

impl GroupId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for GroupId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Finite PMF over calibrated scores for one group.
///
/// Zero-mass entries are dropped at construction, so the key set *is* the
/// support. Masses are non-negative and sum to 1 within [`PROB_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyProfile {
    group: GroupId,
    mass: BTreeMap<Score, f64>,
}

impl AccuracyProfile {
    pub fn new(
        group: impl Into<GroupId>,
        mass: impl IntoIterator<Item = (Score, f64)>,
    ) -> Result<Self, ProfileError> {
        let group = group.into();
        let mut map = BTreeMap::new();
        for (score, p) in mass {
            if p < 0.0 || !p.is_finite() {
                return Err(ProfileError::NegativeMass(group, p, score));
            }
            if p > 0.0 {
                *map.entry(score).or_insert(0.0) += p;
            }
        }
        if map.is_empty() {
            return Err(ProfileError::EmptySupport(group));
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(ProfileError::NotNormalized(group, total));
        }
        Ok(Self { group, mass: map })
    }

    /// Build from non-negative weights, normalizing to a PMF.
    pub fn from_weights(
        group: impl Into<GroupId>,
        weights: impl IntoIterator<Item = (Score, f64)>,
    ) -> Result<Self, ProfileError> {
        let group = group.into();
        let mut map = BTreeMap::new();
        for (score, w) in weights {
            if w < 0.0 || !w.is_finite() {
                return Err(ProfileError::NegativeMass(group, w, score));
            }
            if w > 0.0 {
                *map.entry(score).or_insert(0.0) += w;
            }
        }
        if map.is_empty() {
            return Err(ProfileError::EmptySupport(group));
        }
        let total: f64 = map.values().sum();
        for p in map.values_mut() {
            *p /= total;
        }
        Ok(Self { group, mass: map })
    }

    pub fn group(&self) -> &GroupId {
        &self.group
    }

    /// Mass at a score; zero off the support.
    pub fn mass(&self, score: Score) -> f64 {
        self.mass.get(&score).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Score, f64)> + '_ {
        self.mass.iter().map(|(s, p)| (*s, *p))
    }

    pub fn support(&self) -> impl Iterator<Item = Score> + '_ {
        self.mass.keys().copied()
    }

    pub fn support_len(&self) -> usize {
        self.mass.len()
    }

    pub fn min_support(&self) -> Score {
        *self.mass.keys().next().expect("support is nonempty")
    }

    pub fn max_support(&self) -> Score {
        *self.mass.keys().next_back().expect("support is nonempty")
    }

    /// Mean assigned score. Under groupwise calibration this equals the
    /// group's base rate.
    pub fn base_rate(&self) -> f64 {
        self.mass.iter().map(|(s, p)| s.value() * p).sum()
    }

    pub fn with_group(&self, group: impl Into<GroupId>) -> Self {
        Self {
            group: group.into(),
            mass: self.mass.clone(),
        }
    }
}

/// Total variation distance: half the L1 distance over the union of supports.
pub fn tv_distance(a: &AccuracyProfile, b: &AccuracyProfile) -> f64 {
    let mut union: Vec<Score> = a.support().collect();
    union.extend(b.support());
    union.sort_unstable();
    union.dedup();
    0.5 * union
        .into_iter()
        .map(|s| (a.mass(s) - b.mass(s)).abs())
        .sum::<f64>()
}

/// Collection of accuracy profiles over a shared group set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileFamily {
    profiles: BTreeMap<GroupId, AccuracyProfile>,
}

impl ProfileFamily {
    pub fn new(profiles: impl IntoIterator<Item = AccuracyProfile>) -> Result<Self, ProfileError> {
        let mut map = BTreeMap::new();
        for ap in profiles {
            map.insert(ap.group().clone(), ap);
        }
        if map.is_empty() {
            return Err(ProfileError::EmptyFamily);
        }
        Ok(Self { profiles: map })
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupId> {
        self.profiles.keys()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, group: &GroupId) -> Option<&AccuracyProfile> {
        self.profiles.get(group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, &AccuracyProfile)> {
        self.profiles.iter()
    }

    /// All groups share the same support.
    pub fn is_nice(&self) -> bool {
        let mut iter = self.profiles.values();
        let first: Vec<Score> = match iter.next() {
            Some(ap) => ap.support().collect(),
            None => return true,
        };
        iter.all(|ap| ap.support().eq(first.iter().copied()))
    }

    /// Scores present in every group's support, in ascending order.
    pub fn common_support(&self) -> Vec<Score> {
        let mut iter = self.profiles.values();
        let first = iter.next().expect("family is nonempty");
        first
            .support()
            .filter(|s| self.profiles.values().all(|ap| ap.mass(*s) > 0.0))
            .collect()
    }

    /// The PMF proportional to the pointwise minimum of the family's profiles,
    /// supported on the common support.
    ///
    /// For two groups, `1 - pre-normalization total` equals their total
    /// variation distance.
    pub fn pointwise_min_normalized(&self) -> Result<AccuracyProfile, ProfileError> {
        let common = self.common_support();
        if common.is_empty() {
            return Err(ProfileError::EmptyCommonSupport);
        }
        let weights: Vec<(Score, f64)> = common
            .into_iter()
            .map(|s| {
                let min = self
                    .profiles
                    .values()
                    .map(|ap| ap.mass(s))
                    .fold(f64::INFINITY, f64::min);
                (s, min)
            })
            .collect();
        AccuracyProfile::from_weights("pointwise_min", weights)
    }

    /// Pre-normalization total of the pointwise minimum on the common support.
    pub fn pointwise_min_total(&self) -> f64 {
        self.common_support()
            .into_iter()
            .map(|s| {
                self.profiles
                    .values()
                    .map(|ap| ap.mass(s))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }
}

/// Whether a joint (score, label) law is induced analytically by calibration
/// or backed by an empirical dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointSemantics {
    Analytic,
    Empirical,
}

/// A profile family together with the joint-law semantics it carries.
///
/// In analytic mode `Pr[Y = 1, S = s] = s * P_g(s)` by construction, so
/// `Pr[Y = 1 | S = s] = s` exactly on every support point.
#[derive(Debug, Clone)]
pub struct CalibratedJoint {
    family: ProfileFamily,
    semantics: JointSemantics,
}

impl CalibratedJoint {
    pub fn analytic(family: ProfileFamily) -> Self {
        Self {
            family,
            semantics: JointSemantics::Analytic,
        }
    }

    pub fn empirical(family: ProfileFamily) -> Self {
        Self {
            family,
            semantics: JointSemantics::Empirical,
        }
    }

    pub fn family(&self) -> &ProfileFamily {
        &self.family
    }

    pub fn semantics(&self) -> JointSemantics {
        self.semantics
    }

    /// `Pr[S = s, Y = y]` within a group, under the calibration identity.
    pub fn joint_mass(&self, group: &GroupId, score: Score, label: bool) -> f64 {
        let Some(ap) = self.family.get(group) else {
            return 0.0;
        };
        let p = ap.mass(score);
        if label {
            score.value() * p
        } else {
            (1.0 - score.value()) * p
        }
    }
}

// --- serialization ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MassPointJson {
    score: f64,
    p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileJson {
    group: String,
    mass: Vec<MassPointJson>,
}

impl AccuracyProfile {
    pub fn to_json(&self) -> serde_json::Value {
        let doc = ProfileJson {
            group: self.group.as_str().to_owned(),
            mass: self
                .iter()
                .map(|(s, p)| MassPointJson {
                    score: s.value(),
                    p,
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("profile serializes")
    }

    /// Parse the `{"group": ..., "mass": [{"score": ..., "p": ...}]}` document,
    /// snapping scores to `grid`.
    pub fn from_json(value: &serde_json::Value, grid: &ScoreGrid) -> Result<Self, ProfileError> {
        let doc: ProfileJson = serde_json::from_value(value.clone())
            .map_err(|e| ProfileError::Json(e.to_string()))?;
        let mut mass = Vec::with_capacity(doc.mass.len());
        for point in doc.mass {
            mass.push((grid.snap(point.score)?, point.p));
        }
        AccuracyProfile::new(doc.group, mass)
    }
}

impl ProfileFamily {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(self.profiles.values().map(|ap| ap.to_json()).collect())
    }

    pub fn from_json(value: &serde_json::Value, grid: &ScoreGrid) -> Result<Self, ProfileError> {
        let arr = value
            .as_array()
            .ok_or_else(|| ProfileError::Json("expected an array of profiles".into()))?;
        let profiles = arr
            .iter()
            .map(|v| AccuracyProfile::from_json(v, grid))
            .collect::<Result<Vec<_>, _>>()?;
        ProfileFamily::new(profiles)
    }
}
