//! Post-processing of groupwise-calibrated soft classifiers into hard
//! classifiers that equalize chosen group statistics, with optional
//! deferrals.
//!
//! The library is organized around a few small pieces:
//!
//! - [`score`]: scores on a canonical decimal grid, so PMFs have exact keys.
//! - [`profiles`]: per-group score PMFs (accuracy profiles) and the
//!   calibrated joint law they induce.
//! - [`metrics`]: the full statistic vector (base rate, PPV, NPV, FPR, FNR,
//!   conditional and unconditional deferring variants) for analytic and
//!   empirical inputs.
//! - [`thresholding`]: randomized threshold rules, two-threshold deferring
//!   rules, and searches that equalize PPV and/or NPV across groups.
//! - [`deferral`]: deferral policies that reshape conditional score
//!   distributions into any target, and the experiment strategies built on
//!   them.
//! - [`mass_averaging`]: a soft post-processor that equalizes score
//!   distributions without deferrals, found by a small linear program.
//! - [`oracle`]: brute-force enumeration used to cross-check every statistic
//!   and to verify the possibility/impossibility claims the constructions
//!   rest on.
//! - [`ingest`]: CSV loading and exact per-bucket recalibration.
//! - [`cli`]: the command implementations behind the `fairpost` binary.

pub mod cli;
pub mod deferral;
pub mod ingest;
pub mod mass_averaging;
pub mod metrics;
pub mod oracle;
pub mod profiles;
pub mod score;
mod simplex;
pub mod thresholding;

#[cfg(test)]
pub(crate) mod testutil;

pub use profiles::{AccuracyProfile, GroupId, ProfileFamily};
pub use score::{Score, ScoreGrid};
