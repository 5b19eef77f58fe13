//! Implementations of the `fairpost` subcommands.
//!
//! Each command loads CSV data (where applicable), produces a
//! [`RunReport`], and optionally writes the report plus plot-ready artifacts
//! into an output directory. Reports are deterministic: with
//! `no_timestamp` set, identical inputs and configuration produce
//! byte-identical JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::deferral::{self, DeferralError};
use crate::ingest::{
    self, Bucketing, IngestConfig, IngestError, RecalibratedData, ScoreAxis,
};
use crate::mass_averaging::{self, MassAveragingError};
use crate::metrics::{
    self, assert_equalized, DecisionRule, EvalMode, GroupStats, HardRule, StatField,
};
use crate::oracle::{self, GridSpec, ParabolaInstance};
use crate::profiles::{tv_distance, GroupId, ProfileFamily};
use crate::score::{Score, ScoreGrid};
use crate::thresholding::{self, ThresholdError};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input file, configuration, or usage. Exit code 2.
    #[error("input error: {0}")]
    Input(String),
    /// The requested equalization is infeasible on this data. Exit code 3.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// A verification assertion failed. Exit code 4.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Threshold(t) => t.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ThresholdError> for CliError {
    fn from(e: ThresholdError) -> Self {
        CliError::Infeasible(e.to_string())
    }
}

impl From<DeferralError> for CliError {
    fn from(e: DeferralError) -> Self {
        CliError::Infeasible(e.to_string())
    }
}

impl From<MassAveragingError> for CliError {
    fn from(e: MassAveragingError) -> Self {
        match &e {
            MassAveragingError::UnequalBaseRates { .. } => CliError::Infeasible(format!(
                "{e}; try --mode ap-defer, which handles unequal base rates"
            )),
            _ => CliError::Infeasible(e.to_string()),
        }
    }
}

/// Shared data-loading and reporting options.
#[derive(Debug, Clone)]
pub struct CommonConfig {
    pub input: PathBuf,
    pub score_col: String,
    pub label_col: String,
    pub group_col: String,
    pub groups: Option<Vec<String>>,
    pub bucket: Bucketing,
    pub min_bucket_count: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub no_timestamp: bool,
    pub grid: ScoreGrid,
}

impl CommonConfig {
    pub fn new(input: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            score_col: "score".to_owned(),
            label_col: "label".to_owned(),
            group_col: "group".to_owned(),
            groups: None,
            bucket: Bucketing::Identity,
            min_bucket_count: 1,
            tolerance: 1e-3,
            seed: 0,
            out: None,
            no_timestamp: false,
            grid: ScoreGrid::default(),
        }
    }

    fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            score_col: self.score_col.clone(),
            label_col: self.label_col.clone(),
            group_col: self.group_col.clone(),
            groups: self.groups.clone(),
            bucketing: self.bucket.clone(),
            min_bucket_count: self.min_bucket_count,
            max_bad_rows: 0,
            grid: self.grid,
        }
    }

    fn echo(&self) -> serde_json::Value {
        json!({
            "input": self.input.display().to_string(),
            "score_col": self.score_col,
            "label_col": self.label_col,
            "group_col": self.group_col,
            "groups": self.groups,
            "bucket": self.bucket,
            "min_bucket_count": self.min_bucket_count,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "grid_resolution": self.grid.resolution(),
        })
    }
}

/// Equalization mode of `fairpost equalize`.
#[derive(Debug, Clone)]
pub enum EqualizeMode {
    Ppv { target: Option<f64> },
    Npv { target: Option<f64> },
    /// With targets, runs the two-threshold construction; without, searches
    /// deterministic two-threshold rules for the best achievable gap.
    PpvNpvDefer { ppv: Option<f64>, npv: Option<f64> },
    ApDefer { strategy: DeferStrategy },
    MassAverage,
}

#[derive(Debug, Clone)]
pub enum DeferStrategy {
    /// Defer only on non-anchor groups, matching the anchor's distribution.
    Match(String),
    /// Defer all groups toward the pointwise-minimum distribution.
    Min,
}

/// Everything needed to reproduce a run, plus its outcome.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u128>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats_before: Option<BTreeMap<GroupId, GroupStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats_after: Option<BTreeMap<GroupId, GroupStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deferral: Option<DeferralSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equalization: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
    pub output_files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeferralSummary {
    /// Deferral probability mass per group.
    pub per_group: BTreeMap<GroupId, f64>,
    /// Deferred fraction of all decisions (group masses weighted by size).
    pub total_fraction: f64,
}

impl RunReport {
    fn new(command: &str, config: serde_json::Value, no_timestamp: bool, started: Instant) -> Self {
        let (timestamp_unix, wall_ms) = if no_timestamp {
            (None, None)
        } else {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            (Some(now), Some(started.elapsed().as_millis()))
        };
        Self {
            command: command.to_owned(),
            config,
            timestamp_unix,
            wall_ms,
            stats_before: None,
            stats_after: None,
            rule: None,
            policy: None,
            deferral: None,
            equalization: None,
            details: None,
            output_files: Vec::new(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn write_file(dir: &Path, name: &str, content: &str, files: &mut Vec<String>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    files.push(path.display().to_string());
    Ok(())
}

fn load(config: &CommonConfig) -> Result<RecalibratedData, CliError> {
    let ingest_config = config.ingest_config();
    let dataset = ingest::load_csv(&config.input, &ingest_config)?;
    Ok(ingest::recalibrate(&dataset, &ingest_config)?)
}

/// The default decision rule reports are computed against: a group-blind
/// threshold at one half on calibrated scores.
fn baseline_rule() -> HardRule {
    HardRule::blind(DecisionRule::Threshold {
        tau: Score::new(0.5).expect("constant in range"),
        r: 1.0,
    })
}

fn empirical_stats(
    data: &RecalibratedData,
    rule: &HardRule,
    axis: ScoreAxis,
) -> Result<BTreeMap<GroupId, GroupStats>, CliError> {
    let rows = data.dataset.labeled_scores(axis)?;
    metrics::stats_empirical(&rows, rule, EvalMode::Expectation)
        .map_err(|e| CliError::Input(e.to_string()))
}

fn pairwise_tv(family: &ProfileFamily) -> BTreeMap<String, f64> {
    let groups: Vec<&GroupId> = family.groups().collect();
    let mut out = BTreeMap::new();
    for (i, a) in groups.iter().enumerate() {
        for b in groups.iter().skip(i + 1) {
            let d = tv_distance(
                family.get(a).expect("group present"),
                family.get(b).expect("group present"),
            );
            out.insert(format!("{a}|{b}"), d);
        }
    }
    out
}

// --- stats ------------------------------------------------------------------

/// Per-group score distributions, counts, pairwise distribution distances,
/// and statistics under the baseline rule.
pub fn cmd_stats(config: &CommonConfig) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let data = load(config)?;
    let mut report = RunReport::new("stats", config.echo(), config.no_timestamp, started);

    let baseline = baseline_rule();
    let stats = empirical_stats(&data, &baseline, ScoreAxis::Calibrated)?;
    let calibration = ingest::validate_calibration(&data.dataset, ScoreAxis::Calibrated, config.tolerance)?;

    report.details = Some(json!({
        "group_counts": data.dataset.group_counts(),
        "dropped_missing_label": data.dataset.dropped_missing_label(),
        "profiles_calibrated": data.family.to_json(),
        "profiles_bucket_axis": data.buckets.axis_family().to_json(),
        "tv_calibrated": pairwise_tv(&data.family),
        "tv_bucket_axis": pairwise_tv(data.buckets.axis_family()),
        "baseline_rule": "group-blind threshold at 0.5 on calibrated scores",
        "calibration_max_deviation": calibration.max_deviation,
    }));
    report.stats_before = Some(stats.clone());

    if let Some(dir) = &config.out {
        write_file(dir, "stats.csv", &metrics::stats_to_csv(&stats), &mut report.output_files)?;
        write_file(
            dir,
            "profiles.json",
            &serde_json::to_string_pretty(&data.family.to_json()).expect("profiles serialize"),
            &mut report.output_files,
        )?;
        write_file(dir, "dataset.jsonl", &data.dataset.to_jsonl(), &mut report.output_files)?;
        let rendered = report.to_json_string();
        write_file(dir, "report.json", &rendered, &mut report.output_files)?;
    }
    Ok(report)
}

// --- equalize ----------------------------------------------------------------

/// Blind threshold at the weighted median of the shared conditional
/// distribution, used to report post-deferral statistics.
fn median_blind_rule(shared: &crate::profiles::AccuracyProfile) -> HardRule {
    let mut cdf = 0.0;
    let mut median = shared.max_support();
    for (s, p) in shared.iter() {
        cdf += p;
        if cdf >= 0.5 {
            median = s;
            break;
        }
    }
    HardRule::blind(DecisionRule::Threshold { tau: median, r: 1.0 })
}

pub fn cmd_equalize(config: &CommonConfig, mode: &EqualizeMode) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let data = load(config)?;
    let mut report = RunReport::new("equalize", config.echo(), config.no_timestamp, started);
    report.stats_before = Some(empirical_stats(&data, &baseline_rule(), ScoreAxis::Calibrated)?);

    match mode {
        EqualizeMode::Ppv { target } => {
            let (lo, hi) = data.buckets.ppv_target_range();
            let target = target.unwrap_or((lo + hi) / 2.0);
            let rule = data.buckets.equalize_ppv(target)?;
            let hard = rule.to_hard_rule();
            let stats = empirical_stats(&data, &hard, ScoreAxis::Bucket)?;
            let eq = assert_equalized(&stats, &[StatField::Ppv], config.tolerance);
            report.rule = Some(rule.to_json());
            report.stats_after = Some(stats);
            report.equalization = Some(json!({
                "target": target,
                "feasible_interval": [lo, hi],
                "report": eq,
            }));
            report.details = Some(json!({"mode": "ppv", "axis": "bucket"}));
            if !eq.equalized {
                return Err(CliError::Infeasible(format!(
                    "ppv gaps exceed tolerance {}: {:?}",
                    config.tolerance, eq.gaps
                )));
            }
        }
        EqualizeMode::Npv { target } => {
            let (lo, hi) = data.buckets.npv_target_range();
            let target = target.unwrap_or((lo + hi) / 2.0);
            let rule = data.buckets.equalize_npv(target)?;
            let hard = rule.to_hard_rule();
            let stats = empirical_stats(&data, &hard, ScoreAxis::Bucket)?;
            let eq = assert_equalized(&stats, &[StatField::Npv], config.tolerance);
            report.rule = Some(rule.to_json());
            report.stats_after = Some(stats);
            report.equalization = Some(json!({
                "target": target,
                "feasible_interval": [lo, hi],
                "report": eq,
            }));
            report.details = Some(json!({"mode": "npv", "axis": "bucket"}));
            if !eq.equalized {
                return Err(CliError::Infeasible(format!(
                    "npv gaps exceed tolerance {}: {:?}",
                    config.tolerance, eq.gaps
                )));
            }
        }
        EqualizeMode::PpvNpvDefer { ppv, npv } => {
            let (rule, searched_gap) = match (ppv, npv) {
                (Some(ppv), Some(npv)) => {
                    (data.buckets.equalize_ppv_npv_deferring(*ppv, *npv)?, None)
                }
                (None, None) => {
                    let (rule, gap, _) = data
                        .buckets
                        .search_deferring_thresholds(config.tolerance)
                        .ok_or_else(|| {
                            CliError::Input(
                                "the target-free search handles exactly two groups; pass --target <ppv>,<npv>"
                                    .to_owned(),
                            )
                        })?;
                    (rule, Some(gap))
                }
                _ => {
                    return Err(CliError::Input(
                        "ppv-npv-defer needs both targets (--target <ppv>,<npv>) or neither".to_owned(),
                    ))
                }
            };
            let hard = thresholding::apply_deferring_threshold(&rule)?;
            let stats = empirical_stats(&data, &hard, ScoreAxis::Bucket)?;
            let eq = assert_equalized(&stats, &[StatField::Ppv, StatField::Npv], config.tolerance);
            let deferral = deferral_summary_from_stats(&stats, data.dataset.group_counts());
            report.rule = Some(rule.to_json());
            report.stats_after = Some(stats);
            report.deferral = Some(deferral);
            report.equalization = Some(json!({
                "targets": [ppv, npv],
                "searched_best_gap": searched_gap,
                "report": eq,
            }));
            report.details = Some(json!({"mode": "ppv-npv-defer", "axis": "bucket"}));
            // Explicit targets promise equalization; the target-free search
            // promises only the best achievable gap, which it reports.
            if searched_gap.is_none() && !eq.equalized {
                return Err(CliError::Infeasible(format!(
                    "ppv/npv gaps exceed tolerance {}: {:?}",
                    config.tolerance, eq.gaps
                )));
            }
        }
        EqualizeMode::ApDefer { strategy } => {
            let axis_family = data.buckets.axis_family();
            let policies = match strategy {
                DeferStrategy::Min => deferral::strategy_pointwise_min(axis_family)?,
                DeferStrategy::Match(anchor) => {
                    deferral::strategy_match_group(axis_family, &GroupId::from(anchor.as_str()))?
                }
            };
            let conditional = policies.conditional_family(axis_family)?;
            let shared = conditional
                .iter()
                .next()
                .map(|(_, ap)| ap.clone())
                .expect("nonempty family");
            // The conditional distributions are equalized by construction;
            // report the residual per-score gap.
            let mut max_gap = 0.0f64;
            for (_, ap) in conditional.iter() {
                for (s, p) in shared.iter() {
                    max_gap = max_gap.max((ap.mass(s) - p).abs());
                }
            }
            if max_gap > config.tolerance.max(1e-9) {
                return Err(CliError::Infeasible(format!(
                    "conditional distributions differ by {max_gap}"
                )));
            }
            let blind = median_blind_rule(&shared);
            let composed = deferral::compose_with_blind_rule(&policies, &blind)?;
            let stats = empirical_stats(&data, &composed, ScoreAxis::Bucket)?;
            let eq = assert_equalized(
                &stats,
                &[StatField::Ppv, StatField::Npv, StatField::Cfpr, StatField::Cfnr],
                config.tolerance,
            );
            let per_group: BTreeMap<GroupId, f64> = policies
                .iter()
                .map(|(g, p)| (g.clone(), p.delta()))
                .collect();
            let total: usize = data.dataset.group_counts().values().sum();
            let total_fraction = per_group
                .iter()
                .map(|(g, d)| d * data.dataset.group_counts()[g] as f64 / total as f64)
                .sum();
            report.policy = Some(policies.to_json());
            report.stats_after = Some(stats);
            report.deferral = Some(DeferralSummary {
                per_group,
                total_fraction,
            });
            report.equalization = Some(json!({
                "conditional_distribution_max_gap": max_gap,
                "post_deferral_stats": eq,
            }));
            report.details = Some(json!({
                "mode": "ap-defer",
                "strategy": match strategy {
                    DeferStrategy::Min => "min".to_owned(),
                    DeferStrategy::Match(anchor) => format!("match:{anchor}"),
                },
                "axis": "bucket",
                "blind_rule": "threshold at the conditional median",
            }));
            if let Some(dir) = &config.out {
                write_file(
                    dir,
                    "deferral.csv",
                    &policies.to_plot_csv(axis_family),
                    &mut report.output_files,
                )?;
            }
        }
        EqualizeMode::MassAverage => {
            let support = mass_averaging::union_support(&data.family);
            let lp = mass_averaging::build_lp(&data.family, &support, config.tolerance)?;
            let solution = mass_averaging::solve_lp(&lp)?;
            let pushed = mass_averaging::apply_kernel(&data.family, &solution.kernel)?;
            let stats = metrics::stats_analytic_family(&pushed, &baseline_rule())
                .map_err(|e| CliError::Input(e.to_string()))?;
            let eq = assert_equalized(
                &stats,
                &[StatField::Ppv, StatField::Npv, StatField::Fpr, StatField::Fnr],
                config.tolerance,
            );
            report.rule = Some(solution.kernel.to_json());
            report.stats_after = Some(stats);
            report.equalization = Some(json!({
                "objective_transport_cost": solution.objective,
                "target_distribution": solution.target.to_json(),
                "post_averaging_stats": eq,
            }));
            report.details = Some(json!({
                "mode": "mass-average",
                "axis": "calibrated",
                "variables": lp.variable_count(),
                "constraints": lp.constraint_count(),
            }));
            if !eq.equalized {
                return Err(CliError::Infeasible(format!(
                    "post-averaging gaps exceed tolerance {}: {:?}",
                    config.tolerance, eq.gaps
                )));
            }
        }
    }

    if let Some(dir) = &config.out {
        if let Some(stats) = &report.stats_after {
            write_file(dir, "stats_after.csv", &metrics::stats_to_csv(stats), &mut report.output_files)?;
        }
        if let Some(rule) = &report.rule {
            write_file(
                dir,
                "rule.json",
                &serde_json::to_string_pretty(rule).expect("rule serializes"),
                &mut report.output_files,
            )?;
        }
        if let Some(policy) = &report.policy {
            write_file(
                dir,
                "policy.json",
                &serde_json::to_string_pretty(policy).expect("policy serializes"),
                &mut report.output_files,
            )?;
        }
        let rendered = report.to_json_string();
        write_file(dir, "report.json", &rendered, &mut report.output_files)?;
    }
    Ok(report)
}

fn deferral_summary_from_stats(
    stats: &BTreeMap<GroupId, GroupStats>,
    counts: &BTreeMap<GroupId, usize>,
) -> DeferralSummary {
    let per_group: BTreeMap<GroupId, f64> = stats
        .iter()
        .map(|(g, s)| (g.clone(), s.defer_rate))
        .collect();
    let total: usize = counts.values().sum();
    let total_fraction = per_group
        .iter()
        .map(|(g, d)| d * counts.get(g).copied().unwrap_or(0) as f64 / total as f64)
        .sum();
    DeferralSummary {
        per_group,
        total_fraction,
    }
}

// --- verify -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub claims: Option<Vec<String>>,
    pub r_resolution: f64,
    pub q_resolution: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub no_timestamp: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            claims: None,
            r_resolution: 1e-3,
            q_resolution: 0.05,
            seed: 0,
            out: None,
            no_timestamp: false,
        }
    }
}

pub const VERIFY_CLAIMS: &[&str] = &[
    "stats-agreement",
    "constant-score",
    "group-blind-threshold",
    "ppv-npv-threshold",
    "trivial-equalizers",
    "target-equalizers",
    "threshold-dominance",
    "defer-transform",
];

#[derive(Debug, Serialize)]
struct ClaimVerdict {
    claim: String,
    holds: bool,
    details: serde_json::Value,
}

/// Run the named verification suites (all of them by default). The report
/// carries one verdict per claim; any failed claim makes the command exit
/// nonzero.
pub fn cmd_verify(config: &VerifyConfig) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let claims: Vec<String> = match &config.claims {
        None => VERIFY_CLAIMS.iter().map(|s| s.to_string()).collect(),
        Some(list) => {
            for claim in list {
                if !VERIFY_CLAIMS.contains(&claim.as_str()) {
                    return Err(CliError::Input(format!(
                        "unknown claim {claim:?}; known claims: {}",
                        VERIFY_CLAIMS.join(", ")
                    )));
                }
            }
            list.clone()
        }
    };

    let grid = GridSpec::with_resolution(config.r_resolution);
    let mut verdicts = Vec::new();
    for claim in &claims {
        let verdict = match claim.as_str() {
            "stats-agreement" => verify_stats_agreement(config.seed),
            "constant-score" => {
                let report = oracle::verify_constant_score_impossibility(0.3, 0.6, &grid)
                    .map_err(|e| CliError::Input(e.to_string()))?;
                ClaimVerdict {
                    claim: claim.clone(),
                    holds: report.holds,
                    details: serde_json::to_value(&report).expect("report serializes"),
                }
            }
            "group-blind-threshold" => {
                let report = oracle::verify_group_blind_threshold_impossibility(&grid);
                ClaimVerdict {
                    claim: claim.clone(),
                    holds: report.holds,
                    details: serde_json::to_value(&report).expect("report serializes"),
                }
            }
            "ppv-npv-threshold" => {
                let report =
                    oracle::verify_ppv_npv_impossibility(ParabolaInstance::default(), &grid);
                ClaimVerdict {
                    claim: claim.clone(),
                    holds: report.delta_star > 0.0,
                    details: serde_json::to_value(&report).expect("report serializes"),
                }
            }
            "trivial-equalizers" => verify_trivial_equalizers(config.seed),
            "target-equalizers" => verify_target_equalizers(config.seed),
            "threshold-dominance" => verify_threshold_dominance(),
            "defer-transform" => verify_defer_transform(config.seed, config.q_resolution),
            _ => unreachable!("claim list is validated"),
        };
        verdicts.push(verdict);
    }

    let all_hold = verdicts.iter().all(|v| v.holds);
    let mut report = RunReport::new(
        "verify",
        json!({
            "claims": claims,
            "r_resolution": config.r_resolution,
            "q_resolution": config.q_resolution,
            "seed": config.seed,
        }),
        config.no_timestamp,
        started,
    );
    report.details = Some(json!({
        "all_hold": all_hold,
        "verdicts": verdicts,
    }));
    if let Some(dir) = &config.out {
        let rendered = report.to_json_string();
        write_file(dir, "report.json", &rendered, &mut report.output_files)?;
    }
    if !all_hold {
        return Err(CliError::Verification(
            "one or more claims failed; see the report".to_owned(),
        ));
    }
    Ok(report)
}

pub fn verification_passed(report: &RunReport) -> bool {
    report
        .details
        .as_ref()
        .and_then(|d| d.get("all_hold"))
        .and_then(|v| v.as_bool())
        .unwrap_or(false)
}

fn option_close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        _ => false,
    }
}

fn verify_stats_agreement(seed: u64) -> ClaimVerdict {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut holds = true;
    for _ in 0..200 {
        let support_size = rng.gen_range(1..=12);
        let ap = oracle::random_profile(&mut rng, "g", support_size);
        let support: Vec<Score> = ap.support().collect();
        let deferring = rng.gen_bool(0.5);
        let rule = oracle::random_blind_rule(&mut rng, &support, deferring);
        let fast = metrics::stats_analytic(&ap, &rule).expect("rule covers group");
        let slow = oracle::joint_enumerate_stats(&ap, &rule).expect("rule covers group");
        checked += 1;
        let fields = [
            (fast.ppv, slow.ppv),
            (fast.npv, slow.npv),
            (fast.fpr, slow.fpr),
            (fast.fnr, slow.fnr),
            (fast.cfpr, slow.cfpr),
            (fast.cfnr, slow.cfnr),
            (fast.ufpr, slow.ufpr),
            (fast.ufnr, slow.ufnr),
            (fast.tn_based_error, slow.tn_based_error),
        ];
        for (a, b) in fields {
            if !option_close(a, b, 1e-12) {
                holds = false;
            }
            if let (Some(a), Some(b)) = (a, b) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ClaimVerdict {
        claim: "stats-agreement".to_owned(),
        holds,
        details: json!({"instances": checked, "max_difference": worst}),
    }
}

fn verify_trivial_equalizers(seed: u64) -> ClaimVerdict {
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1));
    let mut holds = true;
    let mut checked = 0usize;
    for _ in 0..10 {
        let (groups, support_size) = (rng.gen_range(2..=4), rng.gen_range(2..=10));
        let family = oracle::random_nice_family(&mut rng, groups, support_size);
        let top = family.iter().next().expect("nonempty").1.max_support().value();
        let bottom = family.iter().next().expect("nonempty").1.min_support().value();

        let rule = thresholding::trivial_ppv_equalizer(&family, 0.5).expect("nice family");
        for (_, ap) in family.iter() {
            let stats =
                oracle::joint_enumerate_stats(ap, &rule.to_hard_rule()).expect("rule covers group");
            holds &= (stats.ppv.expect("non-trivial") - top).abs() <= 1e-12;
            checked += 1;
        }
        let rule = thresholding::trivial_npv_equalizer(&family, 0.5).expect("nice family");
        for (_, ap) in family.iter() {
            let stats =
                oracle::joint_enumerate_stats(ap, &rule.to_hard_rule()).expect("rule covers group");
            holds &= (stats.npv.expect("non-trivial") - (1.0 - bottom)).abs() <= 1e-12;
            checked += 1;
        }
        let rule = thresholding::trivial_deferring_equalizer(&family, 0.5, 0.5);
        match rule {
            Ok(rule) => {
                let hard = thresholding::apply_deferring_threshold(&rule).expect("valid rule");
                for (_, ap) in family.iter() {
                    let stats = oracle::joint_enumerate_stats(ap, &hard).expect("rule covers group");
                    holds &= (stats.ppv.expect("non-trivial") - top).abs() <= 1e-12;
                    holds &= (stats.npv.expect("non-trivial") - (1.0 - bottom)).abs() <= 1e-12;
                    checked += 1;
                }
            }
            Err(_) => {
                // Single-point supports can make r0 + r1 infeasible; those
                // families are outside this check's scope.
            }
        }
    }
    ClaimVerdict {
        claim: "trivial-equalizers".to_owned(),
        holds,
        details: json!({"groups_checked": checked}),
    }
}

fn verify_target_equalizers(seed: u64) -> ClaimVerdict {
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(2));
    let mut holds = true;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let (groups, support_size) = (rng.gen_range(2..=4), rng.gen_range(2..=12));
        let family = oracle::random_nice_family(&mut rng, groups, support_size);
        let s_max = family.iter().next().expect("nonempty").1.max_support().value();
        let s_min = family.iter().next().expect("nonempty").1.min_support().value();
        let max_br = family
            .iter()
            .map(|(_, ap)| ap.base_rate())
            .fold(f64::NEG_INFINITY, f64::max);
        let min_br = family
            .iter()
            .map(|(_, ap)| ap.base_rate())
            .fold(f64::INFINITY, f64::min);

        let u: f64 = rng.gen_range(0.05..0.95);
        let ppv_target = max_br + u * (s_max - max_br);
        let u: f64 = rng.gen_range(0.05..0.95);
        let npv_target = (1.0 - min_br) + u * ((1.0 - s_min) - (1.0 - min_br));

        if let Ok(rule) = thresholding::equalize_ppv(&family, ppv_target) {
            let hard = rule.to_hard_rule();
            for (_, ap) in family.iter() {
                let stats = oracle::joint_enumerate_stats(ap, &hard).expect("rule covers group");
                let gap = (stats.ppv.expect("non-trivial") - ppv_target).abs();
                worst = worst.max(gap);
                holds &= gap <= 1e-9;
                checked += 1;
            }
        } else {
            holds = false;
        }
        if let Ok(rule) = thresholding::equalize_npv(&family, npv_target) {
            let hard = rule.to_hard_rule();
            for (_, ap) in family.iter() {
                let stats = oracle::joint_enumerate_stats(ap, &hard).expect("rule covers group");
                let gap = (stats.npv.expect("non-trivial") - npv_target).abs();
                worst = worst.max(gap);
                holds &= gap <= 1e-9;
                checked += 1;
            }
        } else {
            holds = false;
        }
        match thresholding::equalize_ppv_npv_deferring(&family, ppv_target, npv_target) {
            Ok(rule) => {
                let hard = thresholding::apply_deferring_threshold(&rule).expect("valid rule");
                let mut ppvs = Vec::new();
                let mut npvs = Vec::new();
                for (_, ap) in family.iter() {
                    let stats = oracle::joint_enumerate_stats(ap, &hard).expect("rule covers group");
                    ppvs.push(stats.ppv.expect("non-trivial"));
                    npvs.push(stats.npv.expect("non-trivial"));
                    checked += 1;
                }
                let spread = |v: &[f64]| {
                    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - v.iter().cloned().fold(f64::INFINITY, f64::min)
                };
                worst = worst.max(spread(&ppvs)).max(spread(&npvs));
                holds &= spread(&ppvs) <= 1e-9 && spread(&npvs) <= 1e-9;
            }
            Err(_) => holds = false,
        }
    }
    ClaimVerdict {
        claim: "target-equalizers".to_owned(),
        holds,
        details: json!({"groups_checked": checked, "max_gap": worst}),
    }
}

fn verify_threshold_dominance() -> ClaimVerdict {
    // Decreasing versus increasing distributions: group-blind thresholds
    // favor the increasing group, and equalizing PPV forces a laxer
    // numeric threshold on it.
    let family = oracle::decreasing_vs_increasing_family(1.01);
    let rule = thresholding::ThresholdRule::group_blind(
        family.groups(),
        Score::new(0.5).expect("constant in range"),
        0.5,
    )
    .expect("valid probability");
    let report = thresholding::check_dominance_gap(&family, &rule).expect("group blind");
    let mut holds = report.all_consistent && !report.pairs.is_empty();

    let max_br = family
        .iter()
        .map(|(_, ap)| ap.base_rate())
        .fold(f64::NEG_INFINITY, f64::max);
    let s_max = family.iter().next().expect("nonempty").1.max_support().value();
    let target = (max_br + s_max) / 2.0;
    let equalizing = thresholding::equalize_ppv(&family, target);
    let pattern = match &equalizing {
        Ok(rule) => {
            let g1 = rule.params(&GroupId::from("g1")).expect("group present");
            let g2 = rule.params(&GroupId::from("g2")).expect("group present");
            // The increasing group gets the lower threshold (or more
            // boundary randomization at a tied threshold).
            g2.tau < g1.tau || (g2.tau == g1.tau && g2.r >= g1.r)
        }
        Err(_) => false,
    };
    holds &= pattern;

    ClaimVerdict {
        claim: "threshold-dominance".to_owned(),
        holds,
        details: json!({
            "dominance_pairs": report.pairs.len(),
            "all_consistent": report.all_consistent,
            "equalizing_pattern_holds": pattern,
        }),
    }
}

fn verify_defer_transform(seed: u64, q_resolution: f64) -> ClaimVerdict {
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(3));
    let mut holds = true;
    let mut worst: f64 = 0.0;

    // Round trip: policy construction reproduces arbitrary sub-support
    // targets exactly.
    for _ in 0..200 {
        let support_size = rng.gen_range(1..=20);
        let ap = oracle::random_profile(&mut rng, "g", support_size);
        let support: Vec<Score> = ap.support().collect();
        let keep = rng.gen_range(1..=support.len());
        let mut chosen = support.clone();
        for _ in 0..support.len() - keep {
            let idx = rng.gen_range(0..chosen.len());
            chosen.remove(idx);
        }
        let masses = oracle::random_masses(&mut rng, chosen.len());
        let target = crate::profiles::AccuracyProfile::new(
            "t",
            chosen.iter().copied().zip(masses),
        )
        .expect("target is a PMF");
        let policy = deferral::build_policy_to_target(&ap, &target).expect("support contained");
        let cond = deferral::conditional_ap(&ap, &policy).expect("not all deferred");
        for (s, p) in target.iter() {
            let gap = (cond.mass(s) - p).abs();
            worst = worst.max(gap);
            holds &= gap <= 1e-12;
        }
    }

    // Minimality on small supports.
    for _ in 0..3 {
        let ap = oracle::random_profile(&mut rng, "g", 3);
        let support: Vec<Score> = ap.support().collect();
        let masses = oracle::random_masses(&mut rng, 2);
        let target = crate::profiles::AccuracyProfile::new(
            "t",
            support[..2].iter().copied().zip(masses),
        )
        .expect("target is a PMF");
        let report = oracle::verify_delta_minimality(&ap, &target, q_resolution)
            .expect("support small enough");
        holds &= report.holds;
    }

    // Equal deferral rates under the pointwise-minimum strategy.
    for _ in 0..100 {
        let support_size = rng.gen_range(2..=10);
        let family = oracle::random_nice_family(&mut rng, 2, support_size);
        let policies = deferral::strategy_pointwise_min(&family).expect("shared support");
        let mut aps = family.iter();
        let (_, a) = aps.next().expect("two groups");
        let (_, b) = aps.next().expect("two groups");
        let tv = tv_distance(a, b);
        for (_, p) in policies.iter() {
            let gap = (p.delta() - tv).abs();
            worst = worst.max(gap);
            holds &= gap <= 1e-12;
        }
    }

    ClaimVerdict {
        claim: "defer-transform".to_owned(),
        holds,
        details: json!({"max_gap": worst, "q_resolution": q_resolution}),
    }
}
