//! C ABI for the fairpost library.
//!
//! Profile families load from the library's JSON interchange format and live
//! behind an opaque handle; results (rules, deferral policies, statistics)
//! come back as JSON strings the caller frees with
//! [`fairpost_string_free`]. Every function returns a status code; the
//! message for the most recent failure on the current thread is available
//! through [`fairpost_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fairpost::deferral;
use fairpost::metrics::{stats_analytic_family, GroupStats};
use fairpost::profiles::{tv_distance, GroupId, ProfileFamily};
use fairpost::score::ScoreGrid;
use fairpost::thresholding::{
    apply_deferring_threshold, equalize_npv, equalize_ppv, equalize_ppv_npv_deferring,
    DeferringThresholdRule, ThresholdRule,
};

/// Status code of every C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairpostStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON or a document violating the schema.
    ParseError = 3,
    UnknownGroup = 4,
    /// The requested equalization does not exist for this family.
    Infeasible = 5,
    Internal = 6,
}

/// Opaque handle to a loaded profile family.
pub struct FairpostFamily {
    family: ProfileFamily,
    grid: ScoreGrid,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: FairpostStatus, message: &str) -> FairpostStatus {
    set_error(message);
    status
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fairpost_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn guard<F: FnOnce() -> FairpostStatus>(body: F) -> FairpostStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(FairpostStatus::Internal, "internal panic"),
    }
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, FairpostStatus> {
    if ptr.is_null() {
        return Err(FairpostStatus::NullPointer);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| FairpostStatus::InvalidUtf8)
}

fn emit_json(value: &serde_json::Value, out: *mut *mut c_char) -> FairpostStatus {
    let text = serde_json::to_string(value).unwrap_or_default();
    match CString::new(text) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            FairpostStatus::Ok
        }
        Err(_) => fail(FairpostStatus::Internal, "output contained a NUL byte"),
    }
}

/// Parse a profile family from its JSON array form
/// (`[{"group": ..., "mass": [{"score": ..., "p": ...}]}]`), snapping
/// scores to a decimal grid of the given resolution (pass 0 for the
/// default).
///
/// On success `*out` owns the family; release it with
/// [`fairpost_family_free`].
#[no_mangle]
pub unsafe extern "C" fn fairpost_family_from_json(
    json: *const c_char,
    grid_resolution: f64,
    out: *mut *mut FairpostFamily,
) -> FairpostStatus {
    guard(|| {
        if out.is_null() {
            return fail(FairpostStatus::NullPointer, "out pointer is null");
        }
        let text = match read_str(json) {
            Ok(text) => text,
            Err(status) => return fail(status, "family JSON pointer unreadable"),
        };
        let grid = if grid_resolution == 0.0 {
            ScoreGrid::default()
        } else {
            match ScoreGrid::new(grid_resolution) {
                Ok(grid) => grid,
                Err(e) => return fail(FairpostStatus::ParseError, &e.to_string()),
            }
        };
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(value) => value,
            Err(e) => return fail(FairpostStatus::ParseError, &e.to_string()),
        };
        match ProfileFamily::from_json(&value, &grid) {
            Ok(family) => {
                *out = Box::into_raw(Box::new(FairpostFamily { family, grid }));
                FairpostStatus::Ok
            }
            Err(e) => fail(FairpostStatus::ParseError, &e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn fairpost_family_free(family: *mut FairpostFamily) {
    if !family.is_null() {
        drop(Box::from_raw(family));
    }
}

/// Free a string returned by any `fairpost_*` call.
#[no_mangle]
pub unsafe extern "C" fn fairpost_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

unsafe fn family_ref<'a>(
    family: *const FairpostFamily,
) -> Result<&'a FairpostFamily, FairpostStatus> {
    family.as_ref().ok_or(FairpostStatus::NullPointer)
}

#[no_mangle]
pub unsafe extern "C" fn fairpost_family_group_count(
    family: *const FairpostFamily,
    out: *mut usize,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        *out = handle.family.len();
        FairpostStatus::Ok
    })
}

/// Whether every group shares one support.
#[no_mangle]
pub unsafe extern "C" fn fairpost_family_is_nice(
    family: *const FairpostFamily,
    out: *mut bool,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        *out = handle.family.is_nice();
        FairpostStatus::Ok
    })
}

/// Mean score of one group's distribution (its base rate under
/// calibration).
#[no_mangle]
pub unsafe extern "C" fn fairpost_base_rate(
    family: *const FairpostFamily,
    group: *const c_char,
    out: *mut f64,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        let name = match read_str(group) {
            Ok(name) => name,
            Err(status) => return fail(status, "group name unreadable"),
        };
        match handle.family.get(&GroupId::from(name)) {
            Some(ap) => {
                *out = ap.base_rate();
                FairpostStatus::Ok
            }
            None => fail(FairpostStatus::UnknownGroup, &format!("no group {name:?}")),
        }
    })
}

/// Total variation distance between two groups' score distributions.
#[no_mangle]
pub unsafe extern "C" fn fairpost_tv_distance(
    family: *const FairpostFamily,
    group_a: *const c_char,
    group_b: *const c_char,
    out: *mut f64,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        let (name_a, name_b) = match (read_str(group_a), read_str(group_b)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return fail(FairpostStatus::InvalidUtf8, "group name unreadable"),
        };
        let (Some(a), Some(b)) = (
            handle.family.get(&GroupId::from(name_a)),
            handle.family.get(&GroupId::from(name_b)),
        ) else {
            return fail(FairpostStatus::UnknownGroup, "group not in family");
        };
        *out = tv_distance(a, b);
        FairpostStatus::Ok
    })
}

/// Per-group thresholds equalizing PPV at `target`; the rule comes back as
/// JSON.
#[no_mangle]
pub unsafe extern "C" fn fairpost_equalize_ppv(
    family: *const FairpostFamily,
    target: f64,
    out_rule_json: *mut *mut c_char,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out_rule_json.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        match equalize_ppv(&handle.family, target) {
            Ok(rule) => emit_json(&rule.to_json(), out_rule_json),
            Err(e) => fail(FairpostStatus::Infeasible, &e.to_string()),
        }
    })
}

/// Per-group thresholds equalizing NPV at `target`; the rule comes back as
/// JSON.
#[no_mangle]
pub unsafe extern "C" fn fairpost_equalize_npv(
    family: *const FairpostFamily,
    target: f64,
    out_rule_json: *mut *mut c_char,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out_rule_json.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        match equalize_npv(&handle.family, target) {
            Ok(rule) => emit_json(&rule.to_json(), out_rule_json),
            Err(e) => fail(FairpostStatus::Infeasible, &e.to_string()),
        }
    })
}

/// Two-threshold deferring rule equalizing PPV and NPV at the given targets
/// (both may settle weakly higher when thresholds must merge).
#[no_mangle]
pub unsafe extern "C" fn fairpost_equalize_ppv_npv_deferring(
    family: *const FairpostFamily,
    ppv_target: f64,
    npv_target: f64,
    out_rule_json: *mut *mut c_char,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out_rule_json.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        match equalize_ppv_npv_deferring(&handle.family, ppv_target, npv_target) {
            Ok(rule) => emit_json(&rule.to_json(), out_rule_json),
            Err(e) => fail(FairpostStatus::Infeasible, &e.to_string()),
        }
    })
}

/// Deferral policies matching every group's conditional distribution to the
/// anchor group's.
#[no_mangle]
pub unsafe extern "C" fn fairpost_policy_match_group(
    family: *const FairpostFamily,
    anchor: *const c_char,
    out_policy_json: *mut *mut c_char,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out_policy_json.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        let name = match read_str(anchor) {
            Ok(name) => name,
            Err(status) => return fail(status, "anchor name unreadable"),
        };
        match deferral::strategy_match_group(&handle.family, &GroupId::from(name)) {
            Ok(policies) => emit_json(&policies.to_json(), out_policy_json),
            Err(e) => fail(FairpostStatus::Infeasible, &e.to_string()),
        }
    })
}

/// Deferral policies reshaping every group onto the normalized pointwise
/// minimum; for two groups each group's deferral mass is their total
/// variation distance.
#[no_mangle]
pub unsafe extern "C" fn fairpost_policy_pointwise_min(
    family: *const FairpostFamily,
    out_policy_json: *mut *mut c_char,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out_policy_json.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        match deferral::strategy_pointwise_min(&handle.family) {
            Ok(policies) => emit_json(&policies.to_json(), out_policy_json),
            Err(e) => fail(FairpostStatus::Infeasible, &e.to_string()),
        }
    })
}

fn stats_json(stats: &std::collections::BTreeMap<GroupId, GroupStats>) -> serde_json::Value {
    serde_json::to_value(stats).unwrap_or_default()
}

/// Per-group statistics of a single-threshold rule (JSON in, JSON out).
#[no_mangle]
pub unsafe extern "C" fn fairpost_threshold_stats(
    family: *const FairpostFamily,
    rule_json: *const c_char,
    out_stats_json: *mut *mut c_char,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out_stats_json.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        let text = match read_str(rule_json) {
            Ok(text) => text,
            Err(status) => return fail(status, "rule JSON unreadable"),
        };
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(value) => value,
            Err(e) => return fail(FairpostStatus::ParseError, &e.to_string()),
        };
        let rule = match ThresholdRule::from_json(&value, &handle.grid) {
            Ok(rule) => rule,
            Err(e) => return fail(FairpostStatus::ParseError, &e.to_string()),
        };
        match stats_analytic_family(&handle.family, &rule.to_hard_rule()) {
            Ok(stats) => emit_json(&stats_json(&stats), out_stats_json),
            Err(e) => fail(FairpostStatus::UnknownGroup, &e.to_string()),
        }
    })
}

/// Per-group statistics of a two-threshold deferring rule (JSON in, JSON
/// out).
#[no_mangle]
pub unsafe extern "C" fn fairpost_deferring_threshold_stats(
    family: *const FairpostFamily,
    rule_json: *const c_char,
    out_stats_json: *mut *mut c_char,
) -> FairpostStatus {
    guard(|| {
        let (Ok(handle), false) = (family_ref(family), out_stats_json.is_null()) else {
            return fail(FairpostStatus::NullPointer, "null pointer");
        };
        let text = match read_str(rule_json) {
            Ok(text) => text,
            Err(status) => return fail(status, "rule JSON unreadable"),
        };
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(value) => value,
            Err(e) => return fail(FairpostStatus::ParseError, &e.to_string()),
        };
        let rule = match DeferringThresholdRule::from_json(&value, &handle.grid) {
            Ok(rule) => rule,
            Err(e) => return fail(FairpostStatus::ParseError, &e.to_string()),
        };
        let hard = match apply_deferring_threshold(&rule) {
            Ok(hard) => hard,
            Err(e) => return fail(FairpostStatus::ParseError, &e.to_string()),
        };
        match stats_analytic_family(&handle.family, &hard) {
            Ok(stats) => emit_json(&stats_json(&stats), out_stats_json),
            Err(e) => fail(FairpostStatus::UnknownGroup, &e.to_string()),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    const FAMILY_JSON: &str = r#"[
        {"group": "a", "mass": [{"score": 0.2, "p": 0.5}, {"score": 0.8, "p": 0.5}]},
        {"group": "b", "mass": [{"score": 0.2, "p": 0.25}, {"score": 0.8, "p": 0.75}]}
    ]"#;

    fn load_family() -> *mut FairpostFamily {
        let json = CString::new(FAMILY_JSON).unwrap();
        let mut handle: *mut FairpostFamily = ptr::null_mut();
        let status = unsafe { fairpost_family_from_json(json.as_ptr(), 0.0, &mut handle) };
        assert_eq!(status, FairpostStatus::Ok);
        assert!(!handle.is_null());
        handle
    }

    fn take_string(ptr: *mut c_char) -> String {
        assert!(!ptr.is_null());
        let text = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_owned();
        unsafe { fairpost_string_free(ptr) };
        text
    }

    #[test]
    fn family_round_trip_and_base_rates() {
        let family = load_family();
        let mut count = 0usize;
        assert_eq!(
            unsafe { fairpost_family_group_count(family, &mut count) },
            FairpostStatus::Ok
        );
        assert_eq!(count, 2);

        let mut nice = false;
        assert_eq!(
            unsafe { fairpost_family_is_nice(family, &mut nice) },
            FairpostStatus::Ok
        );
        assert!(nice);

        let group = CString::new("b").unwrap();
        let mut rate = 0.0f64;
        assert_eq!(
            unsafe { fairpost_base_rate(family, group.as_ptr(), &mut rate) },
            FairpostStatus::Ok
        );
        assert!((rate - 0.65).abs() < 1e-12);

        let missing = CString::new("zz").unwrap();
        assert_eq!(
            unsafe { fairpost_base_rate(family, missing.as_ptr(), &mut rate) },
            FairpostStatus::UnknownGroup
        );
        let message = unsafe { CStr::from_ptr(fairpost_last_error()) };
        assert!(message.to_str().unwrap().contains("zz"));

        unsafe { fairpost_family_free(family) };
    }

    #[test]
    fn tv_distance_through_the_abi() {
        let family = load_family();
        let a = CString::new("a").unwrap();
        let b = CString::new("b").unwrap();
        let mut tv = 0.0f64;
        assert_eq!(
            unsafe { fairpost_tv_distance(family, a.as_ptr(), b.as_ptr(), &mut tv) },
            FairpostStatus::Ok
        );
        assert!((tv - 0.25).abs() < 1e-12);
        unsafe { fairpost_family_free(family) };
    }

    #[test]
    fn equalize_and_score_rules_through_the_abi() {
        let family = load_family();
        let mut rule_ptr: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_equalize_ppv(family, 0.7, &mut rule_ptr) },
            FairpostStatus::Ok
        );
        let rule_json = take_string(rule_ptr);
        assert!(rule_json.contains("tau1"));

        let rule_c = CString::new(rule_json).unwrap();
        let mut stats_ptr: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_threshold_stats(family, rule_c.as_ptr(), &mut stats_ptr) },
            FairpostStatus::Ok
        );
        let stats: serde_json::Value = serde_json::from_str(&take_string(stats_ptr)).unwrap();
        for group in ["a", "b"] {
            let ppv = stats[group]["ppv"].as_f64().unwrap();
            assert!((ppv - 0.7).abs() < 1e-9);
        }

        // Infeasible targets surface as status codes, not panics.
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_equalize_ppv(family, 0.99, &mut out) },
            FairpostStatus::Infeasible
        );
        unsafe { fairpost_family_free(family) };
    }

    #[test]
    fn deferring_rule_and_policies_through_the_abi() {
        let family = load_family();
        let mut rule_ptr: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_equalize_ppv_npv_deferring(family, 0.7, 0.75, &mut rule_ptr) },
            FairpostStatus::Ok
        );
        let rule_json = take_string(rule_ptr);
        let rule_c = CString::new(rule_json).unwrap();
        let mut stats_ptr: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_deferring_threshold_stats(family, rule_c.as_ptr(), &mut stats_ptr) },
            FairpostStatus::Ok
        );
        let stats: serde_json::Value = serde_json::from_str(&take_string(stats_ptr)).unwrap();
        let ppv_a = stats["a"]["ppv"].as_f64().unwrap();
        let ppv_b = stats["b"]["ppv"].as_f64().unwrap();
        assert!((ppv_a - ppv_b).abs() < 1e-9);

        let mut policy_ptr: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_policy_pointwise_min(family, &mut policy_ptr) },
            FairpostStatus::Ok
        );
        let policies: serde_json::Value = serde_json::from_str(&take_string(policy_ptr)).unwrap();
        for entry in policies.as_array().unwrap() {
            assert!((entry["delta"].as_f64().unwrap() - 0.25).abs() < 1e-12);
        }

        let anchor = CString::new("b").unwrap();
        let mut match_ptr: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_policy_match_group(family, anchor.as_ptr(), &mut match_ptr) },
            FairpostStatus::Ok
        );
        take_string(match_ptr);
        unsafe { fairpost_family_free(family) };
    }

    #[test]
    fn null_pointers_are_rejected() {
        let mut out: *mut FairpostFamily = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_family_from_json(ptr::null(), 0.0, &mut out) },
            FairpostStatus::NullPointer
        );
        let mut rate = 0.0;
        assert_eq!(
            unsafe { fairpost_base_rate(ptr::null(), ptr::null(), &mut rate) },
            FairpostStatus::NullPointer
        );
        unsafe { fairpost_family_free(ptr::null_mut()) };
        unsafe { fairpost_string_free(ptr::null_mut()) };
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let json = CString::new("not json").unwrap();
        let mut out: *mut FairpostFamily = ptr::null_mut();
        assert_eq!(
            unsafe { fairpost_family_from_json(json.as_ptr(), 0.0, &mut out) },
            FairpostStatus::ParseError
        );
        assert!(out.is_null());
    }
}
