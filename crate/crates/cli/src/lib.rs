//! Command-line front end and HTTP binding for the dpd service.

pub mod http;
pub mod render;

use std::path::PathBuf;

use dpd_core::service::ServiceError;

/// Exit status for a failed command.
pub fn exit_code(e: &ServiceError) -> u8 {
    match e.code.as_str() {
        "no_feasible_plan" => 2,
        "insufficient_budget" => 3,
        _ => 1,
    }
}

/// Checked-in scenario bundles, when running from a source tree.
pub fn fixtures_root() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("DPD_FIXTURES") {
        return Some(PathBuf::from(p));
    }
    let p = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures"));
    p.is_dir().then_some(p)
}
