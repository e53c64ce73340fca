//! Report document, assertions and the digest that makes tampering visible.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use squaring_core::{BoxDimensionReport, DiscrepancyReport};

use crate::config::ExperimentConfig;
use crate::pipeline::{FlowStageReport, MatchingStageReport, RoundingStageReport, ToastStageReport};
use crate::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Metric {
    pub value: Value,
    pub unit: String,
    /// `measured` or `configured`.
    pub provenance: String,
}

impl Metric {
    pub fn new(value: Value, unit: &str, measured: bool) -> Self {
        Self { value, unit: unit.into(), provenance: if measured { "measured" } else { "configured" }.into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn num(m: &BTreeMap<String, Metric>, k: &str) -> Option<f64> {
    m.get(k).and_then(|x| x.value.as_f64())
}

impl Assertion {
    /// The run's pass/fail checks, derived from metrics only.
    pub fn evaluate(m: &BTreeMap<String, Metric>) -> Vec<Assertion> {
        let mut out = Vec::new();
        let mut must = |name: &str, key: &str| {
            if let Some(v) = m.get(key) {
                let pass = v.value.as_bool() == Some(true);
                out.push(Assertion { name: name.into(), pass, detail: format!("{key} = {}", v.value) });
            }
        };
        must("flows are dyadic with exponent 2dm", "flows_dyadic_integral");
        must("flow-out identity holds exactly", "flow_identity_ok");
        must("toast layers validate", "toast_valid");
        must("rounded flow is integral", "rounding_integral");
        must("completed vertices meet the demand", "rounding_demand_ok");
        must("locked boundary values never change", "rounding_locked_unchanged");
        must("Voronoi certificate holds", "voronoi_certificate");
        must("assignment is injective", "assignment_injective");
        must("images lie in B", "images_in_b");
        must("domain is the valid A-points minus unresolved", "domain_ok");
        must("pre-selected images are disjoint", "preselect_images_disjoint");
        if let (Some(a), Some(b)) = (num(m, "max_offset"), num(m, "offset_bound")) {
            out.push(Assertion { name: "offsets within 4r+1".into(), pass: a <= b, detail: format!("{a} <= {b}") });
        }
        if let Some(u) = num(m, "preselect_uncovered_offsets") {
            out.push(Assertion { name: "every used offset has a pre-selected point".into(), pass: u == 0.0, detail: format!("{u} uncovered") });
        }
        out
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    /// Seconds per stage.
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn push(&mut self, name: &str, since: Instant) {
        self.seconds.insert(name.into(), since.elapsed().as_secs_f64());
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub core: &'static str,
    pub cli: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub versions: Versions,
    pub metrics: BTreeMap<String, Metric>,
    pub assertions: Vec<Assertion>,
    pub discrepancy: Option<DiscrepancyReport>,
    pub flows: Vec<FlowStageReport>,
    pub toast: ToastStageReport,
    pub rounding: RoundingStageReport,
    pub matching: MatchingStageReport,
    pub box_count: Option<BoxDimensionReport>,
    pub timings: Timings,
    /// SHA-256 of the report without `timings` and `digest`.
    pub digest: String,
}

impl ExperimentReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: ExperimentConfig,
        metrics: BTreeMap<String, Metric>,
        assertions: Vec<Assertion>,
        discrepancy: Option<DiscrepancyReport>,
        flows: Vec<FlowStageReport>,
        toast: ToastStageReport,
        rounding: RoundingStageReport,
        matching: MatchingStageReport,
        box_count: Option<BoxDimensionReport>,
        timings: Timings,
    ) -> Self {
        let mut r = Self {
            schema_version: SCHEMA_VERSION,
            config,
            versions: Versions { core: "0.1.0", cli: env!("CARGO_PKG_VERSION") },
            metrics,
            assertions,
            discrepancy,
            flows,
            toast,
            rounding,
            matching,
            box_count,
            timings,
            digest: String::new(),
        };
        r.digest = digest_of(&serde_json::to_value(&r).expect("report serializes"));
        r
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }
}

/// Digest of a report value with `timings` and `digest` removed.
pub fn digest_of(v: &Value) -> String {
    let mut v = v.clone();
    if let Value::Object(map) = &mut v {
        map.remove("timings");
        map.remove("digest");
    }
    let bytes = serde_json::to_vec(&v).expect("value serializes");
    format!("{:x}", Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportCheck {
    pub failures: Vec<String>,
}

/// Re-derives every assertion from the stored metrics and checks the digest.
pub fn verify_report(v: &Value) -> CliResult<ReportCheck> {
    let stored = v.get("digest").and_then(|d| d.as_str()).ok_or_else(|| CliError::Config("report has no digest".into()))?;
    let metrics: BTreeMap<String, Metric> =
        serde_json::from_value(v.get("metrics").cloned().ok_or_else(|| CliError::Config("report has no metrics".into()))?).map_err(|e| CliError::Config(format!("metrics: {e}")))?;
    let assertions: Vec<Assertion> =
        serde_json::from_value(v.get("assertions").cloned().ok_or_else(|| CliError::Config("report has no assertions".into()))?).map_err(|e| CliError::Config(format!("assertions: {e}")))?;
    let mut failures = Vec::new();
    if digest_of(v) != stored {
        failures.push("digest does not match the report body".to_string());
    }
    let fresh = Assertion::evaluate(&metrics);
    for a in &fresh {
        if !a.pass {
            failures.push(format!("{} ({})", a.name, a.detail));
        }
        match assertions.iter().find(|s| s.name == a.name) {
            Some(s) if s.pass != a.pass => failures.push(format!("recorded result of `{}` disagrees with its metric", a.name)),
            None => failures.push(format!("assertion `{}` is missing", a.name)),
            _ => {}
        }
    }
    Ok(ReportCheck { failures })
}
