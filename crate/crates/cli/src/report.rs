//! Result types the operations fill in and the binary prints. Maps are
//! ordered (`BTreeMap`) so identical runs serialize to identical bytes.

use std::collections::BTreeMap;

use serde::Serialize;

use dmk_core::Diagnostics64;

/// One monitoring sample along a run. Field order here is the key order in
/// every serialized record.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub curvature_sup: f64,
    pub divergency_sup: f64,
    pub concordance_sup: f64,
    pub form_equiv_sup: f64,
}

impl From<Diagnostics64> for DiagnosticsRecord {
    fn from(d: Diagnostics64) -> Self {
        Self {
            time: d.time,
            curvature_sup: d.curvature_sup,
            divergency_sup: d.divergency_sup,
            concordance_sup: d.concordance_sup,
            form_equiv_sup: d.form_equiv_sup,
        }
    }
}

/// Coarse summary of the final state.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Summary {
    pub final_time: f64,
    pub deformation_sup: f64,
    pub density_sup: f64,
    pub deformation_det_min: f64,
    pub deformation_det_max: f64,
}

/// Measurements taken at one refinement level of a convergence study.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceLevel {
    /// Refinement factor relative to the configured grid.
    pub factor: usize,
    /// Smallest grid spacing at this level.
    pub spacing: f64,
    pub measures: BTreeMap<String, f64>,
}

/// Everything one operation produced.
#[derive(Debug, Serialize)]
pub struct Report {
    pub scenario: String,
    pub operation: String,
    pub records: Vec<DiagnosticsRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
    /// Named scalar results outside the periodic diagnostics (round-trip
    /// defects, gauge residuals, fitted constants, ...).
    pub extras: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<Vec<ConvergenceLevel>>,
    /// Observed convergence orders, one per measure, when a study ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orders: Option<BTreeMap<String, f64>>,
    /// Human-readable descriptions of every threshold violation.
    pub violations: Vec<String>,
}

impl Report {
    pub fn new(scenario: impl Into<String>, operation: impl Into<String>) -> Self {
        Self {
            scenario: scenario.into(),
            operation: operation.into(),
            records: Vec::new(),
            summary: None,
            extras: BTreeMap::new(),
            convergence: None,
            orders: None,
            violations: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
