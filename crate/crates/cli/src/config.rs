//! Declarative scenario configuration, deserialized from UTF-8 JSON.
//! Unknown keys anywhere in the document are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

/// One scenario: grid, chart, initial condition, drivers, integrator,
/// outputs, and the thresholds that decide the process exit code.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Display name used in reports.
    #[serde(default)]
    pub name: Option<String>,
    pub grid: GridConfig,
    #[serde(default)]
    pub chart: ChartConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub drivers: Option<DriversConfig>,
    #[serde(default)]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl ScenarioConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        let config: Self = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("{}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Structural checks beyond what serde enforces.
    pub fn validate(&self) -> Result<(), CliError> {
        let i = &self.initial;
        let direct = i.deformation.is_some() || i.density.is_some();
        if i.distortion.is_some() && direct {
            return Err(CliError::Config(
                "initial: set either `distortion` or the `deformation`/`density` pair, not both"
                    .into(),
            ));
        }
        if i.distortion.is_none() {
            if !direct {
                return Err(CliError::Config(
                    "initial: exactly one initial-condition mode is required".into(),
                ));
            }
            if i.deformation.is_none() || i.density.is_none() {
                return Err(CliError::Config(
                    "initial: direct mode needs both `deformation` and `density`".into(),
                ));
            }
        }
        if let Some(integ) = &self.integrator {
            if integ.steps == 0 {
                return Err(CliError::Config("integrator: `steps` must be positive".into()));
            }
            if integ.monitor_every == 0 {
                return Err(CliError::Config(
                    "integrator: `monitor_every` must be positive".into(),
                ));
            }
            if let Some(dt) = integ.dt {
                if !(dt.is_finite() && dt > 0.0) {
                    return Err(CliError::Config(
                        "integrator: `dt` must be positive and finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or("unnamed scenario")
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Nodes per axis (each at least 8).
    pub dims: [usize; 3],
    /// Box edge lengths; coordinates are periodic on `[0, L_i)`.
    pub lengths: [f64; 3],
}

/// Background coordinate chart. Names: `identity` (no parameters),
/// `cylindrical-shell` (`r0`, default 1.5), `axial-stretch` (`amplitude`,
/// default 0.3).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartConfig {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

impl Default for ChartConfig {
    fn default() -> Self {
        Self { name: "identity".into(), params: serde_json::Value::Null }
    }
}

/// Reference to a built-in field provider with its parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderRef {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// Initial condition: either a manufactured lattice distortion (ground
/// truth available, round trips measurable) or direct deformation and
/// density fields.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub distortion: Option<ProviderRef>,
    #[serde(default)]
    pub deformation: Option<ProviderRef>,
    #[serde(default)]
    pub density: Option<ProviderRef>,
}

/// Velocity and dislocation-flow drivers; an absent block means a
/// quiescent medium.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriversConfig {
    #[serde(default)]
    pub velocity: Option<ProviderRef>,
    #[serde(default)]
    pub flow: Option<ProviderRef>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    /// Step size; when absent it defaults to a quarter of the minimum grid
    /// spacing divided by the larger of the driver sup-norms at start time
    /// (floored at 0.25).
    #[serde(default)]
    pub dt: Option<f64>,
    pub steps: usize,
    /// Diagnostics cadence in steps; the final step is always monitored.
    #[serde(default = "one")]
    pub monitor_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Newline-delimited JSON diagnostics file, one record per monitor
    /// instant, relative to the output root.
    #[serde(default)]
    pub diagnostics: Option<PathBuf>,
    /// Directory for field dumps, relative to the output root.
    #[serde(default)]
    pub fields: Option<PathBuf>,
    /// Dump cadence in steps; 0 dumps only the final state.
    #[serde(default)]
    pub dump_every: usize,
}

/// Residual limits deciding the exit code. A run reporting any value
/// beyond its limit exits with the threshold-violation code; the limits
/// below are the defaults and every scenario file may override them.
#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub curvature_sup: f64,
    pub divergency_sup: f64,
    pub concordance_sup: f64,
    pub form_equiv_sup: f64,
    /// Gap of density -> torsion -> density (pure algebra).
    pub torsion_round_trip: f64,
    /// Sup error of the reconstructed distortion after frame alignment.
    pub round_trip: f64,
    pub gauge_orthogonality: f64,
    /// Axis-order dependence of the reconstruction.
    pub path_gap: f64,
    /// Curvature level beyond which path integration refuses to run.
    pub pfaff_compatibility: f64,
    /// Least observed convergence order accepted by refinement studies.
    pub min_order: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            curvature_sup: 1e-3,
            divergency_sup: 1e-2,
            concordance_sup: 1e-8,
            form_equiv_sup: 1e-8,
            torsion_round_trip: 1e-12,
            round_trip: 1e-3,
            gauge_orthogonality: 1e-8,
            path_gap: 1e-3,
            pfaff_compatibility: dmk_core::reconstruct::DEFAULT_COMPATIBILITY_THRESHOLD,
            min_order: 3.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(initial: &str) -> String {
        format!(
            r#"{{
                "grid": {{ "dims": [8, 8, 8], "lengths": [6.28, 6.28, 6.28] }},
                "initial": {initial}
            }}"#
        )
    }

    #[test]
    fn accepts_minimal_distortion_config() {
        let text = minimal(r#"{ "distortion": { "name": "flat" } }"#);
        let config: ScenarioConfig = serde_json::from_str(&text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.chart.name, "identity");
        assert_eq!(config.thresholds.min_order, 3.5);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = r#"{
            "grid": { "dims": [8, 8, 8], "lengths": [6.28, 6.28, 6.28] },
            "initial": { "distortion": { "name": "flat" } },
            "extra_knob": 1
        }"#;
        let err = serde_json::from_str::<ScenarioConfig>(text).unwrap_err();
        assert!(err.to_string().contains("extra_knob"));

        let nested = r#"{
            "grid": { "dims": [8, 8, 8], "lengths": [6.28, 6.28, 6.28], "resolution": 2 },
            "initial": { "distortion": { "name": "flat" } }
        }"#;
        let err = serde_json::from_str::<ScenarioConfig>(nested).unwrap_err();
        assert!(err.to_string().contains("resolution"));
    }

    #[test]
    fn rejects_ambiguous_or_missing_initial_mode() {
        let both = minimal(
            r#"{
                "distortion": { "name": "flat" },
                "deformation": { "name": "flat" },
                "density": { "name": "flat" }
            }"#,
        );
        let config: ScenarioConfig = serde_json::from_str(&both).unwrap();
        assert!(config.validate().is_err());

        let none = minimal("{}");
        let config: ScenarioConfig = serde_json::from_str(&none).unwrap();
        assert!(config.validate().is_err());

        let half = minimal(r#"{ "deformation": { "name": "flat" } }"#);
        let config: ScenarioConfig = serde_json::from_str(&half).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn rejects_degenerate_integrator() {
        let text = r#"{
            "grid": { "dims": [8, 8, 8], "lengths": [6.28, 6.28, 6.28] },
            "initial": { "distortion": { "name": "flat" } },
            "integrator": { "dt": 0.0, "steps": 10 }
        }"#;
        let config: ScenarioConfig = serde_json::from_str(text).unwrap();
        assert!(config.validate().is_err());
    }
}
