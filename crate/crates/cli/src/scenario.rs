//! Turns a validated configuration into the objects the library works on:
//! grid, background geometry, initial state, and drivers.

use dmk_core::reconstruct::{burgers_from_distortion, deformation_from_distortion, Distortion};
use dmk_core::{Background64, Chart64, Drivers64, Grid64, KinematicState64};

use crate::config::{ProviderRef, ScenarioConfig};
use crate::providers::{self, Slot};
use crate::CliError;

/// A fully assembled scenario, ready for any of the run operations.
#[derive(Debug)]
pub struct Scene {
    pub grid: Grid64,
    pub background: Background64,
    pub state: KinematicState64,
    pub drivers: Drivers64,
    /// The sampled distortion when the scenario is specified by one; kept
    /// so reconstruction runs can compare against the original.
    pub truth: Option<Distortion<f64>>,
}

/// Assembles the scene at the configured resolution.
pub fn build(config: &ScenarioConfig) -> Result<Scene, CliError> {
    build_refined(config, 1)
}

/// Assembles the scene on a grid refined by `factor` along every axis.
/// Providers are continuous, so refinement re-samples the same scenario.
pub fn build_refined(config: &ScenarioConfig, factor: usize) -> Result<Scene, CliError> {
    let dims = config.grid.dims;
    let refined = [dims[0] * factor, dims[1] * factor, dims[2] * factor];
    let grid = Grid64::new(refined, config.grid.lengths)
        .map_err(|e| CliError::Config(format!("grid: {e}")))?;
    let chart = chart_from_config(config)?;
    let background =
        Background64::new(grid, &chart).map_err(|e| CliError::Config(format!("chart: {e}")))?;

    let lengths = config.grid.lengths;
    let (state, truth) = if let Some(reference) = &config.initial.distortion {
        let provider = providers::build(Slot::Distortion, reference, lengths)?;
        let sampled = provider.sample(&grid, 0.0).map_err(CliError::Numeric)?;
        let distortion = Distortion::new(sampled).map_err(|e| {
            CliError::Config(format!("initial distortion is not invertible: {e}"))
        })?;
        let deformation = deformation_from_distortion(&distortion, None)?;
        let density = burgers_from_distortion(
            &distortion,
            &background.metric,
            &background.volume,
            &background.lc,
        )?;
        let state = KinematicState64::new(deformation, density, 0.0)?;
        (state, Some(distortion))
    } else {
        let deformation_ref = config.initial.deformation.as_ref().expect("validated config");
        let density_ref = config.initial.density.as_ref().expect("validated config");
        let deformation = providers::build(Slot::Deformation, deformation_ref, lengths)?
            .sample(&grid, 0.0)
            .map_err(CliError::Numeric)?;
        let density = providers::build(Slot::Density, density_ref, lengths)?
            .sample(&grid, 0.0)
            .map_err(CliError::Numeric)?;
        let state = KinematicState64::new(deformation, density, 0.0).map_err(|e| {
            CliError::Config(format!("initial deformation/density rejected: {e}"))
        })?;
        (state, None)
    };

    let drivers = drivers_from_config(config, lengths)?;
    Ok(Scene { grid, background, state, drivers, truth })
}

fn chart_from_config(config: &ScenarioConfig) -> Result<Chart64, CliError> {
    let name = config.chart.name.as_str();
    let params = &config.chart.params;
    match name {
        "identity" => {
            require_no_params("identity", params)?;
            Ok(Chart64::identity())
        }
        "cylindrical-shell" => {
            let p: ShellParams = chart_params("cylindrical-shell", params)?;
            if !(p.inner_radius > 0.0) {
                return Err(CliError::Config(
                    "chart `cylindrical-shell`: inner_radius must be positive".into(),
                ));
            }
            Ok(Chart64::cylindrical_shell(p.inner_radius))
        }
        "axial-stretch" => {
            let p: StretchParams = chart_params("axial-stretch", params)?;
            if !(p.amplitude.abs() < 1.0) {
                return Err(CliError::Config(
                    "chart `axial-stretch`: |amplitude| must stay below 1".into(),
                ));
            }
            Ok(Chart64::axial_stretch(p.amplitude))
        }
        other => Err(CliError::Config(format!(
            "unknown chart `{other}`; catalog: identity, cylindrical-shell, axial-stretch"
        ))),
    }
}

fn require_no_params(name: &str, params: &serde_json::Value) -> Result<(), CliError> {
    if params.is_null() {
        Ok(())
    } else {
        Err(CliError::Config(format!("chart `{name}` takes no params")))
    }
}

fn chart_params<P: serde::de::DeserializeOwned + Default>(
    name: &str,
    value: &serde_json::Value,
) -> Result<P, CliError> {
    if value.is_null() {
        return Ok(P::default());
    }
    serde_json::from_value(value.clone())
        .map_err(|e| CliError::Config(format!("chart `{name}` params: {e}")))
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ShellParams {
    inner_radius: f64,
}

impl Default for ShellParams {
    fn default() -> Self {
        Self { inner_radius: 1.5 }
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct StretchParams {
    amplitude: f64,
}

impl Default for StretchParams {
    fn default() -> Self {
        Self { amplitude: 0.3 }
    }
}

fn drivers_from_config(
    config: &ScenarioConfig,
    lengths: [f64; 3],
) -> Result<Drivers64, CliError> {
    let Some(drivers) = &config.drivers else {
        return Ok(Drivers64::quiescent());
    };
    let zero = ProviderRef { name: "flat".into(), params: serde_json::Value::Null };
    let velocity_ref = drivers.velocity.as_ref().unwrap_or(&zero);
    let flow_ref = drivers.flow.as_ref().unwrap_or(&zero);
    let velocity = providers::build(Slot::Velocity, velocity_ref, lengths)?;
    let flow = providers::build(Slot::Flow, flow_ref, lengths)?;
    Drivers64::new(velocity, flow).map_err(|e| CliError::Config(format!("drivers: {e}")))
}
