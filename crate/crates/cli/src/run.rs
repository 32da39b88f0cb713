//! The four operations behind the subcommands: a static pipeline check, a
//! distortion reconstruction, a time evolution, and a refinement study.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use dmk_core::{
    alignment_defect, burgers_density_from_z, compatibility_residual, gauge_align,
    integrate_pfaff, monitor, partial_derivative, sig, stage_geometry, step,
    Error as CoreError, FieldProvider64, KinematicState64, PfaffOptions,
};

use crate::config::{IntegratorConfig, ScenarioConfig, Thresholds};
use crate::io;
use crate::report::{ConvergenceLevel, DiagnosticsRecord, Report, Summary};
use crate::scenario::{self, Scene};
use crate::CliError;

/// Pfaff initial value consistent with the state: the transposed Cholesky
/// factor of the deformation tensor at `node`, so the recovered distortion
/// reproduces the deformation there and the alignment gauge against any
/// ground truth comes out orthogonal. (State construction already
/// guarantees positive definiteness.)
pub fn initial_from_deformation(state: &KinematicState64, node: [usize; 3]) -> [[f64; 3]; 3] {
    let mut g = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            g[p][q] = state.deformation.value(&[p, q], node);
        }
    }
    let mut l = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..=p {
            let mut sum = g[p][q];
            for r in 0..q {
                sum -= l[p][r] * l[q][r];
            }
            if p == q {
                l[p][p] = sum.sqrt();
            } else {
                l[p][q] = sum / l[q][q];
            }
        }
    }
    // Rows are lattice indices, columns real: M[i][q] = L[q][i] gives
    // M^T M = G at the node.
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (q, entry) in row.iter_mut().enumerate() {
            *entry = l[q][i];
        }
    }
    m
}

/// Records a violation when `value` exceeds `limit` or is not a number;
/// the negated comparison keeps NaN from slipping through.
fn check_threshold(report: &mut Report, what: &str, value: f64, limit: f64) {
    if !(value <= limit) {
        report
            .violations
            .push(format!("{what} = {value:.3e} exceeds threshold {limit:.3e}"));
    }
}

fn check_record(report: &mut Report, record: &DiagnosticsRecord, thresholds: &Thresholds) {
    let t = record.time;
    check_threshold(
        report,
        &format!("curvature_sup at t={t}"),
        record.curvature_sup,
        thresholds.curvature_sup,
    );
    check_threshold(
        report,
        &format!("divergency_sup at t={t}"),
        record.divergency_sup,
        thresholds.divergency_sup,
    );
    check_threshold(
        report,
        &format!("concordance_sup at t={t}"),
        record.concordance_sup,
        thresholds.concordance_sup,
    );
    check_threshold(
        report,
        &format!("form_equiv_sup at t={t}"),
        record.form_equiv_sup,
        thresholds.form_equiv_sup,
    );
}

fn summarize(state: &KinematicState64) -> Summary {
    let grid = state.deformation.grid();
    let nn = grid.node_count();
    let data = state.deformation.data();
    let entry = |k: usize, q: usize, lin: usize| data[(k * 3 + q) * nn + lin];
    let mut det_min = f64::INFINITY;
    let mut det_max = f64::NEG_INFINITY;
    for lin in 0..nn {
        let det = entry(0, 0, lin) * (entry(1, 1, lin) * entry(2, 2, lin)
            - entry(1, 2, lin) * entry(2, 1, lin))
            - entry(0, 1, lin)
                * (entry(1, 0, lin) * entry(2, 2, lin) - entry(1, 2, lin) * entry(2, 0, lin))
            + entry(0, 2, lin)
                * (entry(1, 0, lin) * entry(2, 1, lin) - entry(1, 1, lin) * entry(2, 0, lin));
        det_min = det_min.min(det);
        det_max = det_max.max(det);
    }
    Summary {
        final_time: state.time,
        deformation_sup: state.deformation.sup_norm(),
        density_sup: state.density.sup_norm(),
        deformation_det_min: det_min,
        deformation_det_max: det_max,
    }
}

fn scenario_label(config: &ScenarioConfig) -> String {
    config.name.clone().unwrap_or_else(|| "unnamed".into())
}

/// Resolves a configured output path against the output root and makes
/// sure its parent directory exists.
fn resolve_output(out_root: &Path, configured: &Path) -> Result<PathBuf, CliError> {
    let path = out_root.join(configured);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|source| CliError::Io { path: parent.to_path_buf(), source })?;
        }
    }
    Ok(path)
}

fn write_diagnostics_if_configured(
    config: &ScenarioConfig,
    out_root: &Path,
    records: &[DiagnosticsRecord],
) -> Result<(), CliError> {
    if let Some(configured) = &config.output.diagnostics {
        let path = resolve_output(out_root, configured)?;
        io::write_ndjson(&path, records)?;
    }
    Ok(())
}

/// Static pipeline on the initial state: geometry, invariant monitors, and
/// the algebraic density round trip through the connection difference.
pub fn run_check(config: &ScenarioConfig, out_root: &Path) -> Result<Report, CliError> {
    let scene = scenario::build(config)?;
    let mut report = Report::new(scenario_label(config), "check");

    let record: DiagnosticsRecord =
        monitor(&scene.state, &scene.drivers, &scene.background)?.into();
    check_record(&mut report, &record, &config.thresholds);
    report.records.push(record);

    let stage = stage_geometry(&scene.state, &scene.background)?;
    let density_back =
        burgers_density_from_z(&stage.z, &scene.background.metric, &scene.background.volume)?;
    let torsion_round_trip = density_back.max_abs_diff(&scene.state.density)?;
    report.extras.insert("torsion_round_trip".into(), torsion_round_trip);
    check_threshold(
        &mut report,
        "torsion_round_trip",
        torsion_round_trip,
        config.thresholds.torsion_round_trip,
    );

    report.summary = Some(summarize(&scene.state));
    write_diagnostics_if_configured(config, out_root, &report.records)?;
    Ok(report)
}

/// Rebuilds the distortion from the state by path integration. In
/// distortion mode the result is gauge-aligned against the sampled ground
/// truth; in direct mode only the integrability gates apply (a
/// non-realizable state is reported through the refusal path).
pub fn run_reconstruct(config: &ScenarioConfig, out_root: &Path) -> Result<Report, CliError> {
    let scene = scenario::build(config)?;
    let mut report = Report::new(scenario_label(config), "reconstruct");

    let record: DiagnosticsRecord =
        monitor(&scene.state, &scene.drivers, &scene.background)?.into();
    report.records.push(record);

    let stage = stage_geometry(&scene.state, &scene.background)?;
    let options = PfaffOptions {
        compatibility_threshold: config.thresholds.pfaff_compatibility,
        ..PfaffOptions::default()
    };
    let initial = initial_from_deformation(&scene.state, options.base);

    let compat = compatibility_residual(&stage.material, &initial, &options)?;
    report.extras.insert("curvature_sup".into(), compat.curvature_sup);
    report.extras.insert("path_gap".into(), compat.path_gap);
    report.extras.insert("monodromy".into(), compat.monodromy);
    check_threshold(&mut report, "path_gap", compat.path_gap, config.thresholds.path_gap);

    match integrate_pfaff(&stage.material, &initial, &options) {
        Ok(recovered) => {
            if let Some(truth) = &scene.truth {
                match gauge_align(&recovered.components, &truth.components, options.base) {
                    Ok(gauge) => {
                        let orthogonality = gauge.orthogonality_residual();
                        let round_trip =
                            alignment_defect(&recovered.components, &truth.components, &gauge)?;
                        report.extras.insert("gauge_orthogonality".into(), orthogonality);
                        report.extras.insert("round_trip".into(), round_trip);
                        check_threshold(
                            &mut report,
                            "gauge_orthogonality",
                            orthogonality,
                            config.thresholds.gauge_orthogonality,
                        );
                        check_threshold(
                            &mut report,
                            "round_trip",
                            round_trip,
                            config.thresholds.round_trip,
                        );
                    }
                    Err(CoreError::GaugeMismatch { residual, tolerance }) => {
                        report.extras.insert("gauge_mismatch_residual".into(), residual);
                        report.violations.push(format!(
                            "gauge-mismatch: recovered and true distortions differ by more \
                             than a constant rotation (residual {residual:.3e}, tolerance \
                             {tolerance:.3e})"
                        ));
                    }
                    Err(other) => return Err(other.into()),
                }
            }
        }
        Err(CoreError::IncompatibleConnection { residual, threshold }) => {
            report.violations.push(format!(
                "incompatible-connection: curvature sup-norm {residual:.3e} exceeds \
                 threshold {threshold:.3e}; the state is not realizable by any distortion"
            ));
        }
        Err(other) => return Err(other.into()),
    }

    report.summary = Some(summarize(&scene.state));
    write_diagnostics_if_configured(config, out_root, &report.records)?;
    Ok(report)
}

/// Default time step: a quarter of the smallest grid spacing divided by the
/// fastest driver scale sampled at the initial time (floored so quiescent
/// scenarios still get a finite step).
fn default_dt(scene: &Scene) -> Result<f64, CliError> {
    let hmin = {
        let s = scene.grid.spacing();
        s[0].min(s[1]).min(s[2])
    };
    let vmax = scene.drivers.velocity.sample(&scene.grid, 0.0)?.sup_norm();
    let jmax = scene.drivers.flow.sample(&scene.grid, 0.0)?.sup_norm();
    Ok(0.25 * hmin / vmax.max(jmax).max(0.25))
}

fn dump_fields(
    config: &ScenarioConfig,
    out_root: &Path,
    state: &KinematicState64,
    step_index: usize,
) -> Result<(), CliError> {
    let Some(fields_dir) = &config.output.fields else { return Ok(()) };
    let dir = out_root.join(fields_dir);
    std::fs::create_dir_all(&dir)
        .map_err(|source| CliError::Io { path: dir.clone(), source })?;
    for (name, field) in
        [("deformation", &state.deformation), ("density", &state.density)]
    {
        io::write_vtk(&dir.join(format!("{name}_{step_index}.vtk")), name, field)?;
        io::write_raw(&dir.join(format!("{name}_{step_index}.tdgf")), field)?;
    }
    Ok(())
}

fn should_dump(config: &ScenarioConfig, step_index: usize, steps: usize) -> bool {
    if config.output.fields.is_none() {
        return false;
    }
    let cadence = config.output.dump_every;
    (cadence > 0 && step_index % cadence == 0) || step_index == steps
}

/// Integrates the state forward, monitoring the invariants on the
/// configured cadence and dumping fields when asked to.
pub fn run_evolve(config: &ScenarioConfig, out_root: &Path) -> Result<Report, CliError> {
    let Some(integrator) = &config.integrator else {
        return Err(CliError::Config("evolve needs an `integrator` block".into()));
    };
    let scene = scenario::build(config)?;
    let IntegratorConfig { steps, monitor_every, .. } = *integrator;
    let dt = match integrator.dt {
        Some(dt) => dt,
        None => default_dt(&scene)?,
    };

    let mut report = Report::new(scenario_label(config), "evolve");
    let mut state = scene.state;

    let record: DiagnosticsRecord = monitor(&state, &scene.drivers, &scene.background)?.into();
    check_record(&mut report, &record, &config.thresholds);
    report.records.push(record);
    if should_dump(config, 0, steps) {
        dump_fields(config, out_root, &state, 0)?;
    }

    for step_index in 1..=steps {
        state = step(&state, &scene.drivers, &scene.background, dt).map_err(|e| match e {
            CoreError::LostPositivity { .. } | CoreError::NonFiniteState { .. } => {
                CliError::Blowup { step: step_index, source: e }
            }
            other => CliError::Numeric(other),
        })?;
        if step_index % monitor_every == 0 || step_index == steps {
            let record: DiagnosticsRecord =
                monitor(&state, &scene.drivers, &scene.background)?.into();
            check_record(&mut report, &record, &config.thresholds);
            report.records.push(record);
        }
        if should_dump(config, step_index, steps) {
            dump_fields(config, out_root, &state, step_index)?;
        }
    }

    report.extras.insert("dt".into(), dt);
    report.summary = Some(summarize(&state));
    write_diagnostics_if_configured(config, out_root, &report.records)?;
    Ok(report)
}

/// Measures one refinement level: finite-difference probe, invariant
/// monitors, and (in distortion mode) the reconstruction round trip.
fn measure_level(
    config: &ScenarioConfig,
    factor: usize,
) -> Result<ConvergenceLevel, CliError> {
    let scene = scenario::build_refined(config, factor)?;
    let mut measures = BTreeMap::new();

    // Probe the differentiation stencil against a closed-form derivative.
    let k = TAU / config.grid.lengths[0];
    let probe = FieldProvider64::new(sig::real_u(), move |y: [f64; 3], _, out: &mut [f64]| {
        out.fill(0.0);
        out[0] = (k * y[0]).sin();
    });
    let sampled = probe.sample(&scene.grid, 0.0)?;
    let derived = partial_derivative(&sampled, 0)?;
    let exact = FieldProvider64::new(sig::real_u(), move |y: [f64; 3], _, out: &mut [f64]| {
        out.fill(0.0);
        out[0] = k * (k * y[0]).cos();
    })
    .sample(&scene.grid, 0.0)?;
    measures.insert("fd_probe".into(), derived.max_abs_diff(&exact)?);

    let diag = monitor(&scene.state, &scene.drivers, &scene.background)?;
    measures.insert("curvature_sup".into(), diag.curvature_sup);
    measures.insert("divergency_sup".into(), diag.divergency_sup);

    if let Some(truth) = &scene.truth {
        let stage = stage_geometry(&scene.state, &scene.background)?;
        // The study measures how fast the defect shrinks, so integration
        // must proceed even where a gate would refuse.
        let options = PfaffOptions {
            compatibility_threshold: f64::INFINITY,
            ..PfaffOptions::default()
        };
        let initial = initial_from_deformation(&scene.state, options.base);
        let recovered = integrate_pfaff(&stage.material, &initial, &options)?;
        let gauge = gauge_align(&recovered.components, &truth.components, options.base)?;
        let round_trip = alignment_defect(&recovered.components, &truth.components, &gauge)?;
        measures.insert("round_trip".into(), round_trip);
    }

    let spacing = scene.grid.spacing();
    Ok(ConvergenceLevel {
        factor,
        spacing: spacing[0].min(spacing[1]).min(spacing[2]),
        measures,
    })
}

/// Least-squares slope of `ln(err)` against `ln(h)`.
fn fit_order(levels: &[ConvergenceLevel], key: &str) -> Option<f64> {
    let points: Vec<(f64, f64)> = levels
        .iter()
        .filter_map(|level| {
            let err = *level.measures.get(key)?;
            // Errors at rounding level carry no resolution signal.
            (err.is_finite() && err > 1e-14).then(|| (level.spacing.ln(), err.ln()))
        })
        .collect();
    if points.len() != levels.len() {
        return None;
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    (denom.abs() > 0.0).then(|| (n * sxy - sx * sy) / denom)
}

/// Refinement study: reruns the scenario on grids refined by factors
/// 1, 2, 4, ... and fits observed convergence orders.
pub fn run_convergence(
    config: &ScenarioConfig,
    refinement_levels: usize,
    out_root: &Path,
) -> Result<Report, CliError> {
    if refinement_levels < 2 {
        return Err(CliError::Config(
            "a convergence study needs at least 2 refinement levels".into(),
        ));
    }
    let mut report = Report::new(scenario_label(config), "converge");

    let mut levels = Vec::with_capacity(refinement_levels);
    for exponent in 0..refinement_levels {
        levels.push(measure_level(config, 1 << exponent)?);
    }

    let mut orders = BTreeMap::new();
    let keys: Vec<String> = levels[0].measures.keys().cloned().collect();
    for key in keys {
        if let Some(order) = fit_order(&levels, &key) {
            orders.insert(key, order);
        }
    }
    for gated in ["fd_probe", "curvature_sup", "round_trip"] {
        if let Some(&order) = orders.get(gated) {
            if !(order >= config.thresholds.min_order) {
                report.violations.push(format!(
                    "{gated} converges at order {order:.2}, below the required {:.2}",
                    config.thresholds.min_order
                ));
            }
        }
    }

    report.convergence = Some(levels);
    report.orders = Some(orders);
    write_diagnostics_if_configured(config, out_root, &report.records)?;
    Ok(report)
}
