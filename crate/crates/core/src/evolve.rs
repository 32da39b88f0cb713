//! Time evolution of the kinematic state and its invariant monitors.
//!
//! The state consists of the elastic deformation tensor (a Riemannian
//! metric on the body) and the Burgers-vector density, advanced in time
//! under prescribed velocity and dislocation-flow drivers. Every
//! right-hand-side evaluation rebuilds the material connection from the
//! instantaneous state — torsion from the density, coefficients from the
//! concordance condition — so the flatness constraint is enforced
//! structurally rather than integrated as extra unknowns.
//!
//! Two algebraically equivalent forms of the equations of motion are
//! implemented. The *hatted* form is written through the material covariant
//! derivative and drives the integrator by default; the *reference* form is
//! written through the background derivative plus explicit defect terms and
//! serves as a cross-check. When both are fed the same sampled derivatives
//! their gap is pure roundoff, so a transcription error in either form
//! surfaces immediately in the `form_equiv_sup` diagnostic.
//!
//! Drivers must carry analytic gradients: a velocity field (a rigid
//! rotation, say) need not be periodic, so differentiating it with the
//! periodic stencils would poison the right-hand side near the box faces.
//! State fields are periodic by construction and are differentiated with
//! the fourth-order stencils.

use crate::error::{Error, Result};
use crate::geometry::{
    concordant_connection, covariant_derivative, covariant_derivative_with, curvature,
    divergency_residual, levi_civita_connection, torsion_from_burgers_density, z_tensor,
    Connection,
};
use crate::grid::{gradient_stack, Chart, FieldProvider, Grid};
use crate::reconstruct::Distortion;
use crate::scalar::Real;
use crate::tensor::{
    contract, is_spd, matrix_at, sig, volume_tensor, Metric, TensorField, VolumeTensor,
};

/// Relative asymmetry tolerated in a deformation tensor handed to
/// [`KinematicState::new`]; evolution keeps the field exactly symmetric, so
/// anything beyond roundoff indicates a construction bug upstream.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Static geometry of the body: the chart metric, its volume tensor, and
/// its Levi-Civita connection, all fixed for the lifetime of a run.
#[derive(Clone, Debug)]
pub struct Background<T> {
    pub grid: Grid<T>,
    pub metric: Metric<T>,
    pub volume: VolumeTensor<T>,
    pub lc: Connection<T>,
}

impl<T: Real> Background<T> {
    /// Builds the background from a coordinate chart.
    pub fn new(grid: Grid<T>, chart: &Chart<T>) -> Result<Self> {
        let metric = Metric::from_chart(chart, &grid)?;
        let volume = volume_tensor(&metric);
        let lc = levi_civita_connection(&metric)?;
        Ok(Self { grid, metric, volume, lc })
    }

    /// Cartesian background: identity metric, zero connection.
    pub fn flat(grid: Grid<T>) -> Result<Self> {
        Self::new(grid, &Chart::identity())
    }
}

/// Instantaneous state of the medium: the elastic deformation tensor
/// (symmetric positive definite, lower indices), the Burgers-vector
/// density (mixed indices), and optionally the plastic deformation tensor
/// (mixed indices), tagged with the current time.
#[derive(Clone, Debug)]
pub struct KinematicState<T> {
    pub deformation: TensorField<T>,
    pub density: TensorField<T>,
    pub plastic: Option<TensorField<T>>,
    pub time: T,
}

impl<T: Real> KinematicState<T> {
    /// Validates signatures, symmetry, positivity, and finiteness.
    pub fn new(deformation: TensorField<T>, density: TensorField<T>, time: T) -> Result<Self> {
        if deformation.signature() != sig::real_ll() {
            return Err(Error::Signature(
                "deformation tensor needs signature (lower, lower)".into(),
            ));
        }
        if density.signature() != sig::real_ul() {
            return Err(Error::Signature(
                "Burgers density needs signature (upper, lower)".into(),
            ));
        }
        if deformation.grid() != density.grid() {
            return Err(Error::InvalidArgument("state fields live on different grids".into()));
        }
        deformation.ensure_finite(time)?;
        density.ensure_finite(time)?;
        let scale = deformation.sup_norm();
        let mut asym = T::zero();
        for k in 0..3 {
            for q in (k + 1)..3 {
                let upper = deformation.component(k * 3 + q);
                let lower = deformation.component(q * 3 + k);
                for (&a, &b) in upper.iter().zip(lower) {
                    asym = asym.max((a - b).abs());
                }
            }
        }
        if asym > T::of(SYMMETRY_TOLERANCE) * (T::one() + scale) {
            return Err(Error::InvalidArgument(format!(
                "deformation tensor asymmetric: residual {:e}",
                asym.as_f64()
            )));
        }
        let grid = *deformation.grid();
        for lin in 0..grid.node_count() {
            if !is_spd(&matrix_at(&deformation, lin)) {
                return Err(Error::IndefiniteMetric { node: grid.unravel(lin) });
            }
        }
        Ok(Self { deformation, density, plastic: None, time })
    }

    /// Attaches a plastic deformation tensor to be co-evolved.
    pub fn with_plastic(mut self, plastic: TensorField<T>) -> Result<Self> {
        if plastic.signature() != sig::real_ul() {
            return Err(Error::Signature(
                "plastic deformation tensor needs signature (upper, lower)".into(),
            ));
        }
        if plastic.grid() != self.deformation.grid() {
            return Err(Error::InvalidArgument("plastic field lives on a different grid".into()));
        }
        plastic.ensure_finite(self.time)?;
        self.plastic = Some(plastic);
        Ok(self)
    }
}

/// Prescribed inputs of the evolution: the material velocity (rank-1,
/// upper) and the Burgers-flow density (mixed rank-2), both as analytic
/// providers over space and time.
#[derive(Clone, Debug)]
pub struct Drivers<T> {
    pub velocity: FieldProvider<T>,
    pub flow: FieldProvider<T>,
}

impl<T: Real> Drivers<T> {
    /// Validates shapes and requires analytic gradients on both providers
    /// (see the module notes on non-periodic velocities).
    pub fn new(velocity: FieldProvider<T>, flow: FieldProvider<T>) -> Result<Self> {
        if velocity.signature() != sig::real_u() {
            return Err(Error::Signature("velocity provider must be rank-1 (upper)".into()));
        }
        if flow.signature() != sig::real_ul() {
            return Err(Error::Signature("flow provider must be rank-2 (upper, lower)".into()));
        }
        if !velocity.has_gradient() || !flow.has_gradient() {
            return Err(Error::InvalidArgument(
                "drivers need analytic gradients; sampled derivatives of possibly \
                 non-periodic drivers are not usable"
                    .into(),
            ));
        }
        Ok(Self { velocity, flow })
    }

    /// Zero velocity and zero flow: the state should not move.
    pub fn quiescent() -> Self {
        Self {
            velocity: FieldProvider::constant(sig::real_u(), vec![T::zero(); 3])
                .expect("constant rank-1 provider"),
            flow: FieldProvider::constant(sig::real_ul(), vec![T::zero(); 9])
                .expect("constant rank-2 provider"),
        }
    }
}

/// Scalar invariant monitors of one state instant. All residuals are
/// sup-norms and vanish (to discretization error) on states that derive
/// from an actual lattice distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics<T> {
    pub time: T,
    /// Curvature of the material connection: flatness residual.
    pub curvature_sup: T,
    /// Divergence-type conservation residual of the density.
    pub divergency_sup: T,
    /// Residual of the metricity of the material connection.
    pub concordance_sup: T,
    /// Gap between the hatted and reference right-hand sides.
    pub form_equiv_sup: T,
}

/// Geometry rebuilt from one state instant: torsion from the density, the
/// deformation tensor promoted to a metric (inverse, determinant, sampled
/// gradient), the concordant material connection, and the defect tensor.
#[derive(Clone, Debug)]
pub struct StageGeometry<T> {
    pub torsion: TensorField<T>,
    pub deformation: Metric<T>,
    pub material: Connection<T>,
    pub z: TensorField<T>,
}

impl<T: Real> StageGeometry<T> {
    /// Sampled partial derivatives of the deformation tensor, shared by
    /// every consumer of this stage.
    pub fn deformation_partials(&self) -> &TensorField<T> {
        self.deformation
            .gradient
            .as_ref()
            .expect("stage geometry always carries the sampled gradient")
    }
}

/// Builds the per-stage geometry. Loss of positive definiteness is
/// reported as a blow-up at the state's time, since during stepping this
/// is where an unstable integration first manifests.
pub fn stage_geometry<T: Real>(
    state: &KinematicState<T>,
    background: &Background<T>,
) -> Result<StageGeometry<T>> {
    let torsion =
        torsion_from_burgers_density(&state.density, &background.metric, &background.volume)?;
    let partials = gradient_stack(&state.deformation)?;
    let deformation =
        Metric::from_field(state.deformation.clone(), Some(partials)).map_err(|e| match e {
            Error::IndefiniteMetric { node } => {
                Error::LostPositivity { node, time: state.time.as_f64() }
            }
            other => other,
        })?;
    let material = concordant_connection(
        &deformation,
        deformation.gradient.as_ref().expect("gradient attached above"),
        &torsion,
    )?;
    let z = z_tensor(&material, &background.lc)?;
    Ok(StageGeometry { torsion, deformation, material, z })
}

/// Plastic spin source: `theta^r_q = -flow^r_q + sum_p v^p (z^r_pq - z^r_qp)`.
///
/// Whenever `z` and `flow` derive from one lattice distortion and one
/// lattice flow, this equals the distortion-level formula
/// [`theta_from_distortion`] to roundoff.
pub fn theta<T: Real>(
    flow: &TensorField<T>,
    z: &TensorField<T>,
    velocity: &TensorField<T>,
) -> Result<TensorField<T>> {
    if flow.signature() != sig::real_ul()
        || z.signature() != sig::conn()
        || velocity.signature() != sig::real_u()
    {
        return Err(Error::Signature(
            "theta needs flow (upper, lower), defect (upper, lower, lower), velocity (upper)"
                .into(),
        ));
    }
    let z_antisym = z.sub(&z.permute(&[0, 2, 1])?)?;
    let swirl = contract(velocity, &z_antisym, &[(0, 1)])?;
    swirl.sub(flow)
}

/// Plastic spin from the lattice-level fields: the distortion, the
/// double-space flow `lattice_flow^i_q` (Burgers upper, real lower), the
/// velocity, and analytic partials of the distortion; derivatives are taken
/// with the background connection (the Burgers slot is inert).
pub fn theta_from_distortion<T: Real>(
    distortion: &Distortion<T>,
    lattice_flow: &TensorField<T>,
    velocity: &TensorField<T>,
    distortion_partials: &TensorField<T>,
    lc: &Connection<T>,
) -> Result<TensorField<T>> {
    if lattice_flow.signature() != sig::distortion() {
        return Err(Error::Signature(
            "lattice flow needs signature (burgers upper, real lower)".into(),
        ));
    }
    let nabla_t =
        covariant_derivative_with(&distortion.components, distortion_partials, lc)?;
    let by_burgers = nabla_t.permute(&[1, 0, 2])?;
    let antisym = by_burgers.sub(&by_burgers.permute(&[0, 2, 1])?)?;
    let swirl_lattice = contract(&antisym, velocity, &[(1, 0)])?;
    let swirl = contract(&distortion.inverse, &swirl_lattice, &[(1, 0)])?;
    let drain = contract(&distortion.inverse, lattice_flow, &[(1, 0)])?;
    swirl.sub(&drain)
}

/// Deformation-tensor rate in the material-covariant (hatted) form:
///
/// ```text
/// dG_kq/dt = - hatD_k v^r G_rq - hatD_q v^r G_kr - J^r_k G_rq - G_kr J^r_q
/// ```
///
/// The output is bitwise symmetric: each pair of terms is assembled as a
/// matrix plus its own transpose.
pub fn rhs_deformation_hatted<T: Real>(
    deformation: &TensorField<T>,
    velocity: &TensorField<T>,
    velocity_partials: &TensorField<T>,
    flow: &TensorField<T>,
    material: &Connection<T>,
) -> Result<TensorField<T>> {
    let hat_v = covariant_derivative_with(velocity, velocity_partials, material)?;
    let stretch = contract(&hat_v, deformation, &[(1, 0)])?;
    let stretch_sym = stretch.add(&stretch.permute(&[1, 0])?)?;
    let drain = contract(flow, deformation, &[(0, 0)])?;
    let drain_sym = drain.add(&drain.permute(&[1, 0])?)?;
    Ok(stretch_sym.add(&drain_sym)?.scale(-T::one()))
}

/// Density rate in the material-covariant (hatted) form:
///
/// ```text
/// dR^k_q/dt = sum_m hatD_m v^k R^m_q - sum_mrs g_qm w^mrs hatD_r J^k_s
/// ```
pub fn rhs_density_hatted<T: Real>(
    density: &TensorField<T>,
    velocity: &TensorField<T>,
    velocity_partials: &TensorField<T>,
    flow: &TensorField<T>,
    flow_partials: &TensorField<T>,
    material: &Connection<T>,
    background: &Background<T>,
) -> Result<TensorField<T>> {
    let hat_v = covariant_derivative_with(velocity, velocity_partials, material)?;
    let grow = contract(&hat_v, density, &[(0, 0)])?;
    let hat_j = covariant_derivative_with(flow, flow_partials, material)?;
    let curl = contract(&background.volume.upper, &hat_j, &[(1, 0), (2, 2)])?;
    let sink = contract(&background.metric.g, &curl, &[(1, 0)])?.permute(&[1, 0])?;
    grow.sub(&sink)
}

/// Both rates in the background-covariant (reference) form: advection and
/// plastic-spin terms for the deformation tensor,
///
/// ```text
/// dG_kq/dt = - v^r D_r G_kq - D_k v^r G_rq - G_kr D_q v^r
///            + theta^r_k G_rq + G_kr theta^r_q,
/// ```
///
/// and flow/defect terms for the density,
///
/// ```text
/// dR^k_q/dt = J^k_p R^p_q + D_m v^k R^m_q + v^p z^k_mp R^m_q
///             - g_qm w^mrs (D_r J^k_s + z^k_rp J^p_s).
/// ```
///
/// Uses the same sampled deformation gradient as the hatted path (through
/// `stage`), so the two forms differ only by roundoff.
#[allow(clippy::too_many_arguments)]
pub fn rhs_reference<T: Real>(
    state: &KinematicState<T>,
    velocity: &TensorField<T>,
    velocity_partials: &TensorField<T>,
    flow: &TensorField<T>,
    flow_partials: &TensorField<T>,
    spin: &TensorField<T>,
    stage: &StageGeometry<T>,
    background: &Background<T>,
) -> Result<(TensorField<T>, TensorField<T>)> {
    let lc = &background.lc;
    let g = &state.deformation;
    let nabla_g = covariant_derivative_with(g, stage.deformation_partials(), lc)?;
    let nabla_v = covariant_derivative_with(velocity, velocity_partials, lc)?;

    let advect = contract(velocity, &nabla_g, &[(0, 0)])?;
    let stretch = contract(&nabla_v, g, &[(1, 0)])?;
    let stretch_t = stretch.permute(&[1, 0])?;
    let spin_g = contract(spin, g, &[(0, 0)])?;
    let spin_g_t = spin_g.permute(&[1, 0])?;
    let d_deformation = spin_g
        .add(&spin_g_t)?
        .sub(&advect)?
        .sub(&stretch)?
        .sub(&stretch_t)?;

    let density = &state.density;
    let feed = contract(flow, density, &[(1, 0)])?;
    let grow = contract(&nabla_v, density, &[(0, 0)])?;
    let vz = contract(&stage.z, velocity, &[(2, 0)])?;
    let carry = contract(&vz, density, &[(1, 0)])?;
    let nabla_j = covariant_derivative_with(flow, flow_partials, lc)?;
    let curl = contract(&background.volume.upper, &nabla_j, &[(1, 0), (2, 2)])?;
    let sink = contract(&background.metric.g, &curl, &[(1, 0)])?.permute(&[1, 0])?;
    let zj = contract(&stage.z, flow, &[(2, 0)])?;
    let curl_zj = contract(&background.volume.upper, &zj, &[(1, 1), (2, 2)])?;
    let sink_zj = contract(&background.metric.g, &curl_zj, &[(1, 0)])?.permute(&[1, 0])?;
    let d_density = feed.add(&grow)?.add(&carry)?.sub(&sink)?.sub(&sink_zj)?;

    Ok((d_deformation, d_density))
}

/// Plastic deformation rate (advective form, everything on the right):
///
/// ```text
/// dP^k_i/dt = - v^r D_r P^k_i + P^r_i D_r v^k - D_i v^r P^k_r
///             - theta^k_r P^r_i
/// ```
///
/// The plastic field is periodic state, so its advection uses the sampled
/// stencils; the velocity gradient stays analytic.
pub fn rhs_plastic<T: Real>(
    plastic: &TensorField<T>,
    velocity: &TensorField<T>,
    velocity_partials: &TensorField<T>,
    spin: &TensorField<T>,
    lc: &Connection<T>,
) -> Result<TensorField<T>> {
    if plastic.signature() != sig::real_ul() {
        return Err(Error::Signature(
            "plastic deformation tensor needs signature (upper, lower)".into(),
        ));
    }
    let nabla_p = covariant_derivative(plastic, lc)?;
    let advect = contract(velocity, &nabla_p, &[(0, 0)])?;
    let nabla_v = covariant_derivative_with(velocity, velocity_partials, lc)?;
    let grow = contract(&nabla_v, plastic, &[(0, 0)])?;
    let shear = contract(plastic, &nabla_v, &[(1, 1)])?;
    let spin_p = contract(spin, plastic, &[(1, 0)])?;
    grow.sub(&advect)?.sub(&shear)?.sub(&spin_p)
}

/// Which of the two equivalent right-hand sides drives the integrator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhsForm {
    /// Material-covariant form (default).
    Hatted,
    /// Background-covariant form with explicit defect terms.
    Reference,
}

struct DriverSamples<T> {
    v: TensorField<T>,
    dv: TensorField<T>,
    flow: TensorField<T>,
    dflow: TensorField<T>,
}

fn sample_drivers<T: Real>(
    drivers: &Drivers<T>,
    grid: &Grid<T>,
    t: T,
) -> Result<DriverSamples<T>> {
    Ok(DriverSamples {
        v: drivers.velocity.sample(grid, t)?,
        dv: drivers.velocity.sample_gradient_stack(grid, t)?,
        flow: drivers.flow.sample(grid, t)?,
        dflow: drivers.flow.sample_gradient_stack(grid, t)?,
    })
}

struct Rates<T> {
    deformation: TensorField<T>,
    density: TensorField<T>,
    plastic: Option<TensorField<T>>,
}

fn rates<T: Real>(
    state: &KinematicState<T>,
    drivers: &Drivers<T>,
    background: &Background<T>,
    form: RhsForm,
) -> Result<Rates<T>> {
    let s = sample_drivers(drivers, &background.grid, state.time)?;
    let stage = stage_geometry(state, background)?;
    let (d_deformation, d_density) = match form {
        RhsForm::Hatted => (
            rhs_deformation_hatted(
                &state.deformation,
                &s.v,
                &s.dv,
                &s.flow,
                &stage.material,
            )?,
            rhs_density_hatted(
                &state.density,
                &s.v,
                &s.dv,
                &s.flow,
                &s.dflow,
                &stage.material,
                background,
            )?,
        ),
        RhsForm::Reference => {
            let spin = theta(&s.flow, &stage.z, &s.v)?;
            rhs_reference(state, &s.v, &s.dv, &s.flow, &s.dflow, &spin, &stage, background)?
        }
    };
    let plastic = match &state.plastic {
        Some(p) => {
            let spin = theta(&s.flow, &stage.z, &s.v)?;
            Some(rhs_plastic(p, &s.v, &s.dv, &spin, &background.lc)?)
        }
        None => None,
    };
    Ok(Rates { deformation: d_deformation, density: d_density, plastic })
}

fn advanced<T: Real>(
    state: &KinematicState<T>,
    k: &Rates<T>,
    h: T,
) -> Result<KinematicState<T>> {
    let mut deformation = state.deformation.clone();
    deformation.add_scaled(&k.deformation, h)?;
    let mut density = state.density.clone();
    density.add_scaled(&k.density, h)?;
    let plastic = match (&state.plastic, &k.plastic) {
        (Some(p), Some(dp)) => {
            let mut out = p.clone();
            out.add_scaled(dp, h)?;
            Some(out)
        }
        _ => None,
    };
    Ok(KinematicState { deformation, density, plastic, time: state.time + h })
}

/// Averages the deformation tensor with its transpose in place. The exact
/// rate is symmetric, so this only removes roundoff drift.
fn resymmetrize<T: Real>(field: &mut TensorField<T>) {
    let nn = field.grid().node_count();
    let half = T::of(0.5);
    let data = field.data_mut();
    for k in 0..3 {
        for q in (k + 1)..3 {
            let a = (k * 3 + q) * nn;
            let b = (q * 3 + k) * nn;
            for lin in 0..nn {
                let m = (data[a + lin] + data[b + lin]) * half;
                data[a + lin] = m;
                data[b + lin] = m;
            }
        }
    }
}

fn require_spd<T: Real>(deformation: &TensorField<T>, time: T) -> Result<()> {
    let grid = *deformation.grid();
    for lin in 0..grid.node_count() {
        if !is_spd(&matrix_at(deformation, lin)) {
            return Err(Error::LostPositivity {
                node: grid.unravel(lin),
                time: time.as_f64(),
            });
        }
    }
    Ok(())
}

/// One classical fourth-order explicit step of size `dt` with the hatted
/// right-hand side.
pub fn step<T: Real>(
    state: &KinematicState<T>,
    drivers: &Drivers<T>,
    background: &Background<T>,
    dt: T,
) -> Result<KinematicState<T>> {
    step_with(state, drivers, background, dt, RhsForm::Hatted)
}

/// One classical fourth-order explicit step with a chosen right-hand-side
/// form. The resulting deformation tensor is re-symmetrized, then checked
/// finite and positive definite; failures carry the node and time.
pub fn step_with<T: Real>(
    state: &KinematicState<T>,
    drivers: &Drivers<T>,
    background: &Background<T>,
    dt: T,
    form: RhsForm,
) -> Result<KinematicState<T>> {
    if !(dt.is_finite() && dt > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "time step must be positive and finite, got {}",
            dt.as_f64()
        )));
    }
    let half = dt * T::of(0.5);
    let k1 = rates(state, drivers, background, form)?;
    let mid1 = advanced(state, &k1, half)?;
    let k2 = rates(&mid1, drivers, background, form)?;
    let mid2 = advanced(state, &k2, half)?;
    let k3 = rates(&mid2, drivers, background, form)?;
    let end = advanced(state, &k3, dt)?;
    let k4 = rates(&end, drivers, background, form)?;

    let sixth = dt / T::of(6.0);
    let third = dt / T::of(3.0);
    let time = state.time + dt;

    let mut deformation = state.deformation.clone();
    deformation.add_scaled(&k1.deformation, sixth)?;
    deformation.add_scaled(&k2.deformation, third)?;
    deformation.add_scaled(&k3.deformation, third)?;
    deformation.add_scaled(&k4.deformation, sixth)?;
    resymmetrize(&mut deformation);
    deformation.ensure_finite(time)?;
    require_spd(&deformation, time)?;

    let mut density = state.density.clone();
    density.add_scaled(&k1.density, sixth)?;
    density.add_scaled(&k2.density, third)?;
    density.add_scaled(&k3.density, third)?;
    density.add_scaled(&k4.density, sixth)?;
    density.ensure_finite(time)?;

    let plastic = match &state.plastic {
        Some(p) => {
            let mut out = p.clone();
            out.add_scaled(k1.plastic.as_ref().expect("plastic rate present"), sixth)?;
            out.add_scaled(k2.plastic.as_ref().expect("plastic rate present"), third)?;
            out.add_scaled(k3.plastic.as_ref().expect("plastic rate present"), third)?;
            out.add_scaled(k4.plastic.as_ref().expect("plastic rate present"), sixth)?;
            out.ensure_finite(time)?;
            Some(out)
        }
        None => None,
    };

    Ok(KinematicState { deformation, density, plastic, time })
}

/// Evaluates every invariant monitor at the state's instant: curvature of
/// the material connection, the divergence-type conservation residual, the
/// metricity residual, and the gap between the two right-hand-side forms.
pub fn monitor<T: Real>(
    state: &KinematicState<T>,
    drivers: &Drivers<T>,
    background: &Background<T>,
) -> Result<Diagnostics<T>> {
    let stage = stage_geometry(state, background)?;
    let curvature_sup = curvature(&stage.material)?.sup_norm();
    let divergency_sup =
        divergency_residual(&state.density, &stage.z, &background.metric, &background.lc)?
            .sup_norm();
    let concordance_sup = covariant_derivative_with(
        &state.deformation,
        stage.deformation_partials(),
        &stage.material,
    )?
    .sup_norm();

    let s = sample_drivers(drivers, &background.grid, state.time)?;
    let hat_g = rhs_deformation_hatted(
        &state.deformation,
        &s.v,
        &s.dv,
        &s.flow,
        &stage.material,
    )?;
    let hat_r = rhs_density_hatted(
        &state.density,
        &s.v,
        &s.dv,
        &s.flow,
        &s.dflow,
        &stage.material,
        background,
    )?;
    let spin = theta(&s.flow, &stage.z, &s.v)?;
    let (ref_g, ref_r) =
        rhs_reference(state, &s.v, &s.dv, &s.flow, &s.dflow, &spin, &stage, background)?;
    let form_equiv_sup = hat_g.max_abs_diff(&ref_g)?.max(hat_r.max_abs_diff(&ref_r)?);

    Ok(Diagnostics {
        time: state.time,
        curvature_sup,
        divergency_sup,
        concordance_sup,
        form_equiv_sup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::partial_derivative;
    use crate::reconstruct::deformation_from_distortion;

    const TAU: f64 = core::f64::consts::TAU;

    fn cube(n: usize) -> Grid<f64> {
        Grid::new([n, n, n], [TAU, TAU, TAU]).unwrap()
    }

    /// Closed-form shear distortion `T = I + 0.1 sin(y3) E_12` with its
    /// analytic partials.
    fn sin_shear_provider() -> FieldProvider<f64> {
        FieldProvider::new(sig::distortion(), |y: [f64; 3], _, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = 1.0;
            out[4] = 1.0;
            out[8] = 1.0;
            out[1] = 0.1 * y[2].sin();
        })
        .with_gradient(|y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                out[1] = 0.1 * y[2].cos();
            }
        })
    }

    /// Deformation tensor of the shear: `[[1, s, 0], [s, 1 + s^2, 0], [0, 0, 1]]`
    /// with `s = 0.1 sin(y3)`.
    fn sin_shear_deformation_provider() -> FieldProvider<f64> {
        FieldProvider::new(sig::real_ll(), |y: [f64; 3], _, out: &mut [f64]| {
            let s = 0.1 * y[2].sin();
            out.copy_from_slice(&[1.0, s, 0.0, s, 1.0 + s * s, 0.0, 0.0, 0.0, 1.0]);
        })
        .with_gradient(|y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                let s = 0.1 * y[2].sin();
                let c = 0.1 * y[2].cos();
                out[1] = c;
                out[3] = c;
                out[4] = 2.0 * s * c;
            }
        })
    }

    /// Density of the shear: only `R^1_1 = -0.1 cos(y3)`.
    fn sin_shear_density_provider() -> FieldProvider<f64> {
        FieldProvider::new(sig::real_ul(), |y: [f64; 3], _, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = -0.1 * y[2].cos();
        })
        .with_gradient(|y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                out[0] = 0.1 * y[2].sin();
            }
        })
    }

    fn sin_shear_state(grid: Grid<f64>) -> KinematicState<f64> {
        let deformation = sin_shear_deformation_provider().sample(&grid, 0.0).unwrap();
        let density = sin_shear_density_provider().sample(&grid, 0.0).unwrap();
        KinematicState::new(deformation, density, 0.0).unwrap()
    }

    fn flat_state(grid: Grid<f64>) -> KinematicState<f64> {
        let deformation = TensorField::identity(grid, sig::real_ll()).unwrap();
        let density = TensorField::zeros(grid, sig::real_ul());
        KinematicState::new(deformation, density, 0.0).unwrap()
    }

    /// Smooth periodic velocity with analytic gradient.
    fn swirl_velocity(amplitude: f64) -> FieldProvider<f64> {
        FieldProvider::new(sig::real_u(), move |y: [f64; 3], _, out: &mut [f64]| {
            out[0] = amplitude * y[1].sin();
            out[1] = amplitude * y[2].cos();
            out[2] = amplitude * (y[0] + y[1]).sin();
        })
        .with_gradient(move |y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            match axis {
                0 => out[2] = amplitude * (y[0] + y[1]).cos(),
                1 => {
                    out[0] = amplitude * y[1].cos();
                    out[2] = amplitude * (y[0] + y[1]).cos();
                }
                _ => out[1] = -amplitude * y[2].sin(),
            }
        })
    }

    /// Smooth periodic flow driver with analytic gradient.
    fn wave_flow(amplitude: f64) -> FieldProvider<f64> {
        FieldProvider::new(sig::real_ul(), move |y: [f64; 3], _, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = amplitude * y[0].sin();
            out[1] = amplitude * y[2].cos();
            out[4] = amplitude * (y[1].sin() + 0.5);
            out[6] = amplitude * y[1].cos();
            out[8] = amplitude * y[0].cos();
        })
        .with_gradient(move |y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            match axis {
                0 => {
                    out[0] = amplitude * y[0].cos();
                    out[8] = -amplitude * y[0].sin();
                }
                1 => {
                    out[4] = amplitude * y[1].cos();
                    out[6] = -amplitude * y[1].sin();
                }
                _ => out[1] = -amplitude * y[2].sin(),
            }
        })
    }

    #[test]
    fn quiescent_drivers_leave_state_bitwise_unchanged() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let state = sin_shear_state(grid);
        let drivers = Drivers::quiescent();
        let next = step(&state, &drivers, &background, 0.1).unwrap();
        assert_eq!(next.deformation.max_abs_diff(&state.deformation).unwrap(), 0.0);
        assert_eq!(next.density.max_abs_diff(&state.density).unwrap(), 0.0);
        assert!((next.time - 0.1).abs() < 1e-15);
    }

    /// A rigid rotation of an undeformed, defect-free body: the symmetrized
    /// velocity-gradient terms cancel exactly, so the state is a fixed
    /// point of the discrete step as well.
    #[test]
    fn rigid_rotation_on_flat_state_is_stationary() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let omega = 0.7;
        let velocity = FieldProvider::new(sig::real_u(), move |y: [f64; 3], _, out: &mut [f64]| {
            out[0] = -omega * y[1];
            out[1] = omega * y[0];
            out[2] = 0.0;
        })
        .with_gradient(move |_, _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            match axis {
                0 => out[1] = omega,
                1 => out[0] = -omega,
                _ => {}
            }
        });
        let flow = FieldProvider::constant(sig::real_ul(), vec![0.0; 9]).unwrap();
        let drivers = Drivers::new(velocity, flow).unwrap();
        let mut state = flat_state(grid);
        for _ in 0..3 {
            state = step(&state, &drivers, &background, 0.05).unwrap();
        }
        let identity = TensorField::identity(grid, sig::real_ll()).unwrap();
        assert_eq!(state.deformation.max_abs_diff(&identity).unwrap(), 0.0);
        assert_eq!(state.density.sup_norm(), 0.0);
    }

    /// The plastic-spin field computed from real-space `(flow, z, v)` must
    /// agree with the lattice-level formula to roundoff when both derive
    /// from one distortion and one lattice flow.
    #[test]
    fn theta_dual_formulas_agree() {
        let grid = cube(12);
        let background = Background::flat(grid).unwrap();
        let dist_provider = sin_shear_provider();
        let components = dist_provider.sample(&grid, 0.0).unwrap();
        let partials = dist_provider.sample_gradient_stack(&grid, 0.0).unwrap();
        let distortion = Distortion::new(components).unwrap();

        let lattice_flow_provider =
            FieldProvider::new(sig::distortion(), |y: [f64; 3], _, out: &mut [f64]| {
                out.fill(0.0);
                out[0] = 0.2 * y[1].sin();
                out[4] = 0.1 * y[0].cos();
                out[5] = 0.3 * y[2].sin();
                out[7] = 0.2 * (y[0] + y[2]).cos();
            });
        let lattice_flow = lattice_flow_provider.sample(&grid, 0.0).unwrap();
        let velocity = swirl_velocity(0.4).sample(&grid, 0.0).unwrap();

        let z = crate::reconstruct::z_from_distortion_with(
            &distortion,
            &partials,
            &background.lc,
        )
        .unwrap();
        let flow = contract(&distortion.inverse, &lattice_flow, &[(1, 0)]).unwrap();

        let via_real = theta(&flow, &z, &velocity).unwrap();
        let via_lattice = theta_from_distortion(
            &distortion,
            &lattice_flow,
            &velocity,
            &partials,
            &background.lc,
        )
        .unwrap();
        let gap = via_real.max_abs_diff(&via_lattice).unwrap();
        assert!(gap < 1e-12, "plastic-spin formula gap {gap:e}");

        // With zero velocity the spin reduces to minus the flow.
        let zero_v = TensorField::zeros(grid, sig::real_u());
        let no_swirl = theta(&flow, &z, &zero_v).unwrap();
        let minus_flow = flow.scale(-1.0);
        assert!(no_swirl.max_abs_diff(&minus_flow).unwrap() < 1e-15);
    }

    /// The two right-hand-side forms are algebraically identical, so their
    /// numerical gap on a smooth driven state is roundoff, far below any
    /// discretization scale.
    #[test]
    fn hatted_and_reference_forms_agree_on_driven_state() {
        let grid = cube(16);
        let background = Background::flat(grid).unwrap();
        let state = sin_shear_state(grid);
        let drivers = Drivers::new(swirl_velocity(0.3), wave_flow(0.2)).unwrap();
        let diag = monitor(&state, &drivers, &background).unwrap();
        assert!(
            diag.form_equiv_sup < 1e-12,
            "hatted vs reference right-hand-side gap {:e}",
            diag.form_equiv_sup
        );
        assert!(diag.concordance_sup < 1e-13, "metricity {:e}", diag.concordance_sup);
        // Realizable state: curvature is pure truncation error.
        assert!(diag.curvature_sup < 2e-3, "curvature {:e}", diag.curvature_sup);
        assert!(diag.divergency_sup < 2e-3, "divergency {:e}", diag.divergency_sup);
    }

    /// Full trajectories under the two forms stay together (the gap per
    /// step is roundoff, and 40 steps cannot amplify it measurably).
    #[test]
    fn reference_trajectory_matches_hatted_trajectory() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let drivers = Drivers::new(swirl_velocity(0.2), wave_flow(0.15)).unwrap();
        let mut hatted = sin_shear_state(grid);
        let mut reference = sin_shear_state(grid);
        for _ in 0..40 {
            hatted = step_with(&hatted, &drivers, &background, 0.02, RhsForm::Hatted).unwrap();
            reference =
                step_with(&reference, &drivers, &background, 0.02, RhsForm::Reference).unwrap();
        }
        let gap_g = hatted.deformation.max_abs_diff(&reference.deformation).unwrap();
        let gap_r = hatted.density.max_abs_diff(&reference.density).unwrap();
        assert!(gap_g < 1e-10, "deformation trajectory gap {gap_g:e}");
        assert!(gap_r < 1e-10, "density trajectory gap {gap_r:e}");
    }

    /// Spatially homogeneous flow `J(t) = sin(t) M` with diagonal `M` on an
    /// undeformed body: the deformation stays diagonal with
    /// `G_ii(t) = exp(-2 m_i (1 - cos t))`, an exact yardstick for the
    /// integrator. Halving the step must shrink the error 16x (order 4).
    #[test]
    fn rk4_reproduces_closed_form_and_converges_at_order_4() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let m = [0.3, -0.2, 0.1];
        let flow = FieldProvider::new(sig::real_ul(), move |_, t: f64, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = t.sin() * m[0];
            out[4] = t.sin() * m[1];
            out[8] = t.sin() * m[2];
        })
        .with_gradient(|_, _, _, out: &mut [f64]| out.fill(0.0));
        let velocity = FieldProvider::constant(sig::real_u(), vec![0.0; 3]).unwrap();
        let drivers = Drivers::new(velocity, flow).unwrap();

        let horizon = 1.5f64;
        let mut errors = Vec::new();
        for steps in [15usize, 30, 60] {
            let dt = horizon / steps as f64;
            let mut state = flat_state(grid);
            for _ in 0..steps {
                state = step(&state, &drivers, &background, dt).unwrap();
            }
            let f = 1.0 - horizon.cos();
            let mut worst = 0.0f64;
            for (i, &mi) in m.iter().enumerate() {
                let exact = (-2.0 * mi * f).exp();
                let got = state.deformation.value(&[i, i], [0, 0, 0]);
                worst = worst.max((got - exact).abs());
            }
            errors.push(worst);
        }
        assert!(errors[0] < 1e-6, "coarse error {:e}", errors[0]);
        let order1 = (errors[0] / errors[1]).log2();
        let order2 = (errors[1] / errors[2]).log2();
        assert!(
            order1 > 3.7 && order1 < 4.3 && order2 > 3.7 && order2 < 4.3,
            "temporal orders {order1:.2}, {order2:.2}"
        );
    }

    /// Driving a realizable state with smooth drivers keeps the flatness
    /// residual at its initial truncation level.
    #[test]
    fn driven_evolution_preserves_flatness_scale() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let drivers = Drivers::new(swirl_velocity(0.1), wave_flow(0.1)).unwrap();
        let mut state = sin_shear_state(grid);
        let initial = monitor(&state, &drivers, &background).unwrap().curvature_sup;
        for _ in 0..25 {
            state = step(&state, &drivers, &background, 0.02).unwrap();
        }
        let finale = monitor(&state, &drivers, &background).unwrap().curvature_sup;
        assert!(
            finale <= 10.0 * initial + 1e-12,
            "curvature grew from {initial:e} to {finale:e}"
        );
    }

    /// An aggressive contraction with an oversized step drives the
    /// deformation out of the positive cone mid-step; the error must carry
    /// node and time rather than surfacing as NaN later.
    #[test]
    fn losing_positivity_is_reported_with_node_and_time() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let mut entries = vec![0.0; 9];
        entries[0] = 8.0;
        entries[4] = 8.0;
        entries[8] = 8.0;
        let flow = FieldProvider::constant(sig::real_ul(), entries).unwrap();
        let velocity = FieldProvider::constant(sig::real_u(), vec![0.0; 3]).unwrap();
        let drivers = Drivers::new(velocity, flow).unwrap();
        let state = flat_state(grid);
        match step(&state, &drivers, &background, 1.0) {
            Err(Error::LostPositivity { time, .. }) => {
                assert!(time >= 0.0 && time <= 1.0);
            }
            other => panic!("expected loss of positivity, got {other:?}"),
        }
    }

    /// Exponential growth must end in a non-finite-state report, never a
    /// silent NaN in the output.
    #[test]
    fn unbounded_growth_is_reported_as_non_finite() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let mut entries = vec![0.0; 9];
        entries[0] = -6.0;
        entries[4] = -6.0;
        entries[8] = -6.0;
        let flow = FieldProvider::constant(sig::real_ul(), entries).unwrap();
        let velocity = FieldProvider::constant(sig::real_u(), vec![0.0; 3]).unwrap();
        let drivers = Drivers::new(velocity, flow).unwrap();
        let mut state = flat_state(grid);
        let outcome = (0..200).try_fold(state.clone(), |s, _| {
            state = s;
            step(&state, &drivers, &background, 1.0)
        });
        match outcome {
            Err(Error::NonFiniteState { time, .. }) => assert!(time > 0.0),
            other => panic!("expected non-finite state, got {:?}", other.map(|s| s.time)),
        }
    }

    /// Direct-summation oracle for the plastic rate on a Cartesian
    /// background, where the covariant derivative is the plain stencil
    /// derivative.
    #[test]
    fn plastic_rate_matches_direct_summation() {
        let grid = cube(12);
        let background = Background::flat(grid).unwrap();
        let plastic_provider =
            FieldProvider::new(sig::real_ul(), |y: [f64; 3], _, out: &mut [f64]| {
                out.fill(0.0);
                out[0] = 1.0 + 0.2 * y[2].sin();
                out[1] = 0.1 * y[0].cos();
                out[4] = 1.0;
                out[5] = 0.15 * y[1].sin();
                out[8] = 1.0 - 0.1 * y[0].sin();
            });
        let plastic = plastic_provider.sample(&grid, 0.0).unwrap();
        let vel_provider = swirl_velocity(0.3);
        let velocity = vel_provider.sample(&grid, 0.0).unwrap();
        let velocity_partials = vel_provider.sample_gradient_stack(&grid, 0.0).unwrap();
        let spin_provider =
            FieldProvider::new(sig::real_ul(), |y: [f64; 3], _, out: &mut [f64]| {
                out.fill(0.0);
                out[1] = 0.2 * y[2].cos();
                out[3] = -0.2 * y[2].cos();
                out[8] = 0.1 * y[1].sin();
            });
        let spin = spin_provider.sample(&grid, 0.0).unwrap();

        let got =
            rhs_plastic(&plastic, &velocity, &velocity_partials, &spin, &background.lc).unwrap();

        let dp = [
            partial_derivative(&plastic, 0).unwrap(),
            partial_derivative(&plastic, 1).unwrap(),
            partial_derivative(&plastic, 2).unwrap(),
        ];
        let node = [3, 7, 5];
        for k in 0..3 {
            for i in 0..3 {
                let mut want = 0.0;
                for r in 0..3 {
                    want -= velocity.value(&[r], node) * dp[r].value(&[k, i], node);
                    want += plastic.value(&[r, i], node) * velocity_partials.value(&[r, k], node);
                    want -= velocity_partials.value(&[i, r], node) * plastic.value(&[k, r], node);
                    want -= spin.value(&[k, r], node) * plastic.value(&[r, i], node);
                }
                let have = got.value(&[k, i], node);
                assert!(
                    (have - want).abs() < 1e-13,
                    "plastic rate [{k}][{i}]: {have} vs {want}"
                );
            }
        }

        // Trivial case: no velocity, no spin, constant plastic field.
        let zero_spin = TensorField::zeros(grid, sig::real_ul());
        let zero_v = TensorField::zeros(grid, sig::real_u());
        let zero_dv = TensorField::zeros(
            grid,
            sig::real_u().prepend(crate::tensor::IndexKind::RealLower).unwrap(),
        );
        let constant = TensorField::identity(grid, sig::real_ul()).unwrap();
        let rate =
            rhs_plastic(&constant, &zero_v, &zero_dv, &zero_spin, &background.lc).unwrap();
        assert_eq!(rate.sup_norm(), 0.0);
    }

    /// The deformation tensor built from the shear distortion matches the
    /// provider used to seed evolution states.
    #[test]
    fn seeded_state_is_consistent_with_distortion() {
        let grid = cube(12);
        let provider = sin_shear_provider();
        let components = provider.sample(&grid, 0.0).unwrap();
        let distortion = Distortion::new(components).unwrap();
        let deformation = deformation_from_distortion(&distortion, None).unwrap();
        let state = sin_shear_state(grid);
        let gap = deformation.max_abs_diff(&state.deformation).unwrap();
        assert!(gap < 1e-15, "deformation mismatch {gap:e}");
    }

    #[test]
    fn monitor_of_flat_state_is_exactly_quiet() {
        let grid = cube(8);
        let background = Background::flat(grid).unwrap();
        let state = flat_state(grid);
        let drivers = Drivers::quiescent();
        let diag = monitor(&state, &drivers, &background).unwrap();
        assert!(diag.curvature_sup <= 1e-12);
        assert!(diag.divergency_sup <= 1e-12);
        assert!(diag.concordance_sup <= 1e-12);
        assert!(diag.form_equiv_sup <= 1e-12);
    }

    #[test]
    fn state_validation_rejects_malformed_input() {
        let grid = cube(8);
        let mut asym = TensorField::identity(grid, sig::real_ll()).unwrap();
        asym.set_value(&[0, 1], [2, 2, 2], 0.5);
        let density = TensorField::zeros(grid, sig::real_ul());
        assert!(matches!(
            KinematicState::new(asym, density.clone(), 0.0),
            Err(Error::InvalidArgument(_))
        ));

        let mut indefinite = TensorField::identity(grid, sig::real_ll()).unwrap();
        indefinite.set_value(&[0, 0], [1, 1, 1], -1.0);
        assert!(matches!(
            KinematicState::new(indefinite, density.clone(), 0.0),
            Err(Error::IndefiniteMetric { .. })
        ));

        let no_gradient = FieldProvider::new(sig::real_u(), |_, _, out: &mut [f64]| {
            out.fill(0.0);
        });
        let flow = FieldProvider::constant(sig::real_ul(), vec![0.0; 9]).unwrap();
        assert!(matches!(
            Drivers::new(no_gradient, flow),
            Err(Error::InvalidArgument(_))
        ));

        let state = flat_state(grid);
        let background = Background::flat(grid).unwrap();
        assert!(matches!(
            step(&state, &Drivers::quiescent(), &background, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }
}
