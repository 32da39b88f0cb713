//! Distortion-level algebra and reconstruction of the distortion field
//! from a flat material connection.
//!
//! The incompatible lattice distortion maps Burgers (crystal) vectors to
//! real-space covectors; it is stored with signature `(burgers upper,
//! real lower)`. Its pointwise inverse has signature `(real upper,
//! burgers lower)`. Neither is a gradient of any map when dislocations are
//! present -- that failure is exactly what the defect tensor and the
//! dislocation density measure.
//!
//! Reconstruction solves the total differential system
//!
//! ```text
//! d_p M[i][q] = sum_r C[r][p][q] M[i][r]
//! ```
//!
//! node to node along lattice lines with a fourth-order one-step method.
//! The system is solvable exactly when the connection is flat; the solver
//! therefore gates on the measured curvature and reports the residual when
//! it refuses.

use crate::error::{Error, Result};
use crate::geometry::{covariant_derivative, covariant_derivative_with, curvature, Connection};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tensor::{
    contract, invert3, invert3x3, matrix_at, set_matrix_at, sig, IndexKind, Metric, Signature,
    TensorField, VolumeTensor, SINGULARITY_REL_TOL,
};

/// Default ceiling on the measured curvature sup-norm above which
/// reconstruction refuses to run.
///
/// Flat connections on the grids this library targets (16 nodes per axis
/// and up, smooth fields) measure below `1e-4`; genuinely curved ones
/// measure orders of magnitude above. The gate is configurable through
/// [`PfaffOptions`] for unusually coarse or unusually stiff setups.
pub const DEFAULT_COMPATIBILITY_THRESHOLD: f64 = 1e-3;

/// Lattice distortion together with its pointwise inverse.
#[derive(Clone, Debug)]
pub struct Distortion<T> {
    /// `M[i][q]`: Burgers-upper, real-lower.
    pub components: TensorField<T>,
    /// `M^-1[q][i]`: real-upper, burgers-lower.
    pub inverse: TensorField<T>,
}

impl<T: Real> Distortion<T> {
    /// Wraps a sampled distortion field, inverting it node by node.
    pub fn new(components: TensorField<T>) -> Result<Self> {
        if components.signature() != sig::distortion() {
            return Err(Error::Signature(
                "distortion needs signature (burgers upper, real lower)".into(),
            ));
        }
        let inverse = invert3(&components)?;
        Ok(Self { components, inverse })
    }

    pub fn grid(&self) -> &Grid<T> {
        self.components.grid()
    }
}

/// Elastic deformation tensor induced by the distortion:
/// `G[p][q] = sum_{i,j} bm[i][j] M[i][p] M[j][q]`, with `bm` the Burgers
/// metric (identity when `None`: orthonormal crystal axes).
pub fn deformation_from_distortion<T: Real>(
    distortion: &Distortion<T>,
    burgers_metric: Option<&TensorField<T>>,
) -> Result<TensorField<T>> {
    let bsig = Signature::new(&[IndexKind::BurgersLower, IndexKind::BurgersLower])?;
    let bm = match burgers_metric {
        Some(m) => {
            if m.signature() != bsig {
                return Err(Error::Signature(
                    "burgers metric needs signature (burgers lower, burgers lower)".into(),
                ));
            }
            m.clone()
        }
        None => TensorField::identity(*distortion.grid(), bsig)?,
    };
    // bm[i][j] M[i][p] -> X[j][p]; X[j][p] M[j][q] -> G[p][q].
    let x = contract(&bm, &distortion.components, &[(0, 0)])?;
    contract(&x, &distortion.components, &[(0, 0)])
}

/// Which space a converted index should land in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetIndex {
    Real,
    Burgers,
}

/// Converts one index slot of a field between real and Burgers space,
/// preserving its variance, by contracting with the distortion or its
/// inverse:
///
/// - burgers-upper to real: inverse distortion (`X^r = Minv[r][i] X^i`);
/// - burgers-lower to real: distortion (`X_q = M[i][q] X_i`);
/// - real-upper to burgers: distortion (`X^i = M[i][q] X^q`);
/// - real-lower to burgers: inverse distortion (`X_i = Minv[q][i] X_q`).
///
/// Converting a slot that is already in the target space is an error, not a
/// no-op: it almost always indicates a bookkeeping bug in the caller.
pub fn convert_index<T: Real>(
    field: &TensorField<T>,
    slot: usize,
    target: TargetIndex,
    distortion: &Distortion<T>,
) -> Result<TensorField<T>> {
    let rank = field.signature().rank();
    if slot >= rank {
        return Err(Error::InvalidArgument(format!(
            "slot {slot} out of range for rank {rank}"
        )));
    }
    let kind = field.signature().kind(slot);
    let (matrix, mslot) = match (kind, target) {
        (IndexKind::BurgersUpper, TargetIndex::Real) => (&distortion.inverse, 1),
        (IndexKind::BurgersLower, TargetIndex::Real) => (&distortion.components, 0),
        (IndexKind::RealUpper, TargetIndex::Burgers) => (&distortion.components, 1),
        (IndexKind::RealLower, TargetIndex::Burgers) => (&distortion.inverse, 0),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "slot {slot} has kind {kind:?}, already in the target space"
            )));
        }
    };
    let contracted = contract(matrix, field, &[(mslot, slot)])?;
    // The new index is the leading slot of the result; move it back into
    // position `slot`, keeping the other slots in their original order.
    let mut perm = Vec::with_capacity(rank);
    for i in 0..rank {
        if i == slot {
            perm.push(0);
        } else if i > slot {
            perm.push(i); // one field slot dropped before it, one matrix slot added
        } else {
            perm.push(i + 1);
        }
    }
    contracted.permute(&perm)
}

/// Defect tensor of a distortion with caller-supplied partial derivatives
/// of the distortion: `z[r][p][q] = Minv[r][i] (D_p M)[i][q]`, with `D` the
/// background covariant derivative.
pub fn z_from_distortion_with<T: Real>(
    distortion: &Distortion<T>,
    partials: &TensorField<T>,
    background: &Connection<T>,
) -> Result<TensorField<T>> {
    let dm = covariant_derivative_with(&distortion.components, partials, background)?;
    // Minv[r][i] dm[p][i][q] -> (r, p, q).
    contract(&distortion.inverse, &dm, &[(1, 1)])
}

/// Defect tensor of a distortion, finite-difference route.
pub fn z_from_distortion<T: Real>(
    distortion: &Distortion<T>,
    background: &Connection<T>,
) -> Result<TensorField<T>> {
    let dm = covariant_derivative(&distortion.components, background)?;
    contract(&distortion.inverse, &dm, &[(1, 1)])
}

/// Material connection assembled directly from a distortion:
/// background coefficients plus the defect tensor, with the torsion read
/// off as the antisymmetric part. The independent route against
/// [`crate::geometry::concordant_connection`].
pub fn connection_from_distortion_with<T: Real>(
    distortion: &Distortion<T>,
    partials: &TensorField<T>,
    background: &Connection<T>,
) -> Result<Connection<T>> {
    let z = z_from_distortion_with(distortion, partials, background)?;
    let coeffs = background.coeffs.add(&z)?;
    let torsion = z.sub(&z.permute(&[0, 2, 1])?)?;
    Connection::new(coeffs, torsion)
}

/// Finite-difference variant of [`connection_from_distortion_with`].
pub fn connection_from_distortion<T: Real>(
    distortion: &Distortion<T>,
    background: &Connection<T>,
) -> Result<Connection<T>> {
    let partials = crate::grid::gradient_stack(&distortion.components)?;
    connection_from_distortion_with(distortion, &partials, background)
}

/// Dislocation density straight from the distortion:
/// `density[r][k] = sum g[k][m] w[m][p][q] Minv[r][i] (D_p M)[i][q]`.
/// The curl-like composition of the defect-tensor route; exposed because it
/// is the natural measurement on distortion data.
pub fn burgers_from_distortion<T: Real>(
    distortion: &Distortion<T>,
    background: &Metric<T>,
    volume: &VolumeTensor<T>,
    lc: &Connection<T>,
) -> Result<TensorField<T>> {
    let z = z_from_distortion(distortion, lc)?;
    crate::geometry::burgers_density_from_z(&z, background, volume)
}

/// Options for the lattice path integration.
#[derive(Clone, Copy, Debug)]
pub struct PfaffOptions<T> {
    /// Order in which the three lattice directions are swept. The result is
    /// path independent up to discretization error exactly when the
    /// connection is flat.
    pub axis_order: [usize; 3],
    /// Node where the initial value is planted.
    pub base: [usize; 3],
    /// Refusal threshold on the measured curvature sup-norm.
    pub compatibility_threshold: T,
}

impl<T: Real> Default for PfaffOptions<T> {
    fn default() -> Self {
        Self {
            axis_order: [0, 1, 2],
            base: [0, 0, 0],
            compatibility_threshold: T::of(DEFAULT_COMPATIBILITY_THRESHOLD),
        }
    }
}

impl<T: Real> PfaffOptions<T> {
    fn validate(&self, grid: &Grid<T>) -> Result<()> {
        let mut seen = [false; 3];
        for &a in &self.axis_order {
            if a >= 3 || seen[a] {
                return Err(Error::InvalidArgument(format!(
                    "axis order {:?} is not a permutation of 0..3",
                    self.axis_order
                )));
            }
            seen[a] = true;
        }
        let dims = grid.dims();
        for (axis, (&b, &n)) in self.base.iter().zip(&dims).enumerate() {
            if b >= n {
                return Err(Error::InvalidArgument(format!(
                    "base index {b} out of range on axis {axis} ({n} nodes)"
                )));
            }
        }
        if !(self.compatibility_threshold > T::zero()) {
            return Err(Error::InvalidArgument(
                "compatibility threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn mat_mul<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for q in 0..3 {
            let mut acc = T::zero();
            for r in 0..3 {
                acc = acc + a[i][r] * b[r][q];
            }
            out[i][q] = acc;
        }
    }
    out
}

#[inline]
fn mat_axpy<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3], s: T) -> [[T; 3]; 3] {
    let mut out = *a;
    for i in 0..3 {
        for q in 0..3 {
            out[i][q] = out[i][q] + s * b[i][q];
        }
    }
    out
}

/// Coefficient matrix of the line system along `axis` at one node:
/// `A[r][q] = C[r][axis][q]`.
#[inline]
fn line_matrix<T: Real>(conn: &Connection<T>, axis: usize, lin: usize) -> [[T; 3]; 3] {
    let nn = conn.grid().node_count();
    let d = conn.coeffs.data();
    let mut a = [[T::zero(); 3]; 3];
    for (r, row) in a.iter_mut().enumerate() {
        for (q, v) in row.iter_mut().enumerate() {
            *v = d[((r * 3 + axis) * 3 + q) * nn + lin];
        }
    }
    a
}

/// One fourth-order step of `dM/ds = M A(s)` from `s` to `s + h`, with the
/// midpoint coefficient supplied by cubic interpolation.
#[inline]
fn rk4_step<T: Real>(
    m: &[[T; 3]; 3],
    a0: &[[T; 3]; 3],
    amid: &[[T; 3]; 3],
    a1: &[[T; 3]; 3],
    h: T,
) -> [[T; 3]; 3] {
    let half = T::of(0.5);
    let k1 = mat_mul(m, a0);
    let k2 = mat_mul(&mat_axpy(m, &k1, half * h), amid);
    let k3 = mat_mul(&mat_axpy(m, &k2, half * h), amid);
    let k4 = mat_mul(&mat_axpy(m, &k3, h), a1);
    let mut out = *m;
    let w = h / T::of(6.0);
    let two = T::of(2.0);
    for i in 0..3 {
        for q in 0..3 {
            out[i][q] =
                out[i][q] + w * (k1[i][q] + two * (k2[i][q] + k3[i][q]) + k4[i][q]);
        }
    }
    out
}

/// Midpoint value by 4-point cubic interpolation:
/// `(-f[-1] + 9 f[0] + 9 f[+1] - f[+2]) / 16`.
#[inline]
fn interp_mid<T: Real>(
    fm1: &[[T; 3]; 3],
    f0: &[[T; 3]; 3],
    f1: &[[T; 3]; 3],
    f2: &[[T; 3]; 3],
) -> [[T; 3]; 3] {
    let nine = T::of(9.0);
    let sixteenth = T::of(1.0 / 16.0);
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for q in 0..3 {
            out[i][q] =
                (nine * (f0[i][q] + f1[i][q]) - fm1[i][q] - f2[i][q]) * sixteenth;
        }
    }
    out
}

/// Integrates one lattice line along `axis` starting from the value already
/// stored at `start`, writing the remaining `n - 1` nodes of the line.
fn integrate_line<T: Real>(
    field: &mut TensorField<T>,
    conn: &Connection<T>,
    axis: usize,
    start: [usize; 3],
) {
    let grid = *field.grid();
    let n = grid.dims()[axis];
    let h = grid.spacing()[axis];
    let mut idx = start;
    let mut m = matrix_at(field, grid.linear(idx));
    for _ in 0..n - 1 {
        let here = idx[axis] as isize;
        let at = |off: isize| -> [[T; 3]; 3] {
            let mut nb = idx;
            nb[axis] = grid.wrap(here + off, axis);
            line_matrix(conn, axis, grid.linear(nb))
        };
        let am1 = at(-1);
        let a0 = at(0);
        let a1 = at(1);
        let a2 = at(2);
        let amid = interp_mid(&am1, &a0, &a1, &a2);
        m = rk4_step(&m, &a0, &amid, &a1, h);
        idx[axis] = grid.wrap(here + 1, axis);
        set_matrix_at(field, grid.linear(idx), &m);
    }
}

/// Sweeps the full lattice from the base node in the configured axis order,
/// no compatibility gate. Shared by the public solver and the residual
/// probes.
fn integrate_unchecked<T: Real>(
    conn: &Connection<T>,
    initial: &[[T; 3]; 3],
    options: &PfaffOptions<T>,
) -> Result<TensorField<T>> {
    let grid = *conn.grid();
    options.validate(&grid)?;
    let dims = grid.dims();
    let mut field = TensorField::zeros(grid, sig::distortion());
    set_matrix_at(&mut field, grid.linear(options.base), initial);
    let [a, b, c] = options.axis_order;
    integrate_line(&mut field, conn, a, options.base);
    for ia in 0..dims[a] {
        let mut start = options.base;
        start[a] = (options.base[a] + ia) % dims[a];
        integrate_line(&mut field, conn, b, start);
    }
    for ia in 0..dims[a] {
        for ib in 0..dims[b] {
            let mut start = options.base;
            start[a] = (options.base[a] + ia) % dims[a];
            start[b] = (options.base[b] + ib) % dims[b];
            integrate_line(&mut field, conn, c, start);
        }
    }
    Ok(field)
}

/// Reconstructs the distortion generating a flat material connection.
///
/// Plants `initial` at the base node and integrates the total differential
/// system along lattice lines in the configured axis order. Refuses with
/// [`Error::IncompatibleConnection`] when the measured curvature sup-norm
/// exceeds the compatibility threshold, and with
/// [`Error::DegenerateInitialValue`] when the initial matrix is singular.
pub fn integrate_pfaff<T: Real>(
    conn: &Connection<T>,
    initial: &[[T; 3]; 3],
    options: &PfaffOptions<T>,
) -> Result<Distortion<T>> {
    options.validate(conn.grid())?;
    let mut scale = T::zero();
    for row in initial {
        for &v in row {
            scale = scale.max(v.abs());
        }
    }
    let (det, _) = invert3x3(initial);
    if scale == T::zero() || det.abs() < T::of(SINGULARITY_REL_TOL) * scale * scale * scale {
        return Err(Error::DegenerateInitialValue { det: det.as_f64() });
    }
    let residual = curvature(conn)?.sup_norm();
    if residual > options.compatibility_threshold {
        return Err(Error::IncompatibleConnection {
            residual: residual.as_f64(),
            threshold: options.compatibility_threshold.as_f64(),
        });
    }
    let field = integrate_unchecked(conn, initial, options)?;
    Distortion::new(field)
}

/// Transport defect around the three principal loops of the torus: the
/// sup-norm gap between the initial matrix and its value after one full
/// cycle along each axis through the base node. A direct integrability
/// probe, independent of the curvature measurement.
pub fn monodromy_defect<T: Real>(
    conn: &Connection<T>,
    initial: &[[T; 3]; 3],
    options: &PfaffOptions<T>,
) -> Result<T> {
    let grid = *conn.grid();
    options.validate(&grid)?;
    let mut worst = T::zero();
    for axis in 0..3 {
        let n = grid.dims()[axis];
        let h = grid.spacing()[axis];
        let mut idx = options.base;
        let mut m = *initial;
        for _ in 0..n {
            let here = idx[axis] as isize;
            let at = |off: isize| -> [[T; 3]; 3] {
                let mut nb = idx;
                nb[axis] = grid.wrap(here + off, axis);
                line_matrix(conn, axis, grid.linear(nb))
            };
            let amid = interp_mid(&at(-1), &at(0), &at(1), &at(2));
            m = rk4_step(&m, &at(0), &amid, &at(1), h);
            idx[axis] = grid.wrap(here + 1, axis);
        }
        for i in 0..3 {
            for q in 0..3 {
                worst = worst.max((m[i][q] - initial[i][q]).abs());
            }
        }
    }
    Ok(worst)
}

/// Integrability diagnostics for a connection, gathered without gating.
#[derive(Clone, Copy, Debug)]
pub struct CompatibilityReport<T> {
    /// Sup-norm of the measured curvature.
    pub curvature_sup: T,
    /// Sup-norm difference between full reconstructions swept in axis order
    /// `[0, 1, 2]` versus `[2, 1, 0]` from the same initial value.
    pub path_gap: T,
    /// Worst principal-loop transport defect.
    pub monodromy: T,
}

/// Measures how close a connection is to being integrable: curvature,
/// path dependence of the reconstruction, and loop monodromy.
pub fn compatibility_residual<T: Real>(
    conn: &Connection<T>,
    initial: &[[T; 3]; 3],
    options: &PfaffOptions<T>,
) -> Result<CompatibilityReport<T>> {
    let curvature_sup = curvature(conn)?.sup_norm();
    let forward = integrate_unchecked(conn, initial, options)?;
    let mut reversed_options = *options;
    reversed_options.axis_order = [options.axis_order[2], options.axis_order[1], options.axis_order[0]];
    let backward = integrate_unchecked(conn, initial, &reversed_options)?;
    let path_gap = forward.max_abs_diff(&backward)?;
    let monodromy = monodromy_defect(conn, initial, options)?;
    Ok(CompatibilityReport { curvature_sup, path_gap, monodromy })
}

/// Constant change of crystal frame relating two reconstructions of the
/// same connection.
#[derive(Clone, Copy, Debug)]
pub struct GaugeMatrix<T> {
    /// `O[j][i]`: second distortion = first contracted with `O` on the
    /// Burgers slot.
    pub o: [[T; 3]; 3],
}

impl<T: Real> GaugeMatrix<T> {
    /// Deviation of `O` from orthogonality (identity Burgers metric):
    /// sup-norm of `O^T O - I`.
    pub fn orthogonality_residual(&self) -> T {
        let mut worst = T::zero();
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = T::zero();
                for j in 0..3 {
                    acc = acc + self.o[j][a] * self.o[j][b];
                }
                let target = if a == b { T::one() } else { T::zero() };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }
}

/// Frame changes whose product with their transpose strays further than
/// this from the identity are rejected: the two fields then disagree on the
/// deformation tensor, not merely on the crystal frame.
pub const GAUGE_ORTHOGONALITY_TOLERANCE: f64 = 1e-8;

/// Solves for the constant frame change taking `first` to `second` at one
/// node: `second[i][q] = sum_j first[j][q] O[j][i]`.
///
/// Two reconstructions of the same flat connection differ by exactly such a
/// constant matrix, and it is orthogonal exactly when both distortions
/// induce the same deformation tensor; sampling one node determines it. A
/// solution that is not orthogonal within [`GAUGE_ORTHOGONALITY_TOLERANCE`]
/// is reported as a mismatch rather than returned.
pub fn gauge_align<T: Real>(
    first: &TensorField<T>,
    second: &TensorField<T>,
    node: [usize; 3],
) -> Result<GaugeMatrix<T>> {
    if first.signature() != sig::distortion() || second.signature() != sig::distortion() {
        return Err(Error::Signature(
            "gauge alignment needs two (burgers upper, real lower) fields".into(),
        ));
    }
    if first.grid() != second.grid() {
        return Err(Error::InvalidArgument("fields live on different grids".into()));
    }
    let grid = *first.grid();
    let lin = grid.linear(node);
    let m1 = matrix_at(first, lin);
    let m2 = matrix_at(second, lin);
    // Rows indexed by the real slot: A[q][j] = m1[j][q], B[q][i] = m2[i][q];
    // then B = A O.
    let mut a = [[T::zero(); 3]; 3];
    let mut b = [[T::zero(); 3]; 3];
    for q in 0..3 {
        for j in 0..3 {
            a[q][j] = m1[j][q];
            b[q][j] = m2[j][q];
        }
    }
    let mut scale = T::zero();
    for row in &a {
        for &v in row {
            scale = scale.max(v.abs());
        }
    }
    let (det, ainv) = invert3x3(&a);
    if scale == T::zero() || det.abs() < T::of(SINGULARITY_REL_TOL) * scale * scale * scale {
        return Err(Error::SingularMatrix { node, det: det.as_f64(), scale: scale.as_f64() });
    }
    let gauge = GaugeMatrix { o: mat_mul(&ainv, &b) };
    let residual = gauge.orthogonality_residual().as_f64();
    if residual > GAUGE_ORTHOGONALITY_TOLERANCE {
        return Err(Error::GaugeMismatch { residual, tolerance: GAUGE_ORTHOGONALITY_TOLERANCE });
    }
    Ok(gauge)
}

/// Sup-norm over all nodes of `second - first . O`: how far the one-node
/// frame change is from relating the two fields everywhere. For two
/// reconstructions of one flat connection this is bounded by the
/// integration error.
pub fn alignment_defect<T: Real>(
    first: &TensorField<T>,
    second: &TensorField<T>,
    gauge: &GaugeMatrix<T>,
) -> Result<T> {
    let aligned = apply_gauge(first, gauge)?;
    second.max_abs_diff(&aligned)
}

/// Applies a constant frame change to the Burgers slot of a distortion
/// field: `out[i][q] = sum_j field[j][q] o[j][i]`.
pub fn apply_gauge<T: Real>(field: &TensorField<T>, gauge: &GaugeMatrix<T>) -> Result<TensorField<T>> {
    if field.signature() != sig::distortion() {
        return Err(Error::Signature(
            "gauge application needs a (burgers upper, real lower) field".into(),
        ));
    }
    let grid = *field.grid();
    let nn = grid.node_count();
    let mut out = TensorField::zeros(grid, sig::distortion());
    for lin in 0..nn {
        let m = matrix_at(field, lin);
        let mut res = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for q in 0..3 {
                let mut acc = T::zero();
                for j in 0..3 {
                    acc = acc + m[j][q] * gauge.o[j][i];
                }
                res[i][q] = acc;
            }
        }
        set_matrix_at(&mut out, lin, &res);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{concordant_connection, levi_civita_connection};
    use crate::grid::FieldProvider;
    use crate::tensor::volume_tensor;

    const TAU: f64 = core::f64::consts::TAU;

    fn delta_metric(grid: Grid<f64>) -> Metric<f64> {
        let g = TensorField::identity(grid, sig::real_ll()).unwrap();
        let zero_grad = TensorField::zeros(grid, sig::real_lll());
        Metric::from_field(g, Some(zero_grad)).unwrap()
    }

    /// Smooth periodic shear: `M = I + 0.1 sin(y3) E12`, with closed-form
    /// gradient.
    fn sin_shear_provider() -> FieldProvider<f64> {
        FieldProvider::new(sig::distortion(), |y: [f64; 3], _, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = 1.0;
            out[4] = 1.0;
            out[8] = 1.0;
            out[1] = 0.1 * y[2].sin();
        })
        .with_gradient(|y: [f64; 3], _, axis, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                out[1] = 0.1 * y[2].cos();
            }
        })
    }

    fn sin_shear(grid: Grid<f64>) -> Distortion<f64> {
        Distortion::new(sin_shear_provider().sample(&grid, 0.0).unwrap()).unwrap()
    }

    /// Frozen example: constant shear 0.3 gives the deformation tensor
    /// [[1, 0.3, 0], [0.3, 1.09, 0], [0, 0, 1]].
    #[test]
    fn deformation_of_constant_shear_matches_closed_form() {
        let grid = Grid::new([8, 8, 8], [1.0f64, 1.0, 1.0]).unwrap();
        let mut m = TensorField::identity(grid, sig::distortion()).unwrap();
        for lin in 0..grid.node_count() {
            m.component_mut(1)[lin] = 0.3;
        }
        let d = Distortion::new(m).unwrap();
        let g = deformation_from_distortion(&d, None).unwrap();
        let expected = [[1.0, 0.3, 0.0], [0.3, 1.09, 0.0], [0.0, 0.0, 1.0]];
        let got = matrix_at(&g, 5);
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (got[r][c] - expected[r][c]).abs() < 1e-14,
                    "deformation [{r}][{c}] = {}",
                    got[r][c]
                );
            }
        }
        // And it must be an admissible metric.
        Metric::from_field(g, None).unwrap();
    }

    #[test]
    fn convert_index_moves_between_spaces_and_round_trips() {
        let grid = Grid::new([8, 8, 8], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let v_sig = Signature::new(&[IndexKind::RealUpper]).unwrap();
        let v = FieldProvider::new(v_sig, |y: [f64; 3], _, out: &mut [f64]| {
            out[0] = 1.0 + y[0].sin();
            out[1] = 2.0;
            out[2] = y[2].cos();
        })
        .sample(&grid, 0.0)
        .unwrap();

        let in_burgers = convert_index(&v, 0, TargetIndex::Burgers, &d).unwrap();
        assert_eq!(in_burgers.signature().kinds(), &[IndexKind::BurgersUpper]);
        let back = convert_index(&in_burgers, 0, TargetIndex::Real, &d).unwrap();
        assert!(back.max_abs_diff(&v).unwrap() < 1e-13);

        // Converting an already-real slot to real is a bookkeeping error.
        assert!(convert_index(&v, 0, TargetIndex::Real, &d).is_err());

        // Lower-slot conversions use the transposed pairing; round trip too.
        let w_sig = Signature::new(&[IndexKind::RealLower]).unwrap();
        let w = FieldProvider::new(w_sig, |y: [f64; 3], _, out: &mut [f64]| {
            out[0] = y[1].cos();
            out[1] = -1.0;
            out[2] = 0.5;
        })
        .sample(&grid, 0.0)
        .unwrap();
        let wb = convert_index(&w, 0, TargetIndex::Burgers, &d).unwrap();
        assert_eq!(wb.signature().kinds(), &[IndexKind::BurgersLower]);
        let wback = convert_index(&wb, 0, TargetIndex::Real, &d).unwrap();
        assert!(wback.max_abs_diff(&w).unwrap() < 1e-13);
    }

    /// Converting both slots of the identity Burgers metric yields the
    /// deformation tensor.
    #[test]
    fn converting_burgers_metric_gives_deformation() {
        let grid = Grid::new([8, 8, 8], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let bsig = Signature::new(&[IndexKind::BurgersLower, IndexKind::BurgersLower]).unwrap();
        let bm = TensorField::identity(grid, bsig).unwrap();
        let once = convert_index(&bm, 0, TargetIndex::Real, &d).unwrap();
        let twice = convert_index(&once, 1, TargetIndex::Real, &d).unwrap();
        let direct = deformation_from_distortion(&d, None).unwrap();
        assert!(twice.max_abs_diff(&direct).unwrap() < 1e-14);
    }

    /// Frozen defect tensor of the sine shear: the single component
    /// `z[1][3][2] = 0.1 cos(y3)` (1-based), everything else zero.
    #[test]
    fn defect_tensor_of_sin_shear_matches_closed_form() {
        let grid = Grid::new([8, 8, 32], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let lc = Connection::zero(grid);
        let partials = sin_shear_provider().sample_gradient_stack(&grid, 0.0).unwrap();
        let z = z_from_distortion_with(&d, &partials, &lc).unwrap();
        for lin in [0usize, 7, grid.node_count() - 3] {
            let y3 = grid.coords(grid.unravel(lin))[2];
            let want = 0.1 * y3.cos();
            assert!((z.component((0 * 3 + 2) * 3 + 1)[lin] - want).abs() < 1e-14);
        }
        // Only that one component is nonzero.
        let mut zz = z.clone();
        zz.component_mut((0 * 3 + 2) * 3 + 1).fill(0.0);
        assert!(zz.sup_norm() < 1e-14);

        // Finite-difference route agrees to stencil accuracy.
        let z_fd = z_from_distortion(&d, &lc).unwrap();
        assert!(z.max_abs_diff(&z_fd).unwrap() < 1e-5);
    }

    /// Frozen density of the sine shear: `density[1][1] = -0.1 cos(y3)`.
    #[test]
    fn density_of_sin_shear_matches_closed_form() {
        let grid = Grid::new([8, 8, 32], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let background = delta_metric(grid);
        let volume = volume_tensor(&background);
        let lc = levi_civita_connection(&background).unwrap();
        let density = burgers_from_distortion(&d, &background, &volume, &lc).unwrap();
        for lin in [0usize, 11, grid.node_count() - 5] {
            let y3 = grid.coords(grid.unravel(lin))[2];
            let want = -0.1 * y3.cos();
            assert!((density.component(0)[lin] - want).abs() < 1e-5);
        }
    }

    /// The two assembly routes for the material connection must agree
    /// exactly when both use closed-form derivatives.
    #[test]
    fn connection_routes_agree_with_analytic_derivatives() {
        let grid = Grid::new([8, 8, 16], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let lc = Connection::zero(grid);
        let partials = sin_shear_provider().sample_gradient_stack(&grid, 0.0).unwrap();
        let via_distortion = connection_from_distortion_with(&d, &partials, &lc).unwrap();

        // Deformation route: closed-form deformation tensor and gradient.
        let def_provider = FieldProvider::new(sig::real_ll(), |y: [f64; 3], _, out: &mut [f64]| {
            let s = 0.1 * y[2].sin();
            out.copy_from_slice(&[1.0, s, 0.0, s, 1.0 + s * s, 0.0, 0.0, 0.0, 1.0]);
        })
        .with_gradient(|y: [f64; 3], _, axis, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                let s = 0.1 * y[2].sin();
                let ds = 0.1 * y[2].cos();
                out[1] = ds;
                out[3] = ds;
                out[4] = 2.0 * s * ds;
            }
        });
        let deformation =
            Metric::from_field(def_provider.sample(&grid, 0.0).unwrap(), None).unwrap();
        let dg = def_provider.sample_gradient_stack(&grid, 0.0).unwrap();
        let via_deformation =
            concordant_connection(&deformation, &dg, &via_distortion.torsion).unwrap();

        let gap = via_distortion.coeffs.max_abs_diff(&via_deformation.coeffs).unwrap();
        assert!(gap < 1e-13, "route gap {gap:e}");

        // Spot check the single nonzero coefficient: 0.1 cos(y3).
        let node = [2, 3, 5];
        let y3 = grid.coords(node)[2];
        assert!(
            (via_deformation.coeffs.value(&[0, 2, 1], node) - 0.1 * y3.cos()).abs() < 1e-13
        );
    }

    /// Round trip: reconstruct the sine shear from its own connection and
    /// initial value; fourth-order accuracy in the sweep resolution.
    #[test]
    fn pfaff_round_trip_recovers_distortion_at_fourth_order() {
        let run = |n: usize| -> f64 {
            let grid = Grid::new([n, n, n], [TAU, TAU, TAU]).unwrap();
            let d = sin_shear(grid);
            let partials = sin_shear_provider().sample_gradient_stack(&grid, 0.0).unwrap();
            let lc = Connection::zero(grid);
            let conn = connection_from_distortion_with(&d, &partials, &lc).unwrap();
            let initial = matrix_at(&d.components, grid.linear([0, 0, 0]));
            let rec = integrate_pfaff(&conn, &initial, &PfaffOptions::default()).unwrap();
            rec.components.max_abs_diff(&d.components).unwrap()
        };
        let (e16, e32) = (run(16), run(32));
        assert!(e32 < 1e-4, "round-trip error at n=32 is {e32:e}");
        let order = (e16 / e32).log2();
        assert!(order > 3.2, "observed sweep order {order}");
    }

    /// Path independence: opposite sweep orders agree to discretization
    /// accuracy on a flat connection, and the monodromy defect is tiny.
    #[test]
    fn compatibility_report_is_clean_for_flat_connection() {
        let grid = Grid::new([16, 16, 16], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let partials = sin_shear_provider().sample_gradient_stack(&grid, 0.0).unwrap();
        let lc = Connection::zero(grid);
        let conn = connection_from_distortion_with(&d, &partials, &lc).unwrap();
        let initial = matrix_at(&d.components, 0);
        let report =
            compatibility_residual(&conn, &initial, &PfaffOptions::default()).unwrap();
        assert!(report.curvature_sup < 1e-3, "curvature {:e}", report.curvature_sup);
        assert!(report.path_gap < 2e-3, "path gap {:e}", report.path_gap);
        assert!(report.monodromy < 2e-3, "monodromy {:e}", report.monodromy);
    }

    /// The solver must refuse a genuinely curved connection: the constant
    /// unit-torsion example measures curvature 1/4.
    #[test]
    fn pfaff_refuses_incompatible_connection() {
        let grid = Grid::new([8, 8, 8], [1.0, 1.0, 1.0]).unwrap();
        let deformation = delta_metric(grid);
        let dg = TensorField::zeros(grid, sig::real_lll());
        let mut torsion = TensorField::zeros(grid, sig::conn());
        for lin in 0..grid.node_count() {
            torsion.component_mut((0 * 3 + 1) * 3 + 2)[lin] = 1.0;
            torsion.component_mut((0 * 3 + 2) * 3 + 1)[lin] = -1.0;
        }
        let conn = concordant_connection(&deformation, &dg, &torsion).unwrap();
        let initial = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let err = integrate_pfaff(&conn, &initial, &PfaffOptions::default()).unwrap_err();
        match err {
            Error::IncompatibleConnection { residual, threshold } => {
                assert!((residual - 0.25).abs() < 1e-10, "residual {residual}");
                assert!((threshold - DEFAULT_COMPATIBILITY_THRESHOLD).abs() < 1e-15);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn pfaff_rejects_singular_initial_value() {
        let grid = Grid::new([8, 8, 8], [TAU, TAU, TAU]).unwrap();
        let conn = Connection::zero(grid);
        let initial = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let err = integrate_pfaff(&conn, &initial, &PfaffOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateInitialValue { .. }), "{err}");
    }

    /// Two reconstructions from frame-rotated initial values differ by a
    /// constant orthogonal gauge, which alignment recovers to roundoff.
    #[test]
    fn gauge_alignment_recovers_frame_rotation() {
        let grid = Grid::new([16, 16, 16], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let partials = sin_shear_provider().sample_gradient_stack(&grid, 0.0).unwrap();
        let lc = Connection::zero(grid);
        let conn = connection_from_distortion_with(&d, &partials, &lc).unwrap();
        let options = PfaffOptions::default();

        let m0 = matrix_at(&d.components, 0);
        let first = integrate_pfaff(&conn, &m0, &options).unwrap();

        // Rotate the crystal frame by 0.3 rad about the third axis:
        // rows are Burgers indices, so the rotated initial value is Q^T m0.
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let q = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
        let mut m0_rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for col in 0..3 {
                for j in 0..3 {
                    m0_rot[i][col] += q[j][i] * m0[j][col];
                }
            }
        }
        let second = integrate_pfaff(&conn, &m0_rot, &options).unwrap();

        let gauge = gauge_align(&first.components, &second.components, [0, 0, 0]).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert!(
                    (gauge.o[j][i] - q[j][i]).abs() < 1e-12,
                    "gauge[{j}][{i}] = {} want {}",
                    gauge.o[j][i],
                    q[j][i]
                );
            }
        }
        assert!(gauge.orthogonality_residual() < 1e-12);

        let aligned = apply_gauge(&first.components, &gauge).unwrap();
        let gap = aligned.max_abs_diff(&second.components).unwrap();
        assert!(gap < 1e-11, "aligned reconstruction gap {gap:e}");
        let defect = alignment_defect(&first.components, &second.components, &gauge).unwrap();
        assert!(defect < 1e-11, "global alignment defect {defect:e}");
    }

    /// A uniform rescaling changes the deformation tensor, so the frame
    /// change solving the one-node equation is 2*identity and must be
    /// rejected: its transpose-product is 4*identity, far from orthogonal.
    #[test]
    fn gauge_alignment_rejects_rescaled_field() {
        let grid = Grid::new([8, 8, 8], [TAU, TAU, TAU]).unwrap();
        let d = sin_shear(grid);
        let doubled = d.components.scale(2.0);
        match gauge_align(&d.components, &doubled, [0, 0, 0]) {
            Err(Error::GaugeMismatch { residual, tolerance }) => {
                assert!((residual - 3.0).abs() < 1e-12, "O^T O - I should be 3*identity");
                assert!((tolerance - GAUGE_ORTHOGONALITY_TOLERANCE).abs() < 1e-300);
            }
            other => panic!("expected a gauge mismatch, got {other:?}"),
        }
    }
}
