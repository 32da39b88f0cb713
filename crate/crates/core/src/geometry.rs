//! Connections, torsion, curvature, and covariant differentiation.
//!
//! Two connections matter here. The background chart carries its torsion-free
//! Levi-Civita connection. The material state carries the metric-concordant
//! connection with torsion: the unique connection that parallel-transports
//! the elastic deformation tensor to itself and whose torsion encodes the
//! dislocation density. The difference of the two is the defect tensor `Z`,
//! which drives every conservation statement the library verifies.
//!
//! Index convention: connection coefficients are stored with signature
//! `(upper, lower, lower)` as `C[k][p][q]`, where `p` (the middle slot) is
//! the differentiation direction: `D_p X^k = d_p X^k + C[k][p][m] X^m`.
//! Torsion is the antisymmetric part in `(p, q)`: `T[k][p][q] = C[k][p][q] -
//! C[k][q][p]`. Curvature is stored as `R[k][q][i][j]`: the value of
//! `[D_i, D_j]` acting on the upper slot `k` against the lower slot `q`.

use crate::error::{Error, Result};
use crate::grid::{gradient_stack, Grid};
use crate::scalar::Real;
use crate::tensor::{contract, matrix_at, sig, IndexKind, Metric, TensorField, VolumeTensor};

/// Relative tolerance for structural validation of connection inputs
/// (antisymmetry of torsion, coherence of coefficients with torsion).
const STRUCTURE_REL_TOL: f64 = 1e-9;

/// Reads a rank-3 field's `3^3` values at one node into a stack array.
#[inline]
pub(crate) fn load_rank3<T: Real>(f: &TensorField<T>, nn: usize, lin: usize) -> [[[T; 3]; 3]; 3] {
    debug_assert_eq!(f.signature().rank(), 3);
    let d = f.data();
    let mut out = [[[T::zero(); 3]; 3]; 3];
    for (a, pa) in out.iter_mut().enumerate() {
        for (b, pb) in pa.iter_mut().enumerate() {
            for (c, v) in pb.iter_mut().enumerate() {
                *v = d[((a * 3 + b) * 3 + c) * nn + lin];
            }
        }
    }
    out
}

/// Writes a rank-3 stack array into a field at one node.
#[inline]
pub(crate) fn store_rank3<T: Real>(
    f: &mut TensorField<T>,
    nn: usize,
    lin: usize,
    m: &[[[T; 3]; 3]; 3],
) {
    let d = f.data_mut();
    for (a, pa) in m.iter().enumerate() {
        for (b, pb) in pa.iter().enumerate() {
            for (c, &v) in pb.iter().enumerate() {
                d[((a * 3 + b) * 3 + c) * nn + lin] = v;
            }
        }
    }
}

/// Reads a rank-4 field's `3^4` values at one node into a stack array.
#[inline]
pub(crate) fn load_rank4<T: Real>(
    f: &TensorField<T>,
    nn: usize,
    lin: usize,
) -> [[[[T; 3]; 3]; 3]; 3] {
    debug_assert_eq!(f.signature().rank(), 4);
    let d = f.data();
    let mut out = [[[[T::zero(); 3]; 3]; 3]; 3];
    for (a, pa) in out.iter_mut().enumerate() {
        for (b, pb) in pa.iter_mut().enumerate() {
            for (c, pc) in pb.iter_mut().enumerate() {
                for (e, v) in pc.iter_mut().enumerate() {
                    *v = d[(((a * 3 + b) * 3 + c) * 3 + e) * nn + lin];
                }
            }
        }
    }
    out
}

#[inline]
fn store_rank4<T: Real>(f: &mut TensorField<T>, nn: usize, lin: usize, m: &[[[[T; 3]; 3]; 3]; 3]) {
    let d = f.data_mut();
    for (a, pa) in m.iter().enumerate() {
        for (b, pb) in pa.iter().enumerate() {
            for (c, pc) in pb.iter().enumerate() {
                for (e, &v) in pc.iter().enumerate() {
                    d[(((a * 3 + b) * 3 + c) * 3 + e) * nn + lin] = v;
                }
            }
        }
    }
}

/// Sup-norm of `T[k][p][q] + T[k][q][p]`, the failure of antisymmetry.
fn antisymmetry_residual<T: Real>(torsion: &TensorField<T>) -> T {
    let nn = torsion.grid().node_count();
    let mut worst = T::zero();
    for k in 0..3 {
        for p in 0..3 {
            for q in p..3 {
                let a = torsion.component((k * 3 + p) * 3 + q);
                let b = torsion.component((k * 3 + q) * 3 + p);
                for lin in 0..nn {
                    worst = worst.max((a[lin] + b[lin]).abs());
                }
            }
        }
    }
    worst
}

/// An affine connection: coefficients plus their torsion.
///
/// Both fields have signature `(upper, lower, lower)`; see the module docs
/// for the slot convention. Constructors guarantee that `torsion` is
/// antisymmetric in its last two slots and equals the antisymmetric part of
/// `coeffs`.
#[derive(Clone, Debug)]
pub struct Connection<T> {
    pub coeffs: TensorField<T>,
    pub torsion: TensorField<T>,
}

impl<T: Real> Connection<T> {
    /// Validating constructor for externally assembled coefficients.
    pub fn new(coeffs: TensorField<T>, torsion: TensorField<T>) -> Result<Self> {
        if coeffs.signature() != sig::conn() || torsion.signature() != sig::conn() {
            return Err(Error::Signature(
                "connection coefficients and torsion need signature (upper, lower, lower)".into(),
            ));
        }
        if coeffs.grid() != torsion.grid() {
            return Err(Error::InvalidArgument(
                "connection coefficients and torsion live on different grids".into(),
            ));
        }
        let asym = antisymmetry_residual(&torsion);
        let tol = T::of(STRUCTURE_REL_TOL) * (T::one() + torsion.sup_norm());
        if asym > tol {
            return Err(Error::AsymmetricTorsion { residual: asym.as_f64() });
        }
        // Coherence: the antisymmetric part of the coefficients must be the
        // declared torsion.
        let nn = coeffs.grid().node_count();
        let mut worst = T::zero();
        for k in 0..3 {
            for p in 0..3 {
                for q in 0..3 {
                    let c_pq = coeffs.component((k * 3 + p) * 3 + q);
                    let c_qp = coeffs.component((k * 3 + q) * 3 + p);
                    let t = torsion.component((k * 3 + p) * 3 + q);
                    for lin in 0..nn {
                        worst = worst.max((c_pq[lin] - c_qp[lin] - t[lin]).abs());
                    }
                }
            }
        }
        let ctol = T::of(STRUCTURE_REL_TOL) * (T::one() + coeffs.sup_norm());
        if worst > ctol {
            return Err(Error::AsymmetricTorsion { residual: worst.as_f64() });
        }
        Ok(Self { coeffs, torsion })
    }

    /// The zero connection (flat Cartesian background).
    pub fn zero(grid: Grid<T>) -> Self {
        Self {
            coeffs: TensorField::zeros(grid, sig::conn()),
            torsion: TensorField::zeros(grid, sig::conn()),
        }
    }

    pub fn grid(&self) -> &Grid<T> {
        self.coeffs.grid()
    }
}

/// Christoffel symbols of a metric from its inverse and its gradient:
/// `C[k][i][j] = 1/2 ginv[k][r] (dg[i][j][r] + dg[j][r][i] - dg[r][i][j])`.
fn christoffel_coeffs<T: Real>(
    inverse: &TensorField<T>,
    dgrad: &TensorField<T>,
) -> TensorField<T> {
    let grid = *inverse.grid();
    let nn = grid.node_count();
    let half = T::of(0.5);
    let mut coeffs = TensorField::zeros(grid, sig::conn());
    for lin in 0..nn {
        let gi = matrix_at(inverse, lin);
        let dg = load_rank3(dgrad, nn, lin);
        let mut c = [[[T::zero(); 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, ck) in c.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for r in 0..3 {
                        acc = acc + gi[k][r] * (dg[i][j][r] + dg[j][r][i] - dg[r][i][j]);
                    }
                    ck[i][j] = half * acc;
                }
            }
        }
        store_rank3(&mut coeffs, nn, lin, &c);
    }
    coeffs
}

/// Torsion-free metric connection of the background chart.
///
/// Uses the chart's closed-form metric derivative when the metric carries
/// one; otherwise falls back to the fourth-order finite difference, which
/// requires the metric to be periodic over the box.
pub fn levi_civita_connection<T: Real>(metric: &Metric<T>) -> Result<Connection<T>> {
    let dgrad = match &metric.gradient {
        Some(g) => g.clone(),
        None => gradient_stack(&metric.g)?,
    };
    let coeffs = christoffel_coeffs(&metric.inverse, &dgrad);
    let torsion = TensorField::zeros(*metric.g.grid(), sig::conn());
    Ok(Connection { coeffs, torsion })
}

/// The unique connection with the prescribed torsion that parallel-transports
/// the deformation tensor to itself.
///
/// With `G` the deformation tensor, `dG` its spatial gradient (leading slot
/// the derivative direction), and `t` the torsion:
///
/// ```text
/// C[k][i][j] = 1/2 Ginv[k][r] (dG[i][j][r] + dG[j][r][i] - dG[r][i][j])
///            - 1/2 Ginv[k][r] sum_s (G[i][s] t[s][j][r] + G[j][s] t[s][i][r])
///            + 1/2 t[k][i][j]
/// ```
///
/// The gradient is a separate argument so callers control whether it comes
/// from a closed form or from finite differences; the concordance property
/// `D G = 0` then holds exactly with respect to whichever derivative values
/// were supplied.
pub fn concordant_connection<T: Real>(
    deformation: &Metric<T>,
    deformation_gradient: &TensorField<T>,
    torsion: &TensorField<T>,
) -> Result<Connection<T>> {
    if deformation_gradient.signature() != sig::real_lll() {
        return Err(Error::Signature(
            "deformation gradient needs signature (lower, lower, lower)".into(),
        ));
    }
    if torsion.signature() != sig::conn() {
        return Err(Error::Signature("torsion needs signature (upper, lower, lower)".into()));
    }
    if deformation_gradient.grid() != deformation.g.grid()
        || torsion.grid() != deformation.g.grid()
    {
        return Err(Error::InvalidArgument(
            "deformation, gradient, and torsion live on different grids".into(),
        ));
    }
    let asym = antisymmetry_residual(torsion);
    let tol = T::of(STRUCTURE_REL_TOL) * (T::one() + torsion.sup_norm());
    if asym > tol {
        return Err(Error::AsymmetricTorsion { residual: asym.as_f64() });
    }

    let grid = *deformation.g.grid();
    let nn = grid.node_count();
    let half = T::of(0.5);
    let mut coeffs = TensorField::zeros(grid, sig::conn());
    for lin in 0..nn {
        let g = matrix_at(&deformation.g, lin);
        let gi = matrix_at(&deformation.inverse, lin);
        let dg = load_rank3(deformation_gradient, nn, lin);
        let t = load_rank3(torsion, nn, lin);
        let mut c = [[[T::zero(); 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                // Metric part plus torsion coupling, both to be raised by
                // the inverse deformation.
                let mut m = [T::zero(); 3];
                for (r, mr) in m.iter_mut().enumerate() {
                    let lambda = dg[i][j][r] + dg[j][r][i] - dg[r][i][j];
                    let mut coupling = T::zero();
                    for s in 0..3 {
                        coupling = coupling + g[i][s] * t[s][j][r] + g[j][s] * t[s][i][r];
                    }
                    *mr = half * (lambda - coupling);
                }
                for (k, ck) in c.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (r, &mr) in m.iter().enumerate() {
                        acc = acc + gi[k][r] * mr;
                    }
                    ck[i][j] = acc + half * t[k][i][j];
                }
            }
        }
        store_rank3(&mut coeffs, nn, lin, &c);
    }
    Ok(Connection { coeffs, torsion: torsion.clone() })
}

/// Defect tensor: difference of the material connection and the background
/// connection. A tensor even though neither summand is one.
pub fn z_tensor<T: Real>(material: &Connection<T>, background: &Connection<T>) -> Result<TensorField<T>> {
    material.coeffs.sub(&background.coeffs)
}

/// Torsion of the material connection from the dislocation density:
/// `t[k][i][j] = sum_{s,r} w[s][i][j] ginv[s][r] density[k][r]`, with `w`
/// the lower volume tensor of the background metric.
pub fn torsion_from_burgers_density<T: Real>(
    density: &TensorField<T>,
    background: &Metric<T>,
    volume: &VolumeTensor<T>,
) -> Result<TensorField<T>> {
    if density.signature() != sig::real_ul() {
        return Err(Error::Signature("density needs signature (upper, lower)".into()));
    }
    // w[s][i][j] ginv[s][r] -> X[i][j][r]; X[i][j][r] density[k][r] -> Y[i][j][k].
    let x = contract(&volume.lower, &background.inverse, &[(0, 0)])?;
    let y = contract(&x, density, &[(2, 1)])?;
    y.permute(&[2, 0, 1])
}

/// Dislocation density recovered from the defect tensor:
/// `density[p][q] = sum_{m,r,s} g[q][m] w[m][r][s] z[p][r][s]`, with `w` the
/// upper volume tensor of the background metric.
///
/// This inverts [`torsion_from_burgers_density`] exactly (in real
/// arithmetic) because the volume tensor contracts to a multiple of the
/// identity.
pub fn burgers_density_from_z<T: Real>(
    z: &TensorField<T>,
    background: &Metric<T>,
    volume: &VolumeTensor<T>,
) -> Result<TensorField<T>> {
    if z.signature() != sig::conn() {
        return Err(Error::Signature("defect tensor needs signature (upper, lower, lower)".into()));
    }
    // w[m][r][s] z[k][r][s] -> W[m][k]; g[q][m] W[m][k] -> V[q][k] -> density[k][q].
    let w = contract(&volume.upper, z, &[(1, 1), (2, 2)])?;
    let v = contract(&background.g, &w, &[(1, 0)])?;
    v.permute(&[1, 0])
}

/// Covariant derivative with caller-supplied partial derivatives.
///
/// `partials` must be the gradient stack of `field` (leading slot the
/// derivative direction); the function adds the connection corrections:
/// `+C[k][p][m]` contracted into every real upper slot, `-C[m][p][k]` into
/// every real lower slot. Burgers slots are inert. Keeping the partials
/// explicit lets closed-form gradients flow through the same code path as
/// finite differences.
pub fn covariant_derivative_with<T: Real>(
    field: &TensorField<T>,
    partials: &TensorField<T>,
    conn: &Connection<T>,
) -> Result<TensorField<T>> {
    let expected = field.signature().prepend(IndexKind::RealLower)?;
    if partials.signature() != expected {
        return Err(Error::Signature(
            "partials must be the gradient stack of the field (leading lower slot)".into(),
        ));
    }
    if field.grid() != partials.grid() || field.grid() != conn.grid() {
        return Err(Error::InvalidArgument(
            "field, partials, and connection live on different grids".into(),
        ));
    }
    let rank = field.signature().rank();
    let ncomp = field.signature().component_count();
    let nn = field.grid().node_count();
    let mut out = partials.clone();
    for c in 0..ncomp {
        let digits = field.signature().unflatten(c);
        for s in 0..rank {
            let kind = field.signature().kind(s);
            if !kind.is_real() {
                continue;
            }
            let stride_s = 3usize.pow((rank - 1 - s) as u32);
            for m in 0..3 {
                let cn = c - digits[s] * stride_s + m * stride_s;
                for p in 0..3 {
                    let oc = p * ncomp + c;
                    let gc = if kind.is_upper() {
                        (digits[s] * 3 + p) * 3 + m
                    } else {
                        (m * 3 + p) * 3 + digits[s]
                    };
                    let gam = conn.coeffs.component(gc);
                    let base = field.component(cn);
                    let dst = out.component_mut(oc);
                    if kind.is_upper() {
                        for lin in 0..nn {
                            dst[lin] = dst[lin] + gam[lin] * base[lin];
                        }
                    } else {
                        for lin in 0..nn {
                            dst[lin] = dst[lin] - gam[lin] * base[lin];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Covariant derivative with finite-difference partials.
pub fn covariant_derivative<T: Real>(
    field: &TensorField<T>,
    conn: &Connection<T>,
) -> Result<TensorField<T>> {
    let partials = gradient_stack(field)?;
    covariant_derivative_with(field, &partials, conn)
}

/// Curvature of a connection, by finite differences of its coefficients:
///
/// ```text
/// R[k][q][i][j] = d_i C[k][j][q] - d_j C[k][i][q]
///              + sum_m (C[m][j][q] C[k][i][m] - C[m][i][q] C[k][j][m])
/// ```
pub fn curvature<T: Real>(conn: &Connection<T>) -> Result<TensorField<T>> {
    let dg = gradient_stack(&conn.coeffs)?;
    curvature_quadratic(&conn.coeffs, &dg, None)
}

/// Curvature re-expressed through the defect tensor: the background
/// curvature plus the covariant curl and square of `z`,
///
/// ```text
/// R[k][q][i][j] = Rbg[k][q][i][j] + D_i z[k][j][q] - D_j z[k][i][q]
///              + sum_m (z[m][j][q] z[k][i][m] - z[m][i][q] z[k][j][m])
/// ```
///
/// with `D` the background covariant derivative. Algebraically identical to
/// [`curvature`] of the summed connection; numerically an independent route
/// that cross-checks the assembly.
pub fn curvature_from_z<T: Real>(
    z: &TensorField<T>,
    background: &Connection<T>,
) -> Result<TensorField<T>> {
    if z.signature() != sig::conn() {
        return Err(Error::Signature("defect tensor needs signature (upper, lower, lower)".into()));
    }
    let dz = covariant_derivative(z, background)?;
    let bg_curv = curvature(background)?;
    curvature_quadratic(z, &dz, Some(&bg_curv))
}

/// Shared assembly for the two curvature routes: first-derivative stack
/// (plain or covariant) antisymmetrized plus the quadratic term, plus an
/// optional base curvature.
fn curvature_quadratic<T: Real>(
    coeffs: &TensorField<T>,
    dstack: &TensorField<T>,
    base: Option<&TensorField<T>>,
) -> Result<TensorField<T>> {
    let grid = *coeffs.grid();
    let nn = grid.node_count();
    let mut out = TensorField::zeros(grid, sig::curv());
    for lin in 0..nn {
        let a = load_rank3(coeffs, nn, lin);
        let d = load_rank4(dstack, nn, lin);
        let b = base.map(|f| load_rank4(f, nn, lin));
        let mut r = [[[[T::zero(); 3]; 3]; 3]; 3];
        for p in 0..3 {
            for q in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let mut acc = d[i][p][j][q] - d[j][p][i][q];
                        for m in 0..3 {
                            acc = acc + a[m][j][q] * a[p][i][m] - a[m][i][q] * a[p][j][m];
                        }
                        if let Some(bb) = &b {
                            acc = acc + bb[p][q][i][j];
                        }
                        r[p][q][i][j] = acc;
                    }
                }
            }
        }
        store_rank4(&mut out, nn, lin, &r);
    }
    Ok(out)
}

/// Residual of the curvature/torsion commutation identity on a test field:
///
/// ```text
/// res = (D_i D_j - D_j D_i) X
///     - sum over real upper slots k:  + R[k][n][i][j] X^(n at that slot)
///     - sum over real lower slots q:  - R[n][q][i][j] X_(n at that slot)
///     + T[n][i][j] (D_n X)
/// ```
///
/// Converges to zero at the order of the derivative stencil when the
/// connection, curvature, and covariant derivatives are mutually consistent.
pub fn commutator_residual<T: Real>(
    field: &TensorField<T>,
    conn: &Connection<T>,
) -> Result<TensorField<T>> {
    let d1 = covariant_derivative(field, conn)?;
    let d2 = covariant_derivative(&d1, conn)?;
    let curv = curvature(conn)?;
    let grid = *field.grid();
    let nn = grid.node_count();
    let rank = field.signature().rank();
    let ncomp = field.signature().component_count();
    let mut out = TensorField::zeros(grid, d2.signature());

    for lin in 0..nn {
        let rc = load_rank4(&curv, nn, lin);
        let t = load_rank3(&conn.torsion, nn, lin);
        for c in 0..ncomp {
            let digits = field.signature().unflatten(c);
            for i in 0..3 {
                for j in 0..3 {
                    let d2_ij = d2.component((i * 3 + j) * ncomp + c)[lin];
                    let d2_ji = d2.component((j * 3 + i) * ncomp + c)[lin];
                    let mut acc = d2_ij - d2_ji;
                    for s in 0..rank {
                        let kind = field.signature().kind(s);
                        if !kind.is_real() {
                            continue;
                        }
                        let stride_s = 3usize.pow((rank - 1 - s) as u32);
                        for n in 0..3 {
                            let cn = c - digits[s] * stride_s + n * stride_s;
                            let x = field.component(cn)[lin];
                            if kind.is_upper() {
                                acc = acc - rc[digits[s]][n][i][j] * x;
                            } else {
                                acc = acc + rc[n][digits[s]][i][j] * x;
                            }
                        }
                    }
                    for n in 0..3 {
                        acc = acc + t[n][i][j] * d1.component(n * ncomp + c)[lin];
                    }
                    out.component_mut((i * 3 + j) * ncomp + c)[lin] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Divergence-type residual of the dislocation density:
///
/// ```text
/// res^k = ginv[p][q] D_p density[k][q] + ginv[p][q] density[m][q] z[k][p][m]
/// ```
///
/// with `D` the background Levi-Civita derivative. Vanishes identically for
/// densities generated by a flat material connection.
pub fn divergency_residual<T: Real>(
    density: &TensorField<T>,
    z: &TensorField<T>,
    background: &Metric<T>,
    lc: &Connection<T>,
) -> Result<TensorField<T>> {
    if density.signature() != sig::real_ul() {
        return Err(Error::Signature("density needs signature (upper, lower)".into()));
    }
    let d = covariant_derivative(density, lc)?;
    // ginv[p][q] d[p][k][q] -> rank 1 (k).
    let term1 = contract(&background.inverse, &d, &[(0, 0), (1, 2)])?;
    // ginv[p][q] density[m][q] -> Y[p][m]; Y[p][m] z[k][p][m] -> rank 1 (k).
    let y = contract(&background.inverse, density, &[(1, 1)])?;
    let term2 = contract(&y, z, &[(0, 1), (1, 2)])?;
    term1.add(&term2)
}

/// The same residual evaluated through the defect tensor alone:
///
/// ```text
/// res^k = w[p][r][s] ( D_p z[k][r][s] + sum_m z[m][r][s] z[k][p][m] )
/// ```
///
/// with `w` the upper volume tensor. Equal to [`divergency_residual`] up to
/// discretization error; the agreement of the two routes is itself one of
/// the library's verification probes.
pub fn divergency_residual_dual<T: Real>(
    z: &TensorField<T>,
    lc: &Connection<T>,
    volume: &VolumeTensor<T>,
) -> Result<TensorField<T>> {
    if z.signature() != sig::conn() {
        return Err(Error::Signature("defect tensor needs signature (upper, lower, lower)".into()));
    }
    let dz = covariant_derivative(z, lc)?;
    // w[p][r][s] dz[p][k][r][s] -> rank 1 (k).
    let t1 = contract(&volume.upper, &dz, &[(0, 0), (1, 2), (2, 3)])?;
    // z[m][r][s] z[k][p][m] -> Q[r][s][k][p]; w[p][r][s] Q[r][s][k][p] -> (k).
    let q = contract(z, z, &[(0, 2)])?;
    let t2 = contract(&volume.upper, &q, &[(0, 3), (1, 0), (2, 1)])?;
    t1.add(&t2)
}
