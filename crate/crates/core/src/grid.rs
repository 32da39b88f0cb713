//! Periodic structured grid, coordinate charts, analytic field providers,
//! and the fourth-order finite-difference derivative.
//!
//! The computational domain is a flat 3-torus: curvilinear coordinates
//! `y^a` live in `[0, L_a)` with periodic wrap-around on every axis, sampled
//! on a uniform lattice. All derivative stencils exploit that periodicity,
//! so fields handed to them must be smooth across the wrap.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Signature, TensorField};

/// Minimum number of nodes per axis. Keeps the five-point stencil from
/// folding onto itself and keeps refinement studies meaningful.
pub const MIN_NODES_PER_AXIS: usize = 8;

/// Uniform periodic lattice over `[0, L_1) x [0, L_2) x [0, L_3)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    lengths: [T; 3],
    spacing: [T; 3],
}

impl<T: Real> Grid<T> {
    /// Builds a grid, validating dimensions and box lengths.
    pub fn new(dims: [usize; 3], lengths: [T; 3]) -> Result<Self> {
        for (axis, &n) in dims.iter().enumerate() {
            if n < MIN_NODES_PER_AXIS {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis} has {n} nodes, need at least {MIN_NODES_PER_AXIS}"
                )));
            }
        }
        for (axis, &len) in lengths.iter().enumerate() {
            if !(len.is_finite() && len > T::zero()) {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis} has non-positive or non-finite length {}",
                    len.as_f64()
                )));
            }
        }
        let spacing = [
            lengths[0] / T::of_usize(dims[0]),
            lengths[1] / T::of_usize(dims[1]),
            lengths[2] / T::of_usize(dims[2]),
        ];
        Ok(Self { dims, lengths, spacing })
    }

    /// Same box, `factor` times as many nodes per axis.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::InvalidArgument(format!(
                "refinement factor must be at least 2, got {factor}"
            )));
        }
        Self::new(
            [self.dims[0] * factor, self.dims[1] * factor, self.dims[2] * factor],
            self.lengths,
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn lengths(&self) -> [T; 3] {
        self.lengths
    }

    pub fn spacing(&self) -> [T; 3] {
        self.spacing
    }

    /// Total number of lattice nodes.
    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Coordinates of a node given its per-axis indices.
    pub fn coords(&self, idx: [usize; 3]) -> [T; 3] {
        [
            T::of_usize(idx[0]) * self.spacing[0],
            T::of_usize(idx[1]) * self.spacing[1],
            T::of_usize(idx[2]) * self.spacing[2],
        ]
    }

    /// Row-major linear index of a node: axis 3 varies fastest.
    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    /// Inverse of [`Grid::linear`].
    #[inline]
    pub fn unravel(&self, mut linear: usize) -> [usize; 3] {
        let i3 = linear % self.dims[2];
        linear /= self.dims[2];
        let i2 = linear % self.dims[1];
        let i1 = linear / self.dims[1];
        [i1, i2, i3]
    }

    /// Periodic wrap of a possibly negative per-axis index.
    #[inline]
    pub fn wrap(&self, index: isize, axis: usize) -> usize {
        let n = self.dims[axis] as isize;
        (((index % n) + n) % n) as usize
    }

    /// Linear-index stride between neighbours along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.dims[1] * self.dims[2],
            1 => self.dims[2],
            _ => 1,
        }
    }
}

/// Fourth-order central finite difference of every component of `field`
/// along `axis` (0-based), using the periodic five-point stencil
/// `(f[-2] - 8 f[-1] + 8 f[+1] - f[+2]) / (12 h)`.
pub fn partial_derivative<T: Real>(field: &TensorField<T>, axis: usize) -> Result<TensorField<T>> {
    if axis >= 3 {
        return Err(Error::InvalidArgument(format!("derivative axis {axis} out of range 0..3")));
    }
    let grid = *field.grid();
    let dims = grid.dims();
    let n_axis = dims[axis];
    let stride = grid.stride(axis) as isize;
    // Per-coordinate offsets (in linear-index units) to the four wrapped
    // stencil neighbours along the axis.
    let mut off_m2 = vec![0isize; n_axis];
    let mut off_m1 = vec![0isize; n_axis];
    let mut off_p1 = vec![0isize; n_axis];
    let mut off_p2 = vec![0isize; n_axis];
    for i in 0..n_axis {
        let here = i as isize;
        off_m2[i] = (grid.wrap(here - 2, axis) as isize - here) * stride;
        off_m1[i] = (grid.wrap(here - 1, axis) as isize - here) * stride;
        off_p1[i] = (grid.wrap(here + 1, axis) as isize - here) * stride;
        off_p2[i] = (grid.wrap(here + 2, axis) as isize - here) * stride;
    }

    let inv_12h = T::one() / (T::of(12.0) * grid.spacing()[axis]);
    let eight = T::of(8.0);
    let mut out = TensorField::zeros(grid, field.signature());
    for comp in 0..field.signature().component_count() {
        let src = field.component(comp);
        let dst = out.component_mut(comp);
        let mut lin = 0usize;
        for i1 in 0..dims[0] {
            for i2 in 0..dims[1] {
                for i3 in 0..dims[2] {
                    let ia = [i1, i2, i3][axis];
                    let base = lin as isize;
                    let vm2 = src[(base + off_m2[ia]) as usize];
                    let vm1 = src[(base + off_m1[ia]) as usize];
                    let vp1 = src[(base + off_p1[ia]) as usize];
                    let vp2 = src[(base + off_p2[ia]) as usize];
                    dst[lin] = (vm2 - vp2 + eight * (vp1 - vm1)) * inv_12h;
                    lin += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Stacks the three axis derivatives of `field` into one field of rank
/// `rank + 1` whose leading slot is the (real, lower) derivative direction.
pub fn gradient_stack<T: Real>(field: &TensorField<T>) -> Result<TensorField<T>> {
    let parts = [
        partial_derivative(field, 0)?,
        partial_derivative(field, 1)?,
        partial_derivative(field, 2)?,
    ];
    TensorField::stack_leading_lower(&parts)
}

type MapFn<T> = Arc<dyn Fn([T; 3]) -> [T; 3] + Send + Sync>;
type JacobianFn<T> = Arc<dyn Fn([T; 3]) -> [[T; 3]; 3] + Send + Sync>;
type MetricGradFn<T> = Arc<dyn Fn([T; 3], usize) -> [[T; 3]; 3] + Send + Sync>;

/// Curvilinear coordinate chart `x = x(y)` on the periodic box, described by
/// its closed-form jacobian `J^i_a = dx^i/dy^a`.
///
/// The Euclidean metric pulled back through the chart is `g = J^T J`; it is
/// evaluated pointwise from the jacobian, never by numeric differentiation
/// of the chart map. Charts may additionally carry the closed-form metric
/// derivative so that downstream Christoffel symbols can be assembled
/// without finite differences.
#[derive(Clone)]
pub struct Chart<T> {
    name: &'static str,
    map: Option<MapFn<T>>,
    jacobian: JacobianFn<T>,
    metric_gradient: Option<MetricGradFn<T>>,
}

impl<T: Real> Chart<T> {
    /// Cartesian chart: `x = y`, metric is the identity.
    pub fn identity() -> Self {
        Self {
            name: "identity",
            map: Some(Arc::new(|y| y)),
            jacobian: Arc::new(|_| {
                let mut j = [[T::zero(); 3]; 3];
                for (d, row) in j.iter_mut().enumerate() {
                    row[d] = T::one();
                }
                j
            }),
            metric_gradient: Some(Arc::new(|_, _| [[T::zero(); 3]; 3])),
        }
    }

    /// Cylindrical shell chart
    /// `x = ((r0 + y1) cos y2, (r0 + y1) sin y2, y3)`,
    /// with metric `diag(1, (r0 + y1)^2, 1)`. The offset `r0 > 0` keeps the
    /// jacobian non-degenerate on `y1 >= 0`.
    pub fn cylindrical_shell(inner_radius: T) -> Self {
        let r0 = inner_radius;
        Self {
            name: "cylindrical-shell",
            map: Some(Arc::new(move |y| {
                let r = r0 + y[0];
                [r * y[1].cos(), r * y[1].sin(), y[2]]
            })),
            jacobian: Arc::new(move |y| {
                let r = r0 + y[0];
                let (s, c) = (y[1].sin(), y[1].cos());
                [
                    [c, -r * s, T::zero()],
                    [s, r * c, T::zero()],
                    [T::zero(), T::zero(), T::one()],
                ]
            }),
            metric_gradient: Some(Arc::new(move |y, axis| {
                let mut dg = [[T::zero(); 3]; 3];
                if axis == 0 {
                    dg[1][1] = T::of(2.0) * (r0 + y[0]);
                }
                dg
            })),
        }
    }

    /// Unit-determinant-free stretch of the first axis:
    /// metric `diag(1 + a sin y1, 1, 1)` with `|a| < 1`.
    ///
    /// This is the pull-back of the Euclidean metric through
    /// `x1 = F(y1), x2 = y2, x3 = y3` with `F' = sqrt(1 + a sin y1)`;
    /// the antiderivative has no elementary closed form, so the chart map
    /// itself is not exposed -- the jacobian and metric are what the
    /// pipelines consume.
    pub fn axial_stretch(amplitude: T) -> Self {
        let a = amplitude;
        Self {
            name: "axial-stretch",
            map: None,
            jacobian: Arc::new(move |y| {
                let mut j = [[T::zero(); 3]; 3];
                j[0][0] = (T::one() + a * y[0].sin()).sqrt();
                j[1][1] = T::one();
                j[2][2] = T::one();
                j
            }),
            metric_gradient: Some(Arc::new(move |y, axis| {
                let mut dg = [[T::zero(); 3]; 3];
                if axis == 0 {
                    dg[0][0] = a * y[0].cos();
                }
                dg
            })),
        }
    }

    /// Chart defined by an arbitrary jacobian closure, mainly for tests.
    /// No analytic metric derivative is attached.
    pub fn custom(
        name: &'static str,
        jacobian: impl Fn([T; 3]) -> [[T; 3]; 3] + Send + Sync + 'static,
    ) -> Self {
        Self { name, map: None, jacobian: Arc::new(jacobian), metric_gradient: None }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    /// Chart map, when it has a closed form.
    pub fn map(&self, y: [T; 3]) -> Option<[T; 3]> {
        self.map.as_ref().map(|f| f(y))
    }

    pub fn jacobian(&self, y: [T; 3]) -> [[T; 3]; 3] {
        (self.jacobian)(y)
    }

    /// Pull-back of the Euclidean metric: `g_ab = sum_i J^i_a J^i_b`.
    pub fn metric(&self, y: [T; 3]) -> [[T; 3]; 3] {
        let j = self.jacobian(y);
        let mut g = [[T::zero(); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut s = T::zero();
                for row in &j {
                    s = s + row[a] * row[b];
                }
                g[a][b] = s;
            }
        }
        g
    }

    /// Closed-form `d g / d y^axis` if the chart carries one.
    pub fn metric_gradient(&self, y: [T; 3], axis: usize) -> Option<[[T; 3]; 3]> {
        self.metric_gradient.as_ref().map(|f| f(y, axis))
    }

    pub fn has_metric_gradient(&self) -> bool {
        self.metric_gradient.is_some()
    }
}

impl<T> core::fmt::Debug for Chart<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Chart").field("name", &self.name).finish()
    }
}

type EvalFn<T> = Arc<dyn Fn([T; 3], T, &mut [T]) + Send + Sync>;
type GradFn<T> = Arc<dyn Fn([T; 3], T, usize, &mut [T]) + Send + Sync>;

/// Closed-form tensor field `(y, t) -> components`, optionally with its
/// closed-form spatial gradient.
///
/// Providers are the analytic route into every pipeline: initial data,
/// drivers, and manufactured solutions all enter as providers, and carrying
/// the exact gradient lets verification separate formula errors from
/// finite-difference errors.
#[derive(Clone)]
pub struct FieldProvider<T> {
    signature: Signature,
    eval: EvalFn<T>,
    gradient: Option<GradFn<T>>,
}

impl<T: Real> FieldProvider<T> {
    /// Provider from an evaluation closure filling `components` at `(y, t)`.
    pub fn new(
        signature: Signature,
        eval: impl Fn([T; 3], T, &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        Self { signature, eval: Arc::new(eval), gradient: None }
    }

    /// Attaches the closed-form gradient: `gradient(y, t, axis, out)` fills
    /// the derivative of every component along `axis`.
    pub fn with_gradient(
        mut self,
        gradient: impl Fn([T; 3], T, usize, &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    /// Spatially constant provider.
    pub fn constant(signature: Signature, values: Vec<T>) -> Result<Self> {
        if values.len() != signature.component_count() {
            return Err(Error::Signature(format!(
                "constant provider got {} values for a rank-{} signature",
                values.len(),
                signature.rank()
            )));
        }
        let vals = values.clone();
        Ok(Self {
            signature,
            eval: Arc::new(move |_, _, out| out.copy_from_slice(&vals)),
            gradient: Some(Arc::new(|_, _, _, out| out.fill(T::zero()))),
        })
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Evaluates the provider at one point.
    pub fn eval(&self, y: [T; 3], t: T, out: &mut [T]) {
        (self.eval)(y, t, out);
    }

    /// Evaluates the closed-form gradient along `axis` at one point; errors
    /// if the provider carries none.
    pub fn eval_gradient(&self, y: [T; 3], t: T, axis: usize, out: &mut [T]) -> Result<()> {
        let gradient = self.gradient.as_ref().ok_or_else(|| {
            Error::InvalidArgument("provider carries no analytic gradient".into())
        })?;
        if axis >= 3 {
            return Err(Error::InvalidArgument(format!("gradient axis {axis} out of range 0..3")));
        }
        gradient(y, t, axis, out);
        Ok(())
    }

    /// Samples the provider on every grid node at time `t`.
    pub fn sample(&self, grid: &Grid<T>, t: T) -> Result<TensorField<T>> {
        let mut out = TensorField::zeros(*grid, self.signature);
        let ncomp = self.signature.component_count();
        let nn = grid.node_count();
        let mut buf = vec![T::zero(); ncomp];
        let dims = grid.dims();
        let mut lin = 0usize;
        for i1 in 0..dims[0] {
            for i2 in 0..dims[1] {
                for i3 in 0..dims[2] {
                    (self.eval)(grid.coords([i1, i2, i3]), t, &mut buf);
                    for (c, &v) in buf.iter().enumerate() {
                        if !v.is_finite() {
                            return Err(Error::NonFiniteSample { node: [i1, i2, i3] });
                        }
                        out.data_mut()[c * nn + lin] = v;
                    }
                    lin += 1;
                }
            }
        }
        Ok(out)
    }

    /// Samples the closed-form gradient along `axis`; errors if the provider
    /// carries none.
    pub fn sample_gradient(&self, grid: &Grid<T>, t: T, axis: usize) -> Result<TensorField<T>> {
        let gradient = self.gradient.as_ref().ok_or_else(|| {
            Error::InvalidArgument("provider carries no analytic gradient".into())
        })?;
        if axis >= 3 {
            return Err(Error::InvalidArgument(format!("gradient axis {axis} out of range 0..3")));
        }
        let mut out = TensorField::zeros(*grid, self.signature);
        let ncomp = self.signature.component_count();
        let nn = grid.node_count();
        let mut buf = vec![T::zero(); ncomp];
        let dims = grid.dims();
        let mut lin = 0usize;
        for i1 in 0..dims[0] {
            for i2 in 0..dims[1] {
                for i3 in 0..dims[2] {
                    gradient(grid.coords([i1, i2, i3]), t, axis, &mut buf);
                    for (c, &v) in buf.iter().enumerate() {
                        if !v.is_finite() {
                            return Err(Error::NonFiniteSample { node: [i1, i2, i3] });
                        }
                        out.data_mut()[c * nn + lin] = v;
                    }
                    lin += 1;
                }
            }
        }
        Ok(out)
    }

    /// Samples the gradients along all three axes stacked into one field of
    /// rank `rank + 1` with the leading (real, lower) derivative slot.
    pub fn sample_gradient_stack(&self, grid: &Grid<T>, t: T) -> Result<TensorField<T>> {
        let parts = [
            self.sample_gradient(grid, t, 0)?,
            self.sample_gradient(grid, t, 1)?,
            self.sample_gradient(grid, t, 2)?,
        ];
        TensorField::stack_leading_lower(&parts)
    }
}

impl<T> core::fmt::Debug for FieldProvider<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("FieldProvider")
            .field("signature", &self.signature)
            .field("has_gradient", &self.gradient.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IndexKind;

    #[test]
    fn grid_rejects_small_axis() {
        let err = Grid::<f64>::new([4, 8, 8], [1.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidGrid(_)), "{err}");
    }

    #[test]
    fn grid_rejects_bad_lengths() {
        assert!(Grid::<f64>::new([8, 8, 8], [0.0, 1.0, 1.0]).is_err());
        assert!(Grid::<f64>::new([8, 8, 8], [1.0, -2.0, 1.0]).is_err());
        assert!(Grid::<f64>::new([8, 8, 8], [1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn grid_spacing_and_indexing() {
        let tau = core::f64::consts::TAU;
        let g = Grid::new([8, 8, 8], [tau, tau, tau]).unwrap();
        assert!((g.spacing()[0] - tau / 8.0).abs() < 1e-15);
        let idx = [3, 1, 7];
        assert_eq!(g.unravel(g.linear(idx)), idx);
        assert_eq!(g.wrap(-1, 0), 7);
        assert_eq!(g.wrap(8, 2), 0);
        let refined = g.refine(2).unwrap();
        assert_eq!(refined.dims(), [16, 16, 16]);
        assert!((refined.spacing()[1] - tau / 16.0).abs() < 1e-15);
        assert!(g.refine(0).is_err());
        assert!(g.refine(1).is_err(), "an identity refinement is not a refinement");
    }

    /// Independent oracle: the derivative of sin is cos; fourth-order error
    /// at n = 64 over a 2-pi box is h^4 |f^(5)| / 30 ~ 3.1e-6.
    #[test]
    fn derivative_of_sine_is_cos_to_fourth_order() {
        let tau = core::f64::consts::TAU;
        for (axis, n) in [(0usize, 64usize), (1, 64), (2, 64)] {
            let mut dims = [8, 8, 8];
            dims[axis] = n;
            let g = Grid::new(dims, [tau, tau, tau]).unwrap();
            let sig = Signature::scalar();
            let provider =
                FieldProvider::new(sig, move |y: [f64; 3], _, out: &mut [f64]| {
                    out[0] = y[axis].sin()
                });
            let f = provider.sample(&g, 0.0).unwrap();
            let df = partial_derivative(&f, axis).unwrap();
            let mut worst = 0.0f64;
            for lin in 0..g.node_count() {
                let y = g.coords(g.unravel(lin));
                worst = worst.max((df.component(0)[lin] - y[axis].cos()).abs());
            }
            assert!(worst < 1e-5, "axis {axis}: sup error {worst:e}");
        }
    }

    /// Self-convergence oracle: halving h must shrink the error ~16x.
    #[test]
    fn derivative_error_scales_at_fourth_order() {
        let tau = core::f64::consts::TAU;
        let sup_err = |n: usize| -> f64 {
            let g = Grid::new([n, 8, 8], [tau, tau, tau]).unwrap();
            let provider =
                FieldProvider::new(Signature::scalar(), |y: [f64; 3], _, out: &mut [f64]| {
                    out[0] = (2.0 * y[0]).sin()
                });
            let f = provider.sample(&g, 0.0).unwrap();
            let df = partial_derivative(&f, 0).unwrap();
            (0..g.node_count())
                .map(|lin| {
                    let y = g.coords(g.unravel(lin));
                    (df.component(0)[lin] - 2.0 * (2.0 * y[0]).cos()).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e0, e1) = (sup_err(32), sup_err(64));
        let order = (e0 / e1).log2();
        assert!((order - 4.0).abs() < 0.2, "observed order {order}");
    }

    #[test]
    fn derivative_rejects_bad_axis() {
        let g = Grid::new([8, 8, 8], [1.0, 1.0, 1.0]).unwrap();
        let f = TensorField::<f64>::zeros(g, Signature::scalar());
        assert!(partial_derivative(&f, 3).is_err());
    }

    #[test]
    fn sample_rejects_non_finite() {
        let g = Grid::new([8, 8, 8], [1.0, 1.0, 1.0]).unwrap();
        let provider = FieldProvider::new(Signature::scalar(), |y, _, out| {
            out[0] = if y[0] == 0.0 && y[1] == 0.0 && y[2] > 0.4 { f64::NAN } else { 1.0 }
        });
        let err = provider.sample(&g, 0.0).unwrap_err();
        match err {
            Error::NonFiniteSample { node } => assert_eq!(node[0], 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn cylindrical_chart_metric_matches_closed_form() {
        let chart = Chart::cylindrical_shell(1.0f64);
        let y = [0.3, 1.1, 0.5];
        let g = chart.metric(y);
        let r = 1.0 + y[0];
        assert!((g[0][0] - 1.0).abs() < 1e-14);
        assert!((g[1][1] - r * r).abs() < 1e-13);
        assert!((g[2][2] - 1.0).abs() < 1e-14);
        for (a, row) in g.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                if a != b {
                    assert!(v.abs() < 1e-14);
                }
            }
        }
        let dg = chart.metric_gradient(y, 0).unwrap();
        assert!((dg[1][1] - 2.0 * r).abs() < 1e-14);
    }

    /// The analytic gradient and the finite-difference gradient must agree
    /// to the stencil's truncation error: h^4 |f^(5)| / 30 ~ 5e-5 at n = 32.
    #[test]
    fn provider_gradient_sampling_matches_closed_form() {
        let tau = core::f64::consts::TAU;
        let g = Grid::new([32, 8, 8], [tau, tau, tau]).unwrap();
        let sig = Signature::new(&[IndexKind::RealUpper]).unwrap();
        let p = FieldProvider::new(sig, |y: [f64; 3], _, out: &mut [f64]| {
            out[0] = y[0].sin();
            out[1] = 0.0;
            out[2] = y[0].cos();
        })
        .with_gradient(|y, _, axis, out| {
            out.fill(0.0);
            if axis == 0 {
                out[0] = y[0].cos();
                out[2] = -y[0].sin();
            }
        });
        let stack = p.sample_gradient_stack(&g, 0.0).unwrap();
        let fd = gradient_stack(&p.sample(&g, 0.0).unwrap()).unwrap();
        let gap = stack.max_abs_diff(&fd).unwrap();
        assert!(gap < 1e-4, "analytic vs FD gradient gap {gap:e}");
    }
}
