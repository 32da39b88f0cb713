//! Tensor fields over the periodic grid.
//!
//! A [`TensorField`] is a rank-0..4 array of components per node. Each slot
//! of the index signature is tagged with the space it lives in (real space
//! or Burgers space) and its variance (upper or lower), which lets the
//! algebra operations reject ill-formed contractions at run time -- the
//! double-space bookkeeping is exactly where hand-written dislocation codes
//! tend to go wrong.
//!
//! Storage is row-major over components, then nodes: component `c` occupies
//! the contiguous slab `data[c * nodes .. (c + 1) * nodes]`, which keeps
//! finite-difference sweeps on cache-friendly unit strides.

use crate::error::{Error, Result};
use crate::grid::{Chart, Grid};
use crate::scalar::Real;

/// Space and variance of one index slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum IndexKind {
    RealUpper = 0,
    RealLower = 1,
    BurgersUpper = 2,
    BurgersLower = 3,
}

impl IndexKind {
    /// Same space, opposite variance.
    pub fn dual(self) -> Self {
        match self {
            IndexKind::RealUpper => IndexKind::RealLower,
            IndexKind::RealLower => IndexKind::RealUpper,
            IndexKind::BurgersUpper => IndexKind::BurgersLower,
            IndexKind::BurgersLower => IndexKind::BurgersUpper,
        }
    }

    pub fn is_real(self) -> bool {
        matches!(self, IndexKind::RealUpper | IndexKind::RealLower)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, IndexKind::RealUpper | IndexKind::BurgersUpper)
    }

    /// Stable byte tag used by the raw dump format.
    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(byte: u8) -> Result<Self> {
        Ok(match byte {
            0 => IndexKind::RealUpper,
            1 => IndexKind::RealLower,
            2 => IndexKind::BurgersUpper,
            3 => IndexKind::BurgersLower,
            other => {
                return Err(Error::Signature(format!("unknown index-kind byte {other}")));
            }
        })
    }
}

/// Ordered list of up to four index slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    rank: u8,
    kinds: [IndexKind; 4],
}

impl Signature {
    pub const MAX_RANK: usize = 4;

    pub fn new(kinds: &[IndexKind]) -> Result<Self> {
        if kinds.len() > Self::MAX_RANK {
            return Err(Error::Signature(format!(
                "rank {} exceeds the supported maximum {}",
                kinds.len(),
                Self::MAX_RANK
            )));
        }
        let mut arr = [IndexKind::RealUpper; 4];
        arr[..kinds.len()].copy_from_slice(kinds);
        Ok(Self { rank: kinds.len() as u8, kinds: arr })
    }

    /// Rank-0 (one value per node).
    pub fn scalar() -> Self {
        Self { rank: 0, kinds: [IndexKind::RealUpper; 4] }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn kinds(&self) -> &[IndexKind] {
        &self.kinds[..self.rank as usize]
    }

    pub fn kind(&self, slot: usize) -> IndexKind {
        self.kinds[slot]
    }

    /// Number of scalar components per node: `3^rank`.
    pub fn component_count(&self) -> usize {
        3usize.pow(self.rank as u32)
    }

    /// New signature with `kind` prepended (used by derivative operators).
    pub fn prepend(&self, kind: IndexKind) -> Result<Self> {
        let mut kinds = Vec::with_capacity(self.rank() + 1);
        kinds.push(kind);
        kinds.extend_from_slice(self.kinds());
        Self::new(&kinds)
    }

    /// Flattens a multi-index (slot 0 slowest) into a component number.
    pub fn flatten(&self, indices: &[usize]) -> usize {
        debug_assert_eq!(indices.len(), self.rank());
        indices.iter().fold(0, |acc, &i| {
            debug_assert!(i < 3);
            acc * 3 + i
        })
    }

    /// Inverse of [`Signature::flatten`].
    pub fn unflatten(&self, mut comp: usize) -> [usize; 4] {
        let rank = self.rank();
        let mut out = [0usize; 4];
        for slot in (0..rank).rev() {
            out[slot] = comp % 3;
            comp /= 3;
        }
        out
    }
}

/// Helper for common signatures.
pub mod sig {
    use super::{IndexKind, Signature};
    use IndexKind::*;

    /// Rank-2 real metric-like signature `(lower, lower)`.
    pub fn real_ll() -> Signature {
        Signature::new(&[RealLower, RealLower]).unwrap()
    }

    /// Rank-2 real `(upper, upper)`.
    pub fn real_uu() -> Signature {
        Signature::new(&[RealUpper, RealUpper]).unwrap()
    }

    /// Rank-2 real `(upper, lower)`, e.g. Burgers density or flow drivers.
    pub fn real_ul() -> Signature {
        Signature::new(&[RealUpper, RealLower]).unwrap()
    }

    /// Real vector.
    pub fn real_u() -> Signature {
        Signature::new(&[RealUpper]).unwrap()
    }

    /// Connection coefficients `(upper, lower, lower)`; slot 1 is the
    /// derivative direction.
    pub fn conn() -> Signature {
        Signature::new(&[RealUpper, RealLower, RealLower]).unwrap()
    }

    /// Metric gradient / deformation gradient `(lower, lower, lower)`;
    /// slot 0 is the derivative direction.
    pub fn real_lll() -> Signature {
        Signature::new(&[RealLower, RealLower, RealLower]).unwrap()
    }

    /// Curvature `(upper, lower, lower, lower)`.
    pub fn curv() -> Signature {
        Signature::new(&[RealUpper, RealLower, RealLower, RealLower]).unwrap()
    }

    /// Distortion `(burgers upper, real lower)`.
    pub fn distortion() -> Signature {
        Signature::new(&[BurgersUpper, RealLower]).unwrap()
    }
}

/// Rank-0..4 tensor field sampled on a periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField<T> {
    grid: Grid<T>,
    signature: Signature,
    data: Vec<T>,
}

impl<T: Real> TensorField<T> {
    pub fn zeros(grid: Grid<T>, signature: Signature) -> Self {
        let len = signature.component_count() * grid.node_count();
        Self { grid, signature, data: vec![T::zero(); len] }
    }

    /// Rank-2 identity (Kronecker delta at every node) with the given
    /// two-slot signature.
    pub fn identity(grid: Grid<T>, signature: Signature) -> Result<Self> {
        if signature.rank() != 2 {
            return Err(Error::Signature("identity field needs a rank-2 signature".into()));
        }
        let mut out = Self::zeros(grid, signature);
        let nn = grid.node_count();
        for d in 0..3 {
            let comp = signature.flatten(&[d, d]);
            out.data[comp * nn..(comp + 1) * nn].fill(T::one());
        }
        Ok(out)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Contiguous slab of one component.
    #[inline]
    pub fn component(&self, comp: usize) -> &[T] {
        let nn = self.grid.node_count();
        &self.data[comp * nn..(comp + 1) * nn]
    }

    #[inline]
    pub fn component_mut(&mut self, comp: usize) -> &mut [T] {
        let nn = self.grid.node_count();
        &mut self.data[comp * nn..(comp + 1) * nn]
    }

    /// Single value lookup by multi-index; convenience for tests and
    /// reporting, not for hot loops.
    pub fn value(&self, indices: &[usize], node: [usize; 3]) -> T {
        let comp = self.signature.flatten(indices);
        self.component(comp)[self.grid.linear(node)]
    }

    pub fn set_value(&mut self, indices: &[usize], node: [usize; 3], value: T) {
        let comp = self.signature.flatten(indices);
        let lin = self.grid.linear(node);
        self.component_mut(comp)[lin] = value;
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.signature != other.signature {
            return Err(Error::Signature(format!(
                "{op}: signatures differ ({:?} vs {:?})",
                self.signature.kinds(),
                other.signature.kinds()
            )));
        }
        if self.grid != other.grid {
            return Err(Error::InvalidArgument(format!("{op}: fields live on different grids")));
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o = *o + b;
        }
        Ok(out)
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o = *o - b;
        }
        Ok(out)
    }

    /// In-place `self += factor * other` (the RK4 combiner).
    pub fn add_scaled(&mut self, other: &Self, factor: T) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (o, &b) in self.data.iter_mut().zip(&other.data) {
            *o = *o + factor * b;
        }
        Ok(())
    }

    /// Elementwise scaling.
    pub fn scale(&self, factor: T) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = *v * factor;
        }
        out
    }

    /// Slot permutation: output slot `i` carries what input slot `perm[i]`
    /// carried, for both the signature and the component values.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.signature.rank();
        if perm.len() != rank {
            return Err(Error::InvalidArgument(format!(
                "permutation has length {}, field has rank {rank}",
                perm.len()
            )));
        }
        let mut seen = [false; 4];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::InvalidArgument(format!(
                    "{perm:?} is not a permutation of 0..{rank}"
                )));
            }
            seen[p] = true;
        }
        let kinds: Vec<IndexKind> = perm.iter().map(|&p| self.signature.kind(p)).collect();
        let out_sig = Signature::new(&kinds)?;
        let mut out = Self::zeros(self.grid, out_sig);
        let nn = self.grid.node_count();
        for in_comp in 0..self.signature.component_count() {
            let digits = self.signature.unflatten(in_comp);
            let mut out_digits = [0usize; 4];
            for (i, &p) in perm.iter().enumerate() {
                out_digits[i] = digits[p];
            }
            let out_comp = out_sig.flatten(&out_digits[..rank]);
            let src = self.component(in_comp).to_vec();
            out.data[out_comp * nn..(out_comp + 1) * nn].copy_from_slice(&src);
        }
        Ok(out)
    }

    /// Largest absolute component value over all nodes.
    pub fn sup_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Sup-norm of the difference of two same-shaped fields.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Stacks three same-shaped fields (one per derivative axis) into a
    /// field of rank + 1 with a new leading (real, lower) slot.
    pub fn stack_leading_lower(parts: &[Self; 3]) -> Result<Self> {
        parts[0].check_same_shape(&parts[1], "stack")?;
        parts[0].check_same_shape(&parts[2], "stack")?;
        let sig = parts[0].signature.prepend(IndexKind::RealLower)?;
        let nn = parts[0].grid.node_count();
        let inner = parts[0].signature.component_count();
        let mut out = Self::zeros(parts[0].grid, sig);
        for (axis, part) in parts.iter().enumerate() {
            let dst_base = axis * inner;
            for comp in 0..inner {
                let dst = dst_base + comp;
                out.data[dst * nn..(dst + 1) * nn].copy_from_slice(part.component(comp));
            }
        }
        Ok(out)
    }

    /// Checks that every entry is finite; reports the first offending node.
    pub fn ensure_finite(&self, time: T) -> Result<()> {
        for comp in 0..self.signature.component_count() {
            for (lin, &v) in self.component(comp).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteState {
                        node: self.grid.unravel(lin),
                        time: time.as_f64(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// General pairwise contraction of two tensor fields.
///
/// `pairs` lists `(slot_of_a, slot_of_b)` index pairs to sum over; every
/// pair must join an upper slot to a lower slot of the same space. The
/// result keeps a's unpaired slots (in order) followed by b's.
pub fn contract<T: Real>(
    a: &TensorField<T>,
    b: &TensorField<T>,
    pairs: &[(usize, usize)],
) -> Result<TensorField<T>> {
    if a.grid() != b.grid() {
        return Err(Error::InvalidArgument("contract: fields live on different grids".into()));
    }
    let (ra, rb) = (a.signature().rank(), b.signature().rank());
    let mut a_used = [false; 4];
    let mut b_used = [false; 4];
    for &(sa, sb) in pairs {
        if sa >= ra || sb >= rb {
            return Err(Error::InvalidArgument(format!(
                "contract: pair ({sa},{sb}) out of range for ranks ({ra},{rb})"
            )));
        }
        if a_used[sa] || b_used[sb] {
            return Err(Error::InvalidArgument("contract: a slot is paired twice".into()));
        }
        a_used[sa] = true;
        b_used[sb] = true;
        let (ka, kb) = (a.signature().kind(sa), b.signature().kind(sb));
        if ka.dual() != kb {
            return Err(Error::Signature(format!(
                "contract: slots ({sa},{sb}) have kinds {ka:?} and {kb:?}, need dual kinds"
            )));
        }
    }
    let out_rank = ra + rb - 2 * pairs.len();
    if out_rank > Signature::MAX_RANK {
        return Err(Error::Signature(format!(
            "contract: result rank {out_rank} exceeds the supported maximum"
        )));
    }

    let a_free: Vec<usize> = (0..ra).filter(|&s| !a_used[s]).collect();
    let b_free: Vec<usize> = (0..rb).filter(|&s| !b_used[s]).collect();
    let mut kinds = Vec::with_capacity(out_rank);
    kinds.extend(a_free.iter().map(|&s| a.signature().kind(s)));
    kinds.extend(b_free.iter().map(|&s| b.signature().kind(s)));
    let out_sig = Signature::new(&kinds)?;

    // Precompute, for every output component, the list of (a component,
    // b component) products to accumulate.
    let n_sum = 3usize.pow(pairs.len() as u32);
    let out_comps = out_sig.component_count();
    let mut table = Vec::with_capacity(out_comps * n_sum);
    for oc in 0..out_comps {
        let od = out_sig.unflatten(oc);
        for m in 0..n_sum {
            let mut a_digits = [0usize; 4];
            let mut b_digits = [0usize; 4];
            for (pos, &slot) in a_free.iter().enumerate() {
                a_digits[slot] = od[pos];
            }
            for (pos, &slot) in b_free.iter().enumerate() {
                b_digits[slot] = od[a_free.len() + pos];
            }
            let mut rem = m;
            for &(sa, sb) in pairs.iter().rev() {
                a_digits[sa] = rem % 3;
                b_digits[sb] = rem % 3;
                rem /= 3;
            }
            table.push((
                a.signature().flatten(&a_digits[..ra]),
                b.signature().flatten(&b_digits[..rb]),
            ));
        }
    }

    let nn = a.grid().node_count();
    let mut out = TensorField::zeros(*a.grid(), out_sig);
    for oc in 0..out_comps {
        let dst = out.component_mut(oc);
        for &(ac, bc) in &table[oc * n_sum..(oc + 1) * n_sum] {
            let av = a.component(ac);
            let bv = b.component(bc);
            for lin in 0..nn {
                dst[lin] = dst[lin] + av[lin] * bv[lin];
            }
        }
    }
    Ok(out)
}

/// 3x3 determinant.
#[inline]
pub fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Closed-form (adjugate) 3x3 inverse. Returns the determinant alongside;
/// the caller decides whether the determinant is acceptable.
#[inline]
pub fn invert3x3<T: Real>(m: &[[T; 3]; 3]) -> (T, [[T; 3]; 3]) {
    let det = det3(m);
    let inv_det = if det == T::zero() { T::zero() } else { T::one() / det };
    let mut inv = [[T::zero(); 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    (det, inv)
}

/// Reads a rank-2 field's 3x3 matrix at one node.
#[inline]
pub fn matrix_at<T: Real>(field: &TensorField<T>, lin: usize) -> [[T; 3]; 3] {
    debug_assert_eq!(field.signature().rank(), 2);
    let nn = field.grid().node_count();
    let d = field.data();
    let mut m = [[T::zero(); 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = d[(r * 3 + c) * nn + lin];
        }
    }
    m
}

/// Writes a 3x3 matrix into a rank-2 field at one node.
#[inline]
pub fn set_matrix_at<T: Real>(field: &mut TensorField<T>, lin: usize, m: &[[T; 3]; 3]) {
    debug_assert_eq!(field.signature().rank(), 2);
    let nn = field.grid().node_count();
    let d = field.data_mut();
    for (r, row) in m.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            d[(r * 3 + c) * nn + lin] = v;
        }
    }
}

/// Relative tolerance used by the pointwise inverses: a matrix is declared
/// singular when `|det| < 1e-12 * scale^3` with `scale` its largest entry.
pub const SINGULARITY_REL_TOL: f64 = 1e-12;

/// Pointwise 3x3 inversion of a rank-2 field.
///
/// The output signature is `(dual of slot 1, dual of slot 0)`, so that the
/// natural contraction with the input yields Kronecker deltas in both
/// orders: for a distortion `(burgers-upper, real-lower)` the inverse is
/// `(real-upper, burgers-lower)`.
pub fn invert3<T: Real>(field: &TensorField<T>) -> Result<TensorField<T>> {
    if field.signature().rank() != 2 {
        return Err(Error::Signature("invert3 needs a rank-2 field".into()));
    }
    let out_sig = Signature::new(&[
        field.signature().kind(1).dual(),
        field.signature().kind(0).dual(),
    ])?;
    let grid = *field.grid();
    let nn = grid.node_count();
    let mut out = TensorField::zeros(grid, out_sig);
    let rel = T::of(SINGULARITY_REL_TOL);
    for lin in 0..nn {
        let m = matrix_at(field, lin);
        let mut scale = T::zero();
        for row in &m {
            for &v in row {
                scale = scale.max(v.abs());
            }
        }
        let (det, inv) = invert3x3(&m);
        if scale == T::zero() || det.abs() < rel * scale * scale * scale {
            return Err(Error::SingularMatrix {
                node: grid.unravel(lin),
                det: det.as_f64(),
                scale: scale.as_f64(),
            });
        }
        set_matrix_at(&mut out, lin, &inv);
    }
    Ok(out)
}

/// Chart metric with its pointwise inverse, determinant, and (optionally)
/// closed-form first derivatives.
#[derive(Clone, Debug)]
pub struct Metric<T> {
    /// `g_ab`, signature (lower, lower).
    pub g: TensorField<T>,
    /// `g^ab`, signature (upper, upper).
    pub inverse: TensorField<T>,
    /// `det g`, rank-0.
    pub det: TensorField<T>,
    /// `d_p g_ab` with the derivative slot leading, when available
    /// analytically.
    pub gradient: Option<TensorField<T>>,
}

impl<T: Real> Metric<T> {
    /// Samples the pull-back metric of `chart` on `grid`, validating that
    /// the chart stays non-degenerate and the metric positive definite.
    pub fn from_chart(chart: &Chart<T>, grid: &Grid<T>) -> Result<Self> {
        let dims = grid.dims();
        let nn = grid.node_count();
        let mut g = TensorField::zeros(*grid, sig::real_ll());
        let mut lin = 0usize;
        for i1 in 0..dims[0] {
            for i2 in 0..dims[1] {
                for i3 in 0..dims[2] {
                    let y = grid.coords([i1, i2, i3]);
                    let jac = chart.jacobian(y);
                    let jdet = det3(&jac);
                    if !jdet.is_finite() || jdet.abs() < T::of(SINGULARITY_REL_TOL) {
                        return Err(Error::DegenerateChart {
                            node: [i1, i2, i3],
                            det: jdet.as_f64(),
                        });
                    }
                    let m = chart.metric(y);
                    for r in 0..3 {
                        for c in 0..3 {
                            g.data_mut()[(r * 3 + c) * nn + lin] = m[r][c];
                        }
                    }
                    lin += 1;
                }
            }
        }
        let gradient = if chart.has_metric_gradient() {
            let mut grad = TensorField::zeros(*grid, sig::real_lll());
            for axis in 0..3 {
                let mut lin = 0usize;
                for i1 in 0..dims[0] {
                    for i2 in 0..dims[1] {
                        for i3 in 0..dims[2] {
                            let y = grid.coords([i1, i2, i3]);
                            let dm = chart.metric_gradient(y, axis).expect("checked above");
                            for r in 0..3 {
                                for c in 0..3 {
                                    grad.data_mut()[((axis * 3 + r) * 3 + c) * nn + lin] =
                                        dm[r][c];
                                }
                            }
                            lin += 1;
                        }
                    }
                }
            }
            Some(grad)
        } else {
            None
        };
        Self::from_field(g, gradient)
    }

    /// Wraps an explicitly sampled metric field, validating symmetry and
    /// positive definiteness and building the inverse and determinant.
    pub fn from_field(g: TensorField<T>, gradient: Option<TensorField<T>>) -> Result<Self> {
        if g.signature() != sig::real_ll() {
            return Err(Error::Signature("metric must have signature (lower, lower)".into()));
        }
        if let Some(grad) = &gradient {
            if grad.signature() != sig::real_lll() {
                return Err(Error::Signature(
                    "metric gradient must have signature (lower, lower, lower)".into(),
                ));
            }
        }
        let grid = *g.grid();
        let nn = grid.node_count();
        let mut inverse = TensorField::zeros(grid, sig::real_uu());
        let mut det = TensorField::zeros(grid, Signature::scalar());
        for lin in 0..nn {
            let m = matrix_at(&g, lin);
            if !is_spd(&m) {
                return Err(Error::IndefiniteMetric { node: grid.unravel(lin) });
            }
            let (d, inv) = invert3x3(&m);
            set_matrix_at(&mut inverse, lin, &inv);
            det.component_mut(0)[lin] = d;
        }
        Ok(Self { g, inverse, det, gradient })
    }
}

/// Sylvester criterion for a symmetric 3x3 matrix (symmetry checked too).
pub fn is_spd<T: Real>(m: &[[T; 3]; 3]) -> bool {
    let mut scale = T::zero();
    for row in m {
        for &v in row {
            if !v.is_finite() {
                return false;
            }
            scale = scale.max(v.abs());
        }
    }
    let tol = T::of(1e-9) * scale.max(T::one());
    if (m[0][1] - m[1][0]).abs() > tol
        || (m[0][2] - m[2][0]).abs() > tol
        || (m[1][2] - m[2][1]).abs() > tol
    {
        return false;
    }
    let minor1 = m[0][0];
    let minor2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let minor3 = det3(m);
    minor1 > T::zero() && minor2 > T::zero() && minor3 > T::zero()
}

/// Even (+1) and odd (-1) permutations of (0, 1, 2).
pub const LEVI_CIVITA: [([usize; 3], f64); 6] = [
    ([0, 1, 2], 1.0),
    ([1, 2, 0], 1.0),
    ([2, 0, 1], 1.0),
    ([0, 2, 1], -1.0),
    ([2, 1, 0], -1.0),
    ([1, 0, 2], -1.0),
];

/// Metric volume tensor in both variances:
/// `w_ijk = sqrt(det g) eps_ijk` and `w^ijk = eps_ijk / sqrt(det g)`,
/// with the right-handed orientation `w_123 > 0`.
#[derive(Clone, Debug)]
pub struct VolumeTensor<T> {
    /// Signature (lower, lower, lower).
    pub lower: TensorField<T>,
    /// Signature (upper, upper, upper).
    pub upper: TensorField<T>,
}

/// Builds the volume tensor from a validated metric.
pub fn volume_tensor<T: Real>(metric: &Metric<T>) -> VolumeTensor<T> {
    let grid = *metric.g.grid();
    let nn = grid.node_count();
    let lower_sig = Signature::new(&[
        IndexKind::RealLower,
        IndexKind::RealLower,
        IndexKind::RealLower,
    ])
    .unwrap();
    let upper_sig = Signature::new(&[
        IndexKind::RealUpper,
        IndexKind::RealUpper,
        IndexKind::RealUpper,
    ])
    .unwrap();
    let mut lower = TensorField::zeros(grid, lower_sig);
    let mut upper = TensorField::zeros(grid, upper_sig);
    for lin in 0..nn {
        // Positive definiteness was enforced when the metric was built.
        let s = metric.det.component(0)[lin].sqrt();
        for &(perm, sign) in &LEVI_CIVITA {
            let comp = (perm[0] * 3 + perm[1]) * 3 + perm[2];
            lower.data_mut()[comp * nn + lin] = T::of(sign) * s;
            upper.data_mut()[comp * nn + lin] = T::of(sign) / s;
        }
    }
    VolumeTensor { lower, upper }
}
