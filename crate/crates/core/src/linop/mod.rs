//! Matrix-free linear operators over labeled tensor domains.
//!
//! An operator only knows how to apply itself and its adjoint to a flattened
//! row-major tensor. Everything else here (composition, adjoints, tensor
//! products, partial averages, sums) is built from those two actions, and
//! `materialize` recovers a dense matrix column by column when the dimension
//! is small enough to afford it.

mod shape;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use shape::{Axis, DomainShape};

/// Default guard on the number of columns `materialize` will form.
pub const DEFAULT_MATERIALIZE_CAP: usize = 4096;

/// Forward and adjoint action of a linear map between tensor domains.
///
/// Implementations must be re-entrant: they may be called concurrently and may
/// not carry interior mutable state.
pub trait Operator: Send + Sync {
    fn domain(&self) -> &DomainShape;
    fn codomain(&self) -> &DomainShape;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64>;

    /// True when the operator is positive semidefinite by construction.
    fn psd_hint(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "operator"
    }

    /// A cheaper representation of this operator's adjoint, if one exists.
    fn known_adjoint(&self) -> Option<LinOp> {
        None
    }
}

/// Shared handle to an immutable operator.
#[derive(Clone)]
pub struct LinOp {
    inner: Arc<dyn Operator>,
}

impl fmt::Debug for LinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "LinOp({}: {} -> {}{})",
            self.inner.name(),
            self.domain(),
            self.codomain(),
            if self.psd_hint() { ", psd" } else { "" }
        )
    }
}

impl LinOp {
    pub fn new<O: Operator + 'static>(op: O) -> Self {
        Self { inner: Arc::new(op) }
    }

    pub fn domain(&self) -> &DomainShape {
        self.inner.domain()
    }

    pub fn codomain(&self) -> &DomainShape {
        self.inner.codomain()
    }

    pub fn psd_hint(&self) -> bool {
        self.inner.psd_hint()
    }

    pub fn is_square(&self) -> bool {
        self.domain().dim() == self.codomain().dim()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(
            x.len(),
            self.domain().dim(),
            "apply: input length does not match domain {}",
            self.domain()
        );
        self.inner.apply(x)
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(
            y.len(),
            self.codomain().dim(),
            "apply_adjoint: input length does not match codomain {}",
            self.codomain()
        );
        self.inner.apply_adjoint(y)
    }

    /// `I` on `shape`.
    pub fn identity(shape: DomainShape) -> Self {
        Self::new(Identity { shape })
    }

    /// Wrap a dense matrix acting on flat vectors.
    pub fn dense(m: DMatrix<f64>) -> Result<Self> {
        let domain = DomainShape::flat(m.ncols());
        let codomain = DomainShape::flat(m.nrows());
        Self::dense_shaped(m, domain, codomain, false)
    }

    /// Wrap a dense matrix that the caller asserts is positive semidefinite.
    pub fn dense_psd(m: DMatrix<f64>) -> Result<Self> {
        let domain = DomainShape::flat(m.ncols());
        let codomain = DomainShape::flat(m.nrows());
        Self::dense_shaped(m, domain, codomain, true)
    }

    pub fn dense_shaped(
        m: DMatrix<f64>,
        domain: DomainShape,
        codomain: DomainShape,
        psd: bool,
    ) -> Result<Self> {
        if let Some(index) = m.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if m.ncols() != domain.dim() || m.nrows() != codomain.dim() {
            return Err(Error::InvalidShape(format!(
                "matrix {}x{} does not map {} to {}",
                m.nrows(),
                m.ncols(),
                domain,
                codomain
            )));
        }
        Ok(Self::new(Dense {
            domain,
            codomain,
            psd,
            m,
        }))
    }

    /// Operator defined by a pair of closures.
    pub fn from_fn<F, G>(
        name: &str,
        domain: DomainShape,
        codomain: DomainShape,
        psd: bool,
        forward: F,
        adjoint: G,
    ) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::new(FnOp {
            name: name.to_string(),
            domain,
            codomain,
            psd,
            forward: Box::new(forward),
            adjoint: Box::new(adjoint),
        })
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &LinOp) -> Result<Self> {
        if !inner.codomain().compatible(self.domain()) {
            return Err(Error::ShapeMismatch {
                left: inner.codomain().clone(),
                right: self.domain().clone(),
            });
        }
        Ok(Self::new(Composed {
            outer: self.clone(),
            inner: inner.clone(),
        }))
    }

    /// Compose a chain `ops[0] ∘ ops[1] ∘ ...`.
    pub fn chain(ops: &[&LinOp]) -> Result<Self> {
        let (last, rest) = ops
            .split_last()
            .ok_or_else(|| Error::InvalidArgument("empty operator chain".into()))?;
        let mut acc = (*last).clone();
        for op in rest.iter().rev() {
            acc = op.compose(&acc)?;
        }
        Ok(acc)
    }

    pub fn adjoint(&self) -> Self {
        self.inner
            .known_adjoint()
            .unwrap_or_else(|| Self::new(Adjoint { op: self.clone() }))
    }

    /// Kronecker product `self ⊗ other` acting on the concatenated axes.
    pub fn tensor_product(&self, other: &LinOp) -> Self {
        let domain = self.domain().product(other.domain());
        let codomain = self.codomain().product(other.codomain());
        Self::new(TensorProduct {
            a: self.clone(),
            b: other.clone(),
            domain,
            codomain,
        })
    }

    /// Tensor product reshaped to the domain and codomain of `reference`.
    pub fn tensor_product_like(&self, other: &LinOp, reference: &LinOp) -> Result<Self> {
        self.tensor_product(other)
            .reshape(reference.domain().clone(), reference.codomain().clone())
    }

    /// Relabel domain and codomain without moving data.
    pub fn reshape(&self, domain: DomainShape, codomain: DomainShape) -> Result<Self> {
        if domain.dim() != self.domain().dim() || codomain.dim() != self.codomain().dim() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {} -> {} into {} -> {}",
                self.domain(),
                self.codomain(),
                domain,
                codomain
            )));
        }
        Ok(Self::new(Reshaped {
            op: self.clone(),
            domain,
            codomain,
        }))
    }

    /// Sum of operators on identical shapes.
    pub fn sum(ops: &[LinOp]) -> Result<Self> {
        let first = ops
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty operator sum".into()))?;
        for op in &ops[1..] {
            if !op.domain().compatible(first.domain()) {
                return Err(Error::ShapeMismatch {
                    left: op.domain().clone(),
                    right: first.domain().clone(),
                });
            }
            if !op.codomain().compatible(first.codomain()) {
                return Err(Error::ShapeMismatch {
                    left: op.codomain().clone(),
                    right: first.codomain().clone(),
                });
            }
        }
        Ok(Self::new(Sum { ops: ops.to_vec() }))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(Scaled {
            op: self.clone(),
            c,
        })
    }

    /// Block-diagonal operator on the flat concatenation of the blocks' domains.
    pub fn direct_sum(ops: &[LinOp]) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::InvalidArgument("empty direct sum".into()));
        }
        let din: usize = ops.iter().map(|o| o.domain().dim()).sum();
        let dout: usize = ops.iter().map(|o| o.codomain().dim()).sum();
        Ok(Self::new(DirectSum {
            ops: ops.to_vec(),
            domain: DomainShape::flat(din),
            codomain: DomainShape::flat(dout),
        }))
    }

    /// Mark the operator as positive semidefinite (e.g. `P K P*`).
    pub fn with_psd_hint(&self) -> Self {
        Self::new(PsdMarked { op: self.clone() })
    }

    /// Average over the given axes of a square operator.
    ///
    /// For the remaining axes `r` and traced axes `s`, the reduced operator
    /// is `x ↦ (1/|s|) Σ_j [op(x ⊗ e_j)]_j`: inputs are expanded along each
    /// basis direction of the traced axes, pushed through the operator, and
    /// the matching slice of the output is averaged. The result is the
    /// partial trace divided by the traced extent.
    pub fn partial_average(&self, axes: &[usize]) -> Result<Self> {
        if self.domain() != self.codomain() {
            return Err(Error::NotSquare {
                domain: self.domain().clone(),
                codomain: self.codomain().clone(),
            });
        }
        let shape = self.domain().clone();
        let mut traced: Vec<usize> = axes.to_vec();
        traced.sort_unstable();
        traced.dedup();
        if let Some(&bad) = traced.iter().find(|&&a| a >= shape.rank()) {
            return Err(Error::InvalidArgument(format!(
                "axis {bad} out of range for {shape}"
            )));
        }
        let reduced = shape.without(&traced);
        let extents = shape.extents();
        let traced_count: usize = traced.iter().map(|&a| extents[a]).product();
        let reduced_dim = reduced.dim();
        // slots[j][r] = flat index with traced coordinates = j and kept coordinates = r
        let mut slots = vec![vec![0usize; reduced_dim]; traced_count];
        let mut coords = vec![0usize; extents.len()];
        for flat in 0..shape.dim() {
            let (mut r, mut j) = (0usize, 0usize);
            for (ax, &c) in coords.iter().enumerate() {
                if traced.contains(&ax) {
                    j = j * extents[ax] + c;
                } else {
                    r = r * extents[ax] + c;
                }
            }
            slots[j][r] = flat;
            for ax in (0..extents.len()).rev() {
                coords[ax] += 1;
                if coords[ax] < extents[ax] {
                    break;
                }
                coords[ax] = 0;
            }
        }
        Ok(Self::new(PartialAverage {
            op: self.clone(),
            reduced,
            slots,
        }))
    }

    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        self.materialize_with_cap(DEFAULT_MATERIALIZE_CAP)
    }

    /// Dense matrix with column `j = apply(e_j)`.
    pub fn materialize_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let (n_in, n_out) = (self.domain().dim(), self.codomain().dim());
        let dim = n_in.max(n_out);
        if dim > cap {
            return Err(Error::MaterializeCap { dim, cap });
        }
        let mut m = DMatrix::zeros(n_out, n_in);
        let mut e = vec![0.0; n_in];
        for j in 0..n_in {
            e[j] = 1.0;
            let col = self.apply(&e);
            m.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        Ok(m)
    }
}

struct Identity {
    shape: DomainShape,
}

impl Operator for Identity {
    fn domain(&self) -> &DomainShape {
        &self.shape
    }
    fn codomain(&self) -> &DomainShape {
        &self.shape
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }
    fn psd_hint(&self) -> bool {
        true
    }
    fn name(&self) -> &str {
        "identity"
    }
    fn known_adjoint(&self) -> Option<LinOp> {
        Some(LinOp::identity(self.shape.clone()))
    }
}

struct Dense {
    domain: DomainShape,
    codomain: DomainShape,
    psd: bool,
    m: DMatrix<f64>,
}

impl Operator for Dense {
    fn domain(&self) -> &DomainShape {
        &self.domain
    }
    fn codomain(&self) -> &DomainShape {
        &self.codomain
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVectorView::from_slice(x, x.len());
        (&self.m * v).as_slice().to_vec()
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVectorView::from_slice(y, y.len());
        self.m.tr_mul(&v).as_slice().to_vec()
    }
    fn psd_hint(&self) -> bool {
        self.psd
    }
    fn name(&self) -> &str {
        "dense"
    }
}

type VecFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

struct FnOp {
    name: String,
    domain: DomainShape,
    codomain: DomainShape,
    psd: bool,
    forward: VecFn,
    adjoint: VecFn,
}

impl Operator for FnOp {
    fn domain(&self) -> &DomainShape {
        &self.domain
    }
    fn codomain(&self) -> &DomainShape {
        &self.codomain
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.forward)(x)
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        (self.adjoint)(y)
    }
    fn psd_hint(&self) -> bool {
        self.psd
    }
    fn name(&self) -> &str {
        &self.name
    }
}

struct Composed {
    outer: LinOp,
    inner: LinOp,
}

impl Operator for Composed {
    fn domain(&self) -> &DomainShape {
        self.inner.domain()
    }
    fn codomain(&self) -> &DomainShape {
        self.outer.codomain()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.outer.apply(&self.inner.apply(x))
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.inner.apply_adjoint(&self.outer.apply_adjoint(y))
    }
    fn name(&self) -> &str {
        "compose"
    }
}

struct Adjoint {
    op: LinOp,
}

impl Operator for Adjoint {
    fn domain(&self) -> &DomainShape {
        self.op.codomain()
    }
    fn codomain(&self) -> &DomainShape {
        self.op.domain()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.op.apply_adjoint(x)
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.op.apply(y)
    }
    fn psd_hint(&self) -> bool {
        self.op.psd_hint()
    }
    fn name(&self) -> &str {
        "adjoint"
    }
    fn known_adjoint(&self) -> Option<LinOp> {
        Some(self.op.clone())
    }
}

struct TensorProduct {
    a: LinOp,
    b: LinOp,
    domain: DomainShape,
    codomain: DomainShape,
}

impl TensorProduct {
    /// `Y = A X Bᵀ` for row-major `X`, with `fa`/`fb` the factor actions.
    fn act(
        x: &[f64],
        (a_in, a_out): (usize, usize),
        (b_in, b_out): (usize, usize),
        fa: impl Fn(&[f64]) -> Vec<f64>,
        fb: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let mut z = vec![0.0; a_in * b_out];
        for i in 0..a_in {
            let row = fb(&x[i * b_in..(i + 1) * b_in]);
            z[i * b_out..(i + 1) * b_out].copy_from_slice(&row);
        }
        let mut y = vec![0.0; a_out * b_out];
        let mut col = vec![0.0; a_in];
        for l in 0..b_out {
            for i in 0..a_in {
                col[i] = z[i * b_out + l];
            }
            let out = fa(&col);
            for (i, v) in out.into_iter().enumerate() {
                y[i * b_out + l] = v;
            }
        }
        y
    }
}

impl Operator for TensorProduct {
    fn domain(&self) -> &DomainShape {
        &self.domain
    }
    fn codomain(&self) -> &DomainShape {
        &self.codomain
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        Self::act(
            x,
            (self.a.domain().dim(), self.a.codomain().dim()),
            (self.b.domain().dim(), self.b.codomain().dim()),
            |v| self.a.apply(v),
            |v| self.b.apply(v),
        )
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        Self::act(
            y,
            (self.a.codomain().dim(), self.a.domain().dim()),
            (self.b.codomain().dim(), self.b.domain().dim()),
            |v| self.a.apply_adjoint(v),
            |v| self.b.apply_adjoint(v),
        )
    }
    fn psd_hint(&self) -> bool {
        self.a.psd_hint() && self.b.psd_hint()
    }
    fn name(&self) -> &str {
        "tensor_product"
    }
}

struct Reshaped {
    op: LinOp,
    domain: DomainShape,
    codomain: DomainShape,
}

impl Operator for Reshaped {
    fn domain(&self) -> &DomainShape {
        &self.domain
    }
    fn codomain(&self) -> &DomainShape {
        &self.codomain
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.op.apply(x)
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.op.apply_adjoint(y)
    }
    fn psd_hint(&self) -> bool {
        self.op.psd_hint()
    }
    fn name(&self) -> &str {
        "reshape"
    }
}

struct Sum {
    ops: Vec<LinOp>,
}

impl Operator for Sum {
    fn domain(&self) -> &DomainShape {
        self.ops[0].domain()
    }
    fn codomain(&self) -> &DomainShape {
        self.ops[0].codomain()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = self.ops[0].apply(x);
        for op in &self.ops[1..] {
            crate::numerics::axpy(1.0, &op.apply(x), &mut acc);
        }
        acc
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut acc = self.ops[0].apply_adjoint(y);
        for op in &self.ops[1..] {
            crate::numerics::axpy(1.0, &op.apply_adjoint(y), &mut acc);
        }
        acc
    }
    fn psd_hint(&self) -> bool {
        self.ops.iter().all(|o| o.psd_hint())
    }
    fn name(&self) -> &str {
        "sum"
    }
}

struct Scaled {
    op: LinOp,
    c: f64,
}

impl Operator for Scaled {
    fn domain(&self) -> &DomainShape {
        self.op.domain()
    }
    fn codomain(&self) -> &DomainShape {
        self.op.codomain()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.op.apply(x);
        y.iter_mut().for_each(|v| *v *= self.c);
        y
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.op.apply_adjoint(y);
        x.iter_mut().for_each(|v| *v *= self.c);
        x
    }
    fn psd_hint(&self) -> bool {
        self.op.psd_hint() && self.c >= 0.0
    }
    fn name(&self) -> &str {
        "scale"
    }
}

struct DirectSum {
    ops: Vec<LinOp>,
    domain: DomainShape,
    codomain: DomainShape,
}

impl Operator for DirectSum {
    fn domain(&self) -> &DomainShape {
        &self.domain
    }
    fn codomain(&self) -> &DomainShape {
        &self.codomain
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.codomain.dim());
        let mut off = 0;
        for op in &self.ops {
            let n = op.domain().dim();
            out.extend(op.apply(&x[off..off + n]));
            off += n;
        }
        out
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.domain.dim());
        let mut off = 0;
        for op in &self.ops {
            let n = op.codomain().dim();
            out.extend(op.apply_adjoint(&y[off..off + n]));
            off += n;
        }
        out
    }
    fn psd_hint(&self) -> bool {
        self.ops.iter().all(|o| o.psd_hint())
    }
    fn name(&self) -> &str {
        "direct_sum"
    }
}

struct PsdMarked {
    op: LinOp,
}

impl Operator for PsdMarked {
    fn domain(&self) -> &DomainShape {
        self.op.domain()
    }
    fn codomain(&self) -> &DomainShape {
        self.op.codomain()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.op.apply(x)
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.op.apply_adjoint(y)
    }
    fn psd_hint(&self) -> bool {
        true
    }
    fn name(&self) -> &str {
        "psd"
    }
}

struct PartialAverage {
    op: LinOp,
    reduced: DomainShape,
    slots: Vec<Vec<usize>>,
}

impl PartialAverage {
    fn act(&self, x: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let full = self.op.domain().dim();
        let mut out = vec![0.0; self.reduced.dim()];
        let mut embedded = vec![0.0; full];
        for slot in &self.slots {
            for (r, &flat) in slot.iter().enumerate() {
                embedded[flat] = x[r];
            }
            let y = f(&embedded);
            for (r, &flat) in slot.iter().enumerate() {
                out[r] += y[flat];
                embedded[flat] = 0.0;
            }
        }
        let scale = 1.0 / self.slots.len() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }
}

impl Operator for PartialAverage {
    fn domain(&self) -> &DomainShape {
        &self.reduced
    }
    fn codomain(&self) -> &DomainShape {
        &self.reduced
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.act(x, |v| self.op.apply(v))
    }
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.act(y, |v| self.op.apply_adjoint(v))
    }
    fn psd_hint(&self) -> bool {
        self.op.psd_hint()
    }
    fn name(&self) -> &str {
        "partial_average"
    }
}

