//! Global-state NTK operators: propagator, parameter kernel, Kronecker core
//! and their compositions, plus reduced views and alignment diagnostics.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linop::{DomainShape, LinOp, DEFAULT_MATERIALIZE_CAP};
use crate::models::{AttnTrace, ParamSet, Recurrent, SiteFamily, WeightSites};
use crate::numerics::{dot, numerical_rank, sym_eig_desc};
use crate::rnla::{frobenius_norm, ProbeConfig};
use crate::tensor::Tensor3;

/// Relative singular-value cutoff for numerical ranks.
pub const RANK_REL_TOL: f64 = 1e-8;

fn state_shape(tr: &dyn Recurrent) -> DomainShape {
    DomainShape::state(tr.n_x(), tr.n_t(), tr.n_h())
}

fn as_tensor(tr: &dyn Recurrent, x: &[f64]) -> Tensor3 {
    Tensor3::from_vec(tr.n_x(), tr.n_t(), tr.n_h(), x.to_vec()).expect("state-shaped input")
}

/// `u(t) = q(t) + J_t u(t-1)`, the forward action of `P`.
pub fn propagate(tr: &dyn Recurrent, q: &Tensor3) -> Tensor3 {
    let mut out = Tensor3::zeros(tr.n_x(), tr.n_t(), tr.n_h());
    let mut prev: Option<DMatrix<f64>> = None;
    for t in 0..tr.n_t() {
        let mut u = q.step(t);
        if let Some(p) = &prev {
            u += tr.state_jvp(t, p);
        }
        out.set_step(t, &u);
        prev = Some(u);
    }
    out
}

/// Time-reversed recursion `w(t) = v(t) + J_{t+1}ᵀ w(t+1)`, the action of `P*`.
pub fn propagate_adjoint(tr: &dyn Recurrent, v: &Tensor3) -> Tensor3 {
    let n_t = tr.n_t();
    let mut out = Tensor3::zeros(tr.n_x(), n_t, tr.n_h());
    let mut next: Option<DMatrix<f64>> = None;
    for t in (0..n_t).rev() {
        let mut w = v.step(t);
        if let Some(nx) = &next {
            w += tr.state_vjp(t + 1, nx);
        }
        out.set_step(t, &w);
        next = Some(w);
    }
    out
}

/// Causal propagator `P = (I - D_h f T↓)^{-1}` on the global state.
pub fn propagator(tr: Arc<dyn Recurrent>) -> LinOp {
    let shape = state_shape(tr.as_ref());
    let (a, b) = (tr.clone(), tr);
    LinOp::from_fn(
        "propagator",
        shape.clone(),
        shape,
        false,
        move |x| propagate(a.as_ref(), &as_tensor(a.as_ref(), x)).into_vec(),
        move |y| propagate_adjoint(b.as_ref(), &as_tensor(b.as_ref(), y)).into_vec(),
    )
}

/// `D_θ f` applied to a parameter direction, one step at a time.
pub fn param_tangent(tr: &dyn Recurrent, dtheta: &ParamSet) -> Result<Tensor3> {
    let mut out = Tensor3::zeros(tr.n_x(), tr.n_t(), tr.n_h());
    for t in 0..tr.n_t() {
        out.set_step(t, &tr.param_jvp(t, dtheta)?);
    }
    Ok(out)
}

/// `(D_θ f)*` applied to a state cotangent.
pub fn param_cotangent(tr: &dyn Recurrent, u: &Tensor3) -> ParamSet {
    let mut acc = tr.param_zeros();
    for t in 0..tr.n_t() {
        tr.param_vjp(t, &u.step(t), &mut acc);
    }
    acc
}

/// Parameter kernel `K = (D_θ f)(D_θ f)*`.
pub fn param_kernel(tr: Arc<dyn Recurrent>) -> Result<LinOp> {
    if tr.state_families().is_empty() {
        return Err(Error::NothingTrainable);
    }
    let shape = state_shape(tr.as_ref());
    let act = move |x: &[f64]| -> Vec<f64> {
        let g = param_cotangent(tr.as_ref(), &as_tensor(tr.as_ref(), x));
        param_tangent(tr.as_ref(), &g).expect("families match").into_vec()
    };
    let act = Arc::new(act);
    let a2 = act.clone();
    Ok(LinOp::from_fn("param_kernel", shape.clone(), shape, true, move |x| act(x), move |y| a2(y)))
}

/// Lifted site space: family-major blocks, each `k x rep` row-major with
/// row `j * n_t + t`.
#[derive(Debug, Clone)]
pub struct LiftedLayout {
    pub families: Vec<SiteFamily>,
    pub offsets: Vec<usize>,
    pub n_x: usize,
    pub n_t: usize,
}

impl LiftedLayout {
    pub fn of(tr: &dyn Recurrent) -> Self {
        let families = tr.site_families();
        let k = tr.n_x() * tr.n_t();
        let mut offsets = Vec::with_capacity(families.len());
        let mut off = 0;
        for f in &families {
            offsets.push(off);
            off += k * f.rep;
        }
        Self {
            families,
            offsets,
            n_x: tr.n_x(),
            n_t: tr.n_t(),
        }
    }

    pub fn k(&self) -> usize {
        self.n_x * self.n_t
    }

    pub fn dim(&self) -> usize {
        self.families.iter().map(|f| f.rep).sum::<usize>() * self.k()
    }

    fn at(&self, f: usize, j: usize, t: usize, r: usize) -> usize {
        self.offsets[f] + (j * self.n_t + t) * self.families[f].rep + r
    }

    /// Per-family `rep x n_x` slices at step `t`.
    pub fn gather(&self, x: &[f64], t: usize) -> Vec<DMatrix<f64>> {
        (0..self.families.len())
            .map(|f| DMatrix::from_fn(self.families[f].rep, self.n_x, |r, j| x[self.at(f, j, t, r)]))
            .collect()
    }

    pub fn scatter(&self, t: usize, blocks: &[DMatrix<f64>], out: &mut [f64]) {
        for (f, b) in blocks.iter().enumerate() {
            for j in 0..self.n_x {
                for r in 0..self.families[f].rep {
                    out[self.at(f, j, t, r)] = b[(r, j)];
                }
            }
        }
    }

    /// Family block `f` of a lifted vector as a `k x rep` matrix.
    pub fn block(&self, x: &[f64], f: usize) -> DMatrix<f64> {
        let rep = self.families[f].rep;
        let s = &x[self.offsets[f]..self.offsets[f] + self.k() * rep];
        DMatrix::from_row_slice(self.k(), rep, s)
    }
}

/// `G`: lifted site perturbations to immediate state corrections.
pub fn site_lift(tr: Arc<dyn Recurrent>) -> LinOp {
    let layout = LiftedLayout::of(tr.as_ref());
    let shape = state_shape(tr.as_ref());
    let (a, b) = (tr.clone(), tr);
    let (la, lb) = (layout.clone(), layout.clone());
    LinOp::from_fn(
        "site_lift",
        DomainShape::flat(layout.dim()),
        shape,
        false,
        move |x| {
            let mut out = Tensor3::zeros(a.n_x(), a.n_t(), a.n_h());
            for t in 0..a.n_t() {
                out.set_step(t, &a.site_jvp(t, &la.gather(x, t)));
            }
            out.into_vec()
        },
        move |y| {
            let u = as_tensor(b.as_ref(), y);
            let mut out = vec![0.0; lb.dim()];
            for t in 0..b.n_t() {
                lb.scatter(t, &b.site_vjp(t, &u.step(t)), &mut out);
            }
            out
        },
    )
}

/// `P_core = P ∘ G`.
pub fn propagator_core(tr: Arc<dyn Recurrent>) -> Result<LinOp> {
    propagator(tr.clone()).compose(&site_lift(tr))
}

/// `V Vᵀ ⊗ I_replication` on `(batch, time, replication)`.
pub fn kron_core(sites: &WeightSites) -> Result<LinOp> {
    core_with_replication(sites, sites.replication)
}

/// `V Vᵀ ⊗ I_n` with an explicit identity factor, e.g. `n_h` for comparison on S.
pub fn core_with_replication(sites: &WeightSites, n: usize) -> Result<LinOp> {
    let gram = LinOp::dense_psd(sites.gram())?;
    let id = LinOp::identity(DomainShape::flat(n));
    let shape = DomainShape::state(sites.n_x, sites.n_t, n);
    gram.tensor_product(&id).reshape(shape.clone(), shape)
}

/// Per-family core `⊕_f V_f V_fᵀ ⊗ I_{rep_f}` on the lifted space.
pub fn lifted_core(tr: &dyn Recurrent, sites: &WeightSites) -> Result<LinOp> {
    let blocks = tr
        .site_families()
        .iter()
        .map(|f| {
            let v = sites.block(f.family).expect("site family present");
            let gram = LinOp::dense_psd(&v * v.transpose())?;
            Ok(gram.tensor_product(&LinOp::identity(DomainShape::flat(f.rep))))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinOp::direct_sum(&blocks)?.with_psd_hint())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtkMode {
    Direct,
    Lifted,
}

/// Operators behind one NTK assembly.
#[derive(Debug, Clone)]
pub struct NtkBundle {
    pub p: LinOp,
    pub k: LinOp,
    pub ntk: LinOp,
    /// `V Vᵀ ⊗ I` per family on the lifted space.
    pub core: LinOp,
    pub p_core: LinOp,
    pub sites: WeightSites,
}

pub fn global_ntk(tr: Arc<dyn Recurrent>, mode: NtkMode) -> Result<NtkBundle> {
    let p = propagator(tr.clone());
    let k = param_kernel(tr.clone())?;
    let sites = tr.weight_sites();
    let core = lifted_core(tr.as_ref(), &sites)?;
    let p_core = propagator_core(tr)?;
    let ntk = match mode {
        NtkMode::Direct => LinOp::chain(&[&p, &k, &p.adjoint()])?,
        NtkMode::Lifted => LinOp::chain(&[&p_core, &core, &p_core.adjoint()])?,
    }
    .with_psd_hint();
    Ok(NtkBundle {
        p,
        k,
        ntk,
        core,
        p_core,
        sites,
    })
}

/// Direct-mode NTK `J J*` of an attention trace on its global state.
pub fn attn_ntk(tr: Arc<AttnTrace>) -> Result<LinOp> {
    if tr.trainable().is_empty() {
        return Err(Error::NothingTrainable);
    }
    let shape = DomainShape::state(tr.n_x(), tr.n_t(), tr.state_width());
    let act = move |x: &[f64]| -> Vec<f64> {
        let u = Tensor3::from_vec(tr.n_x(), tr.n_t(), tr.state_width(), x.to_vec()).expect("state-shaped input");
        tr.jvp_params(&tr.vjp_params(&u)).expect("families match").into_vec()
    };
    let act = Arc::new(act);
    let a2 = act.clone();
    Ok(LinOp::from_fn("attn_ntk", shape.clone(), shape, true, move |x| act(x), move |y| a2(y)))
}

/// Average over the feature axis: `tr_n(NTK) / n`, a `k x k` operator.
pub fn temporal_view(ntk: &LinOp) -> Result<LinOp> {
    ntk.partial_average(&[2])
}

/// Average over batch and time: `tr_k(NTK) / k`, an `n x n` operator.
pub fn spatial_view(ntk: &LinOp) -> Result<LinOp> {
    ntk.partial_average(&[0, 1])
}

/// Dense temporal and spatial views.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedViews {
    pub temporal: DMatrix<f64>,
    pub spatial: DMatrix<f64>,
}

/// Accumulates `Σ_c y_c y_cᵀ` reductions from factor columns `y_c ∈ S`.
struct ViewAccumulator {
    n_x: usize,
    n_t: usize,
    n: usize,
    temporal: DMatrix<f64>,
    spatial: DMatrix<f64>,
    pending: Vec<DMatrix<f64>>,
}

const VIEW_CHUNK: usize = 32;

impl ViewAccumulator {
    fn new(n_x: usize, n_t: usize, n: usize) -> Self {
        let k = n_x * n_t;
        Self {
            n_x,
            n_t,
            n,
            temporal: DMatrix::zeros(k, k),
            spatial: DMatrix::zeros(n, n),
            pending: Vec::with_capacity(VIEW_CHUNK),
        }
    }

    /// Push one factor column given as its `k x n` row view.
    fn push(&mut self, rows: DMatrix<f64>) {
        self.spatial += rows.tr_mul(&rows);
        self.pending.push(rows);
        if self.pending.len() == VIEW_CHUNK {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        let k = self.n_x * self.n_t;
        let mut m = DMatrix::zeros(k, self.pending.len() * self.n);
        for (c, rows) in self.pending.iter().enumerate() {
            m.columns_mut(c * self.n, self.n).copy_from(rows);
        }
        self.temporal += &m * m.transpose();
        self.pending.clear();
    }

    fn finish(mut self) -> ReducedViews {
        self.flush();
        let k = (self.n_x * self.n_t) as f64;
        ReducedViews {
            temporal: self.temporal / self.n as f64,
            spatial: self.spatial / k,
        }
    }
}

/// Rows `(j n_t + t, i)` of copy `c` in a tiled state tensor.
fn copy_rows(u: &Tensor3, c: usize, n_x: usize) -> DMatrix<f64> {
    let n_t = u.n_t;
    DMatrix::from_fn(n_x * n_t, u.n, |row, i| u.get(c * n_x + row / n_t, row % n_t, i))
}

/// Exact reduced views of the recurrent NTK from the factorization
/// `NTK = Σ_f Σ_i Σ_r y y*`, `y = P G (σ_i u_i ⊗ e_r)`, with `V_f = U Σ Wᵀ`.
/// Columns are pushed through a tiled trace `VIEW_CHUNK` at a time.
pub fn recurrent_views(tr: &dyn Recurrent) -> Result<ReducedViews> {
    if tr.state_families().is_empty() {
        return Err(Error::NothingTrainable);
    }
    let sites = tr.weight_sites();
    let fams = tr.site_families();
    let (n_x, n_t) = (tr.n_x(), tr.n_t());
    let smax = sites.v.clone().singular_values().max();
    let mut factors = Vec::new();
    for f in &fams {
        let v = sites.block(f.family).expect("site family present");
        let svd = v.svd(true, false);
        factors.push((svd.u.expect("left vectors"), svd.singular_values));
    }
    // (family, singular index, replica row)
    let mut columns = Vec::new();
    for (fi, f) in fams.iter().enumerate() {
        for (i, &s) in factors[fi].1.iter().enumerate() {
            if s > 1e-13 * smax {
                columns.extend((0..f.rep).map(|r| (fi, i, r)));
            }
        }
    }
    let mut acc = ViewAccumulator::new(n_x, n_t, tr.n_h());
    let full = tr.tiled(VIEW_CHUNK);
    for chunk in columns.chunks(VIEW_CHUNK) {
        let short;
        let wide = if chunk.len() == VIEW_CHUNK {
            &full
        } else {
            short = tr.tiled(chunk.len());
            &short
        };
        let mut q = Tensor3::zeros(n_x * chunk.len(), n_t, tr.n_h());
        for t in 0..n_t {
            let mut dq: Vec<DMatrix<f64>> = fams.iter().map(|g| DMatrix::zeros(g.rep, n_x * chunk.len())).collect();
            for (c, &(fi, i, r)) in chunk.iter().enumerate() {
                let (u, sv) = &factors[fi];
                for j in 0..n_x {
                    dq[fi][(r, c * n_x + j)] = sv[i] * u[(j * n_t + t, i)];
                }
            }
            q.set_step(t, &wide.site_jvp(t, &dq));
        }
        let y = propagate(wide.as_ref(), &q);
        for c in 0..chunk.len() {
            acc.push(copy_rows(&y, c, n_x));
        }
    }
    Ok(acc.finish())
}

/// Exact reduced views of the attention NTK from parameter-basis JVPs.
pub fn attn_views(tr: &AttnTrace) -> Result<ReducedViews> {
    let zero = tr.param_zeros();
    if zero.is_empty() {
        return Err(Error::NothingTrainable);
    }
    let mut acc = ViewAccumulator::new(tr.n_x(), tr.n_t(), tr.state_width());
    let dim = zero.to_vec().len();
    let mut e = vec![0.0; dim];
    for p in 0..dim {
        e[p] = 1.0;
        acc.push(tr.jvp_params(&zero.from_vec_like(&e))?.to_rows());
        e[p] = 0.0;
    }
    Ok(acc.finish())
}

/// Temporal view of `P P*`. `P` never mixes trials, so each basis direction
/// `e_{s,i}` is pushed through every trial at once and the result is
/// block-diagonal in the trial index.
pub fn propagator_temporal_gram(tr: &dyn Recurrent) -> DMatrix<f64> {
    let (n_x, n_t, n) = (tr.n_x(), tr.n_t(), tr.n_h());
    let k = n_x * n_t;
    let basis: Vec<(usize, usize)> = (0..n_t).flat_map(|s| (0..n).map(move |i| (s, i))).collect();
    let mut g = DMatrix::zeros(k, k);
    let full = tr.tiled(VIEW_CHUNK);
    for chunk in basis.chunks(VIEW_CHUNK) {
        let short;
        let wide = if chunk.len() == VIEW_CHUNK {
            &full
        } else {
            short = tr.tiled(chunk.len());
            &short
        };
        let mut q = Tensor3::zeros(n_x * chunk.len(), n_t, n);
        for (c, &(s, i)) in chunk.iter().enumerate() {
            for j in 0..n_x {
                q.set(c * n_x + j, s, i, 1.0);
            }
        }
        let u = propagate(wide.as_ref(), &q);
        for c in 0..chunk.len() {
            let rows = copy_rows(&u, c, n_x);
            for j in 0..n_x {
                let block = rows.rows(j * n_t, n_t);
                let gram = block * block.transpose();
                let mut target = g.view_mut((j * n_t, j * n_t), (n_t, n_t));
                target += gram;
            }
        }
    }
    g / n as f64
}

/// Full state-parameter Jacobian `J_θ = P D_θ f`, one column per parameter.
pub fn param_jacobian(tr: &dyn Recurrent) -> Result<DMatrix<f64>> {
    let zero = tr.param_zeros();
    let dim = zero.to_vec().len();
    let s = tr.n_x() * tr.n_t() * tr.n_h();
    let mut jac = DMatrix::zeros(s, dim);
    let mut e = vec![0.0; dim];
    for p in 0..dim {
        e[p] = 1.0;
        let y = propagate(tr, &param_tangent(tr, &zero.from_vec_like(&e))?);
        jac.column_mut(p).copy_from_slice(y.as_slice());
        e[p] = 0.0;
    }
    Ok(jac)
}

/// Central-difference `J_θ` from whole-trajectory reruns.
pub fn param_jacobian_fd(tr: &dyn Recurrent, eps: f64) -> Result<DMatrix<f64>> {
    let zero = tr.param_zeros();
    let dim = zero.to_vec().len();
    let s = tr.n_x() * tr.n_t() * tr.n_h();
    let mut jac = DMatrix::zeros(s, dim);
    let mut e = vec![0.0; dim];
    for p in 0..dim {
        e[p] = eps;
        let plus = tr.rerun_shifted(&zero.from_vec_like(&e))?;
        e[p] = -eps;
        let minus = tr.rerun_shifted(&zero.from_vec_like(&e))?;
        e[p] = 0.0;
        for (r, (a, b)) in plus.as_slice().iter().zip(minus.as_slice()).enumerate() {
            jac[(r, p)] = (a - b) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// `adj = P*(err)`.
pub fn adjoint_state(p: &LinOp, err: &[f64]) -> Vec<f64> {
    p.apply_adjoint(err)
}

/// Lifted adjoint `G* P* err`, one `k x rep` block per site family.
pub fn lifted_adjoint(tr: Arc<dyn Recurrent>, err: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let layout = LiftedLayout::of(tr.as_ref());
    let p_core = propagator_core(tr)?;
    let lifted = p_core.apply_adjoint(err);
    Ok((0..layout.families.len()).map(|f| layout.block(&lifted, f)).collect())
}

/// `⟨NTK err, err⟩`.
pub fn quadratic_form(ntk: &LinOp, err: &[f64]) -> f64 {
    dot(&ntk.apply(err), err)
}

/// `Σ_f ‖V_fᵀ adj_f‖²_F` with `adj_f` reshaped `k x rep_f`, families in the
/// order of `sites.family_slices`.
pub fn core_filter_norm(sites: &WeightSites, adj: &[DMatrix<f64>]) -> Result<f64> {
    if adj.len() != sites.family_slices.len() {
        return Err(Error::InvalidArgument(format!(
            "{} adjoint blocks for {} site families",
            adj.len(),
            sites.family_slices.len()
        )));
    }
    let mut total = 0.0;
    for ((_, range), a) in sites.family_slices.iter().zip(adj) {
        if a.nrows() != sites.k() {
            return Err(Error::InvalidShape(format!(
                "adjoint block has {} rows, expected {}",
                a.nrows(),
                sites.k()
            )));
        }
        let v = sites.v.columns(range.start, range.len());
        total += v.tr_mul(a).norm_squared();
    }
    Ok(total)
}

/// `‖a - b‖_F / ‖b‖_F`, matrix-free.
pub fn verify_core(a: &LinOp, b: &LinOp, cfg: &ProbeConfig) -> Result<f64> {
    let nb = frobenius_norm(b, cfg)?;
    if nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let diff = LinOp::sum(&[a.clone(), b.scale(-1.0)])?;
    Ok(frobenius_norm(&diff, cfg)? / nb)
}

/// Kernel-target alignment `⟨v, A v⟩ / ‖A‖_F`. Exact below the
/// materialization cap, probe-estimated above it.
pub fn ntk_target_alignment(ntk_temporal: &LinOp, mode: &[f64], cfg: &ProbeConfig) -> Result<f64> {
    let fro = if ntk_temporal.domain().dim() <= DEFAULT_MATERIALIZE_CAP {
        ntk_temporal.materialize()?.norm()
    } else {
        frobenius_norm(ntk_temporal, cfg)?
    };
    if fro == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(mode, &ntk_temporal.apply(mode)) / fro)
}

/// Dense form of [`ntk_target_alignment`].
pub fn target_alignment_dense(a: &DMatrix<f64>, mode: &[f64]) -> Result<f64> {
    let fro = a.norm();
    if fro == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let v = DMatrix::from_column_slice(mode.len(), 1, mode);
    Ok((v.transpose() * a * &v)[(0, 0)] / fro)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCheck {
    pub delta_h: usize,
    pub temporal: usize,
    pub spatial: usize,
}

impl RankCheck {
    pub fn holds(&self) -> bool {
        self.delta_h <= self.temporal.min(self.spatial)
    }
}

fn psd_rank(m: &DMatrix<f64>) -> usize {
    let (ev, _) = sym_eig_desc(m);
    let top = ev.first().copied().unwrap_or(0.0).max(0.0);
    if top == 0.0 {
        return 0;
    }
    ev.iter().filter(|&&l| l > RANK_REL_TOL * top).count()
}

/// Ranks of `δh = NTK(err)` reshaped `k x n` and of the two reduced views.
pub fn delta_h_rank_check(ntk: &LinOp, err: &[f64]) -> Result<RankCheck> {
    let shape = ntk.domain();
    if shape.rank() != 3 {
        return Err(Error::InvalidShape(format!("expected (batch, time, feature), got {shape}")));
    }
    let e = shape.extents();
    let dh = ntk.apply(err);
    let rows = DMatrix::from_row_slice(e[0] * e[1], e[2], &dh);
    let temporal = temporal_view(ntk)?.materialize()?;
    let spatial = spatial_view(ntk)?.materialize()?;
    Ok(RankCheck {
        delta_h: numerical_rank(&rows, RANK_REL_TOL),
        temporal: psd_rank(&temporal),
        spatial: psd_rank(&spatial),
    })
}
