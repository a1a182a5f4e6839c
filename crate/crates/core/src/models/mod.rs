//! Forward passes and hand-derived linearizations for the recurrent and
//! attention models.
//!
//! A forward pass returns a *trace*: the full hidden-state trajectory plus
//! every intermediate needed to linearize the one-step map exactly. Traces own
//! a copy of the weights, are immutable, and can be shared across operators.
//!
//! Per-step quantities are batched over trials: an `n x n_x` matrix holds one
//! trial per column. Time runs `t = 0..n_t` with `h[t] = f(h[t-1], x[t])` and
//! `h[-1] = h0`.

mod attn;
mod gru;
mod rnn;

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::dot;
use crate::rng::{gaussian_matrix, stream, Rng64};
use crate::tensor::Tensor3;

pub use attn::{AttnMlp, AttnTrace};
pub use gru::{Gru, GruTrace};
pub use rnn::{Rnn, RnnTrace, Update};

/// A trainable weight family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Rec,
    In,
    Out,
    Query,
    Key,
    Value,
    AttnOut,
    Mlp(usize),
    MlpBias(usize),
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Rec => write!(f, "rec"),
            Family::In => write!(f, "in"),
            Family::Out => write!(f, "out"),
            Family::Query => write!(f, "query"),
            Family::Key => write!(f, "key"),
            Family::Value => write!(f, "value"),
            Family::AttnOut => write!(f, "attn_out"),
            Family::Mlp(l) => write!(f, "mlp{l}"),
            Family::MlpBias(l) => write!(f, "mlp_bias{l}"),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rec" => Family::Rec,
            "in" => Family::In,
            "out" => Family::Out,
            "query" => Family::Query,
            "key" => Family::Key,
            "value" => Family::Value,
            "attn_out" => Family::AttnOut,
            _ => {
                let parse = |p: &str| {
                    s.strip_prefix(p)
                        .and_then(|r| r.parse::<usize>().ok())
                };
                if let Some(l) = parse("mlp_bias") {
                    Family::MlpBias(l)
                } else if let Some(l) = parse("mlp") {
                    Family::Mlp(l)
                } else {
                    return Err(Error::InvalidArgument(format!("unknown weight family '{s}'")));
                }
            }
        })
    }
}

/// Weight matrices keyed by family, kept in canonical family order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(Family, DMatrix<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, family: Family, m: DMatrix<f64>) {
        match self.entries.binary_search_by(|(f, _)| f.cmp(&family)) {
            Ok(i) => self.entries[i].1 = m,
            Err(i) => self.entries.insert(i, (family, m)),
        }
    }

    pub fn with(mut self, family: Family, m: DMatrix<f64>) -> Self {
        self.insert(family, m);
        self
    }

    pub fn get(&self, family: Family) -> Option<&DMatrix<f64>> {
        self.entries
            .binary_search_by(|(f, _)| f.cmp(&family))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, family: Family) -> Option<&mut DMatrix<f64>> {
        self.entries
            .binary_search_by(|(f, _)| f.cmp(&family))
            .ok()
            .map(move |i| &mut self.entries[i].1)
    }

    pub fn families(&self) -> Vec<Family> {
        self.entries.iter().map(|(f, _)| *f).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Family, &DMatrix<f64>)> {
        self.entries.iter().map(|(f, m)| (*f, m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Family, &mut DMatrix<f64>)> {
        self.entries.iter_mut().map(|(f, m)| (*f, m))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(f, m)| (*f, DMatrix::zeros(m.nrows(), m.ncols())))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .map(|(f, m)| match other.get(*f) {
                Some(o) => dot(m.as_slice(), o.as_slice()),
                None => 0.0,
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other` over the families present in `self`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        for (f, m) in self.entries.iter_mut() {
            if let Some(o) = other.get(*f) {
                *m += o * alpha;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, m) in self.entries.iter_mut() {
            *m *= c;
        }
    }

    /// Flatten in family order, each matrix column-major.
    pub fn to_vec(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamSet::to_vec`] using `self` as the layout template.
    pub fn from_vec_like(&self, v: &[f64]) -> Self {
        assert_eq!(v.len(), self.len(), "from_vec_like: length mismatch");
        let mut off = 0;
        let entries = self
            .entries
            .iter()
            .map(|(f, m)| {
                let n = m.len();
                let out = DMatrix::from_column_slice(m.nrows(), m.ncols(), &v[off..off + n]);
                off += n;
                (*f, out)
            })
            .collect();
        Self { entries }
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y = apply(x)`.
    pub fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn map(self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.map(|v| self.apply(v))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Xavier-normal `rows x cols` matrix, `std = gain * sqrt(2 / (rows + cols))`.
pub fn xavier(rng: &mut Rng64, rows: usize, cols: usize, gain: f64) -> DMatrix<f64> {
    let std = gain * (2.0 / (rows + cols) as f64).sqrt();
    gaussian_matrix(rng, rows, cols) * std
}

/// One weight family of the lifted site space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteFamily {
    pub family: Family,
    /// Number of site-vector components (columns of `V` for this family).
    pub width: usize,
    /// Output dimension of the family's weight matrix (the `I_n` factor).
    pub rep: usize,
}

/// Weight-site matrix `V` with rows indexed by `j * n_t + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSites {
    pub v: DMatrix<f64>,
    pub replication: usize,
    pub family_slices: Vec<(Family, std::ops::Range<usize>)>,
    pub n_x: usize,
    pub n_t: usize,
}

impl WeightSites {
    pub fn k(&self) -> usize {
        self.v.nrows()
    }

    pub fn m(&self) -> usize {
        self.v.ncols()
    }

    pub fn block(&self, family: Family) -> Option<DMatrix<f64>> {
        self.family_slices
            .iter()
            .find(|(f, _)| *f == family)
            .map(|(_, r)| self.v.columns(r.start, r.len()).into_owned())
    }

    pub fn gram(&self) -> DMatrix<f64> {
        &self.v * self.v.transpose()
    }
}

/// Linearization of a recorded recurrent trajectory.
pub trait Recurrent: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_t(&self) -> usize;
    fn n_h(&self) -> usize;
    fn n_in(&self) -> usize;

    /// `h[t]` as an `n_h x n_x` matrix.
    fn hidden_at(&self, t: usize) -> &DMatrix<f64>;
    /// `h[t-1]`, or the initial state for `t = 0`.
    fn h_prev(&self, t: usize) -> &DMatrix<f64>;
    fn input_at(&self, t: usize) -> &DMatrix<f64>;

    fn hidden(&self) -> Tensor3 {
        Tensor3::from_steps(&(0..self.n_t()).map(|t| self.hidden_at(t).clone()).collect::<Vec<_>>())
    }

    fn trainable(&self) -> &[Family];

    /// Trainable families that act on the hidden state, in canonical order.
    fn state_families(&self) -> Vec<Family> {
        let mut f: Vec<Family> = self
            .trainable()
            .iter()
            .copied()
            .filter(|f| matches!(f, Family::Rec | Family::In))
            .collect();
        f.sort();
        f.dedup();
        f
    }

    /// Zero parameter perturbation over the state families.
    fn param_zeros(&self) -> ParamSet;

    /// `d h[t] / d h[t-1]` applied to `dh`.
    fn state_jvp(&self, t: usize, dh: &DMatrix<f64>) -> DMatrix<f64>;
    fn state_vjp(&self, t: usize, u: &DMatrix<f64>) -> DMatrix<f64>;

    /// Immediate effect of a parameter perturbation on `h[t]`, holding `h[t-1]` fixed.
    fn param_jvp(&self, t: usize, dtheta: &ParamSet) -> Result<DMatrix<f64>>;
    /// Accumulates the adjoint of [`Recurrent::param_jvp`] into `acc`.
    fn param_vjp(&self, t: usize, u: &DMatrix<f64>, acc: &mut ParamSet);

    fn site_families(&self) -> Vec<SiteFamily>;
    /// Site vectors feeding each state family at step `t`, each `width x n_x`.
    fn site_vectors(&self, t: usize) -> Vec<DMatrix<f64>>;
    /// Derivative of `h[t]` with respect to the weight-site products, one
    /// `rep x n_x` block per state family.
    fn site_jvp(&self, t: usize, dq: &[DMatrix<f64>]) -> DMatrix<f64>;
    fn site_vjp(&self, t: usize, u: &DMatrix<f64>) -> Vec<DMatrix<f64>>;

    /// One-step map at `t` from an arbitrary previous state.
    fn step_from(&self, t: usize, h_prev: &DMatrix<f64>) -> DMatrix<f64>;
    /// One-step map at `t` with the state-family weights shifted by `dtheta`.
    fn step_shifted_params(&self, t: usize, dtheta: &ParamSet) -> DMatrix<f64>;
    /// One-step map at `t` with the weight-site products shifted by `dq`.
    fn step_shifted_sites(&self, t: usize, dq: &[DMatrix<f64>]) -> DMatrix<f64>;
    /// Whole trajectory recomputed with the state-family weights shifted by `dtheta`.
    fn rerun_shifted(&self, dtheta: &ParamSet) -> Result<Tensor3>;
    /// The same linearization with every trial repeated `copies` times;
    /// trial `j` of copy `c` becomes trial `c * n_x + j`.
    fn tiled(&self, copies: usize) -> Box<dyn Recurrent>;

    /// Stack the site vectors into `V`, rows indexed by `j * n_t + t`.
    fn weight_sites(&self) -> WeightSites {
        let fams = self.site_families();
        let (n_x, n_t) = (self.n_x(), self.n_t());
        let m: usize = fams.iter().map(|f| f.width).sum();
        let mut v = DMatrix::zeros(n_x * n_t, m);
        let mut slices = Vec::new();
        let mut off = 0;
        for f in &fams {
            slices.push((f.family, off..off + f.width));
            off += f.width;
        }
        for t in 0..n_t {
            let sv = self.site_vectors(t);
            let mut off = 0;
            for (f, s) in fams.iter().zip(&sv) {
                for j in 0..n_x {
                    for c in 0..f.width {
                        v[(j * n_t + t, off + c)] = s[(c, j)];
                    }
                }
                off += f.width;
            }
        }
        WeightSites {
            v,
            replication: fams.first().map(|f| f.rep).unwrap_or(self.n_h()),
            family_slices: slices,
            n_x,
            n_t,
        }
    }
}

/// Repeat the columns of `m` block-wise `copies` times.
pub(crate) fn tile(m: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let n_x = m.ncols();
    let mut out = DMatrix::zeros(m.nrows(), n_x * copies);
    for c in 0..copies {
        out.columns_mut(c * n_x, n_x).copy_from(m);
    }
    out
}

fn tile_all(ms: &[DMatrix<f64>], copies: usize) -> Vec<DMatrix<f64>> {
    ms.iter().map(|m| tile(m, copies)).collect()
}

fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

fn pick(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

/// Single-trial state JVP at `(j, t)`.
pub fn step_jvp_state(tr: &dyn Recurrent, j: usize, t: usize, dh: &[f64]) -> Vec<f64> {
    let mut full = DMatrix::zeros(tr.n_h(), tr.n_x());
    full.set_column(j, &column(dh).column(0));
    pick(&tr.state_jvp(t, &full), j)
}

pub fn step_vjp_state(tr: &dyn Recurrent, j: usize, t: usize, u: &[f64]) -> Vec<f64> {
    let mut full = DMatrix::zeros(tr.n_h(), tr.n_x());
    full.set_column(j, &column(u).column(0));
    pick(&tr.state_vjp(t, &full), j)
}

/// Single-trial parameter JVP at `(j, t)`.
pub fn step_jvp_params(tr: &dyn Recurrent, j: usize, t: usize, dtheta: &ParamSet) -> Result<Vec<f64>> {
    Ok(pick(&tr.param_jvp(t, dtheta)?, j))
}

pub fn step_vjp_params(tr: &dyn Recurrent, j: usize, t: usize, u: &[f64]) -> ParamSet {
    let mut full = DMatrix::zeros(tr.n_h(), tr.n_x());
    full.set_column(j, &column(u).column(0));
    let mut acc = tr.param_zeros();
    tr.param_vjp(t, &full, &mut acc);
    acc
}

fn check_families(allowed: &[Family], dtheta: &ParamSet) -> Result<()> {
    for f in dtheta.families() {
        if !allowed.contains(&f) {
            return Err(Error::FrozenFamily(f.to_string()));
        }
    }
    Ok(())
}

/// Maximum relative errors of analytic derivatives against central differences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FdReport {
    pub state: f64,
    pub param: f64,
    pub site: f64,
    /// `(j, t, state, param, site)` per trial and step.
    pub per_step: Vec<(usize, usize, f64, f64, f64)>,
}

impl FdReport {
    pub fn max(&self) -> f64 {
        self.state.max(self.param).max(self.site)
    }
}

fn col_rel(a: &DMatrix<f64>, b: &DMatrix<f64>, j: usize) -> f64 {
    let d = (a.column(j) - b.column(j)).norm();
    let nb = b.column(j).norm();
    if nb < 1e-300 {
        d
    } else {
        d / nb
    }
}

/// Compare every analytic one-step derivative of `tr` with central
/// differences of step size `eps`, along random directions drawn from `seed`.
pub fn fd_check(tr: &dyn Recurrent, eps: f64, seed: u64) -> FdReport {
    let (n_h, n_x) = (tr.n_h(), tr.n_x());
    let mut report = FdReport::default();
    for t in 0..tr.n_t() {
        let mut rng = stream(seed, 40, t as u32);
        let dh = gaussian_matrix(&mut rng, n_h, n_x);
        let hp = tr.h_prev(t);
        let fd_state = (tr.step_from(t, &(hp + &dh * eps)) - tr.step_from(t, &(hp - &dh * eps))) / (2.0 * eps);
        let an_state = tr.state_jvp(t, &dh);

        let mut dtheta = tr.param_zeros();
        for (_, m) in dtheta.iter_mut() {
            *m = gaussian_matrix(&mut rng, m.nrows(), m.ncols());
        }
        let (an_param, fd_param) = if dtheta.is_empty() {
            (DMatrix::zeros(n_h, n_x), DMatrix::zeros(n_h, n_x))
        } else {
            let mut plus = dtheta.clone();
            plus.scale(eps);
            let mut minus = dtheta.clone();
            minus.scale(-eps);
            (
                tr.param_jvp(t, &dtheta).expect("trainable directions"),
                (tr.step_shifted_params(t, &plus) - tr.step_shifted_params(t, &minus)) / (2.0 * eps),
            )
        };

        let fams = tr.site_families();
        let dq: Vec<DMatrix<f64>> = fams
            .iter()
            .map(|f| gaussian_matrix(&mut rng, f.rep, n_x))
            .collect();
        let scaled = |c: f64| dq.iter().map(|m| m * c).collect::<Vec<_>>();
        let fd_site = (tr.step_shifted_sites(t, &scaled(eps)) - tr.step_shifted_sites(t, &scaled(-eps))) / (2.0 * eps);
        let an_site = if fams.is_empty() {
            DMatrix::zeros(n_h, n_x)
        } else {
            tr.site_jvp(t, &dq)
        };

        for j in 0..n_x {
            let s = col_rel(&an_state, &fd_state, j);
            let p = col_rel(&an_param, &fd_param, j);
            let q = col_rel(&an_site, &fd_site, j);
            report.state = report.state.max(s);
            report.param = report.param.max(p);
            report.site = report.site.max(q);
            report.per_step.push((j, t, s, p, q));
        }
    }
    report
}

/// Reject non-finite activations, reporting the first offending `(batch, time)`.
fn check_finite(t: usize, m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        if m.column(j).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { batch: j, time: t });
        }
    }
    Ok(())
}

/// Split a `(n_x, n_t, n_in)` input tensor into per-step `n_in x n_x` matrices.
fn input_steps(x: &Tensor3, n_in: usize) -> Result<Vec<DMatrix<f64>>> {
    if x.n != n_in {
        return Err(Error::InvalidShape(format!(
            "input has {} channels, model expects {n_in}",
            x.n
        )));
    }
    Ok(x.steps())
}

fn initial_state(h0: Option<&DMatrix<f64>>, n_h: usize, n_x: usize) -> Result<DMatrix<f64>> {
    match h0 {
        None => Ok(DMatrix::zeros(n_h, n_x)),
        Some(h) if h.shape() == (n_h, n_x) => Ok(h.clone()),
        Some(h) => Err(Error::InvalidShape(format!(
            "initial state is {}x{}, expected {n_h}x{n_x}",
            h.nrows(),
            h.ncols()
        ))),
    }
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::InvalidShape(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(())
}
