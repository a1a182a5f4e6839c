//! Randomized matrix-free estimators over [`LinOp`]s.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linop::LinOp;
use crate::numerics::{dot, sym_eig_desc};
use crate::rng::{gaussian_vec, rademacher_vec, stream};

const SKETCH_STREAM: u32 = 1;
const RESIDUAL_STREAM: u32 = 2;
const EIG_STREAM: u32 = 3;

pub const EIG_MAX_ITERS: usize = 300;
pub const EIG_REL_TOL: f64 = 1e-6;
pub const PSD_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeConfig {
    pub sketch_size: usize,
    pub residual_probes: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sketch_size: 64,
            residual_probes: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn new(sketch_size: usize, residual_probes: usize, seed: u64) -> Result<Self> {
        if sketch_size == 0 || residual_probes == 0 {
            return Err(Error::InvalidArgument(
                "probe counts must be at least 1".into(),
            ));
        }
        Ok(Self {
            sketch_size,
            residual_probes,
            seed,
        })
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

fn require_square(op: &LinOp) -> Result<()> {
    if !op.is_square() {
        return Err(Error::NotSquare {
            domain: op.domain().clone(),
            codomain: op.codomain().clone(),
        });
    }
    Ok(())
}

fn apply_cols(apply: &dyn Fn(&[f64]) -> Vec<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, x.ncols());
    for c in 0..x.ncols() {
        let col: Vec<f64> = x.column(c).iter().copied().collect();
        out.column_mut(c).copy_from_slice(&apply(&col));
    }
    out
}

/// Hutch++ on a square action of dimension `n`.
fn hutchpp(n: usize, apply: &dyn Fn(&[f64]) -> Vec<f64>, cfg: &ProbeConfig) -> f64 {
    let s = cfg.sketch_size.min(n);
    let mut sketch = DMatrix::zeros(n, s);
    for c in 0..s {
        let g = gaussian_vec(&mut stream(cfg.seed, SKETCH_STREAM, c as u32), n);
        sketch.column_mut(c).copy_from_slice(&g);
    }
    let q = apply_cols(apply, &sketch).qr().q();
    let aq = apply_cols(apply, &q);
    let mut low_rank = 0.0;
    for c in 0..q.ncols() {
        low_rank += q.column(c).dot(&aq.column(c));
    }
    if q.ncols() >= n {
        return low_rank;
    }

    let mut residual = 0.0;
    for p in 0..cfg.residual_probes {
        let g = nalgebra::DVector::from_vec(rademacher_vec(
            &mut stream(cfg.seed, RESIDUAL_STREAM, p as u32),
            n,
        ));
        let deflated = &g - &q * (q.transpose() * &g);
        let v: Vec<f64> = deflated.iter().copied().collect();
        residual += dot(&v, &apply(&v));
    }
    low_rank + residual / cfg.residual_probes as f64
}

/// Hutch++ trace estimate. Exact up to round-off when the operator's rank is
/// at most `cfg.sketch_size`.
pub fn hutchpp_trace(op: &LinOp, cfg: &ProbeConfig) -> Result<f64> {
    require_square(op)?;
    Ok(hutchpp(op.domain().dim(), &|x| op.apply(x), cfg))
}

/// `sqrt(tr(op op*))`.
pub fn frobenius_norm(op: &LinOp, cfg: &ProbeConfig) -> Result<f64> {
    let n = op.codomain().dim();
    let t = hutchpp(n, &|y| op.apply(&op.apply_adjoint(y)), cfg);
    Ok(t.max(0.0).sqrt())
}

/// Frobenius cosine `tr(a b*) / (|a|_F |b|_F)`.
///
/// The cross term is estimated on the symmetric part `(a b* + b a*) / 2` with
/// the same probes as the two norms, so the result is symmetric in its
/// arguments and exactly 1 for `op_cosine(a, a)`.
pub fn op_cosine(a: &LinOp, b: &LinOp, cfg: &ProbeConfig) -> Result<f64> {
    if a.domain().dim() != b.domain().dim() || a.codomain().dim() != b.codomain().dim() {
        let (l, r) = if a.domain().dim() != b.domain().dim() {
            (a.domain(), b.domain())
        } else {
            (a.codomain(), b.codomain())
        };
        return Err(Error::ShapeMismatch {
            left: l.clone(),
            right: r.clone(),
        });
    }
    let n = a.codomain().dim();
    let aa = hutchpp(n, &|y| a.apply(&a.apply_adjoint(y)), cfg);
    let bb = hutchpp(n, &|y| b.apply(&b.apply_adjoint(y)), cfg);
    if aa <= 0.0 || bb <= 0.0 {
        return Err(Error::ZeroNorm);
    }
    let ab = hutchpp(
        n,
        &|y| {
            let x = a.apply(&b.apply_adjoint(y));
            let z = b.apply(&a.apply_adjoint(y));
            x.iter().zip(&z).map(|(p, q)| 0.5 * (p + q)).collect()
        },
        cfg,
    );
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMethod {
    ParticipationRatio,
    Variance95,
}

/// Effective rank of a non-negative spectrum. Small negative round-off is
/// clipped to zero; an all-zero spectrum has rank 0.
pub fn effective_rank(eigenvalues: &[f64], method: RankMethod) -> f64 {
    let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    match method {
        RankMethod::ParticipationRatio => {
            let sq: f64 = clipped.iter().map(|l| l * l).sum();
            total * total / sq
        }
        RankMethod::Variance95 => {
            let mut sorted = clipped;
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mut acc = 0.0;
            for (i, l) in sorted.iter().enumerate() {
                acc += l;
                if acc >= 0.95 * total * (1.0 - 1e-12) {
                    return (i + 1) as f64;
                }
            }
            sorted.len() as f64
        }
    }
}

/// Partial sums of a descending spectrum divided by its total.
pub fn cumulative_variance(eigenvalues: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return vec![0.0; clipped.len()];
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = clipped
        .iter()
        .map(|l| {
            acc += l;
            acc / total
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSummary {
    pub eigenvalues: Vec<f64>,
    pub cumulative_variance: Vec<f64>,
    pub effective_rank_pr: f64,
    pub effective_rank_95: usize,
}

impl SpectrumSummary {
    /// Summary of a descending spectrum; variance fractions are relative to the
    /// listed eigenvalues.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>) -> Self {
        let cumulative_variance = cumulative_variance(&eigenvalues);
        let effective_rank_pr = effective_rank(&eigenvalues, RankMethod::ParticipationRatio);
        let effective_rank_95 = effective_rank(&eigenvalues, RankMethod::Variance95) as usize;
        Self {
            eigenvalues,
            cumulative_variance,
            effective_rank_pr,
            effective_rank_95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub summary: SpectrumSummary,
    /// Orthonormal eigenvectors as columns, in the order of `summary.eigenvalues`.
    pub vectors: DMatrix<f64>,
    pub iterations: usize,
}

/// Top-`k` eigenpairs of a symmetric PSD operator by block subspace iteration
/// with Rayleigh-Ritz extraction.
pub fn topk_eigs(op: &LinOp, k: usize, cfg: &ProbeConfig) -> Result<Eigenpairs> {
    require_square(op)?;
    let n = op.domain().dim();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={n}"
        )));
    }
    let p = n.min(2 * k + 10);
    let mut x = DMatrix::zeros(n, p);
    for c in 0..p {
        let g = gaussian_vec(&mut stream(cfg.seed, EIG_STREAM, c as u32), n);
        x.column_mut(c).copy_from_slice(&g);
    }
    x = x.qr().q();
    let apply = |v: &[f64]| op.apply(v);

    let mut worst = f64::INFINITY;
    for iter in 1..=EIG_MAX_ITERS {
        let ax = apply_cols(&apply, &x);
        let h = x.transpose() * &ax;
        let (theta, w) = sym_eig_desc(&h);
        let ritz = &x * &w;
        let a_ritz = &ax * &w;
        let lambda1 = theta[0].abs().max(f64::MIN_POSITIVE);
        if let Some(&neg) = theta.iter().find(|&&t| t < -PSD_REL_TOL * lambda1) {
            return Err(Error::NotPsd { value: neg });
        }
        worst = 0.0;
        for i in 0..k {
            let r = a_ritz.column(i) - ritz.column(i) * theta[i];
            worst = f64::max(worst, r.norm());
        }
        if theta[0] == 0.0 || worst <= EIG_REL_TOL * lambda1 || p == n {
            let mut vectors = ritz.columns(0, k).into_owned();
            // Fix the sign so the largest-magnitude entry of each vector is positive.
            for mut col in vectors.column_iter_mut() {
                let (idx, _) = col.iter().enumerate().fold((0, 0.0), |best, (i, v)| {
                    if v.abs() > best.1 {
                        (i, v.abs())
                    } else {
                        best
                    }
                });
                if col[idx] < 0.0 {
                    col.neg_mut();
                }
            }
            return Ok(Eigenpairs {
                summary: SpectrumSummary::from_eigenvalues(theta[..k].to_vec()),
                vectors,
                iterations: iter,
            });
        }
        x = a_ritz.qr().q();
    }
    Err(Error::NoConvergence {
        iterations: EIG_MAX_ITERS,
        residual: worst,
    })
}

/// Full spectrum of a small operator through a dense symmetric solve.
pub fn dense_spectrum(op: &LinOp) -> Result<(Vec<f64>, DMatrix<f64>)> {
    require_square(op)?;
    Ok(sym_eig_desc(&op.materialize()?))
}

