//! Numerical oracle suite: kernel identities, rank bounds, derivative checks
//! and estimator accuracy.
//!
//! `verify.csv`: `seed, check, case, value, tolerance, passed`, one row per
//! measured case; `checks` aggregates them per property.

use std::sync::Arc;

use gsntk::models::{fd_check, AttnMlp, Family, Gru, Recurrent, Rnn, Update};
use gsntk::ntkops::{
    core_filter_norm, delta_h_rank_check, global_ntk, lifted_adjoint, param_jacobian, param_jacobian_fd, quadratic_form,
    verify_core, NtkMode,
};
use gsntk::numerics::{rel_err, rel_err_mat, sym_eig_desc};
use gsntk::rng::{gaussian_matrix, gaussian_vec, random_psd, stream, Rng64};
use gsntk::rnla::{hutchpp_trace, topk_eigs, ProbeConfig};
use gsntk::tasks::{default_ntfp_points, ntfp_weights};
use gsntk::{DomainShape, LinOp, Tensor3};
use nalgebra::DMatrix;

use crate::config::VerifyConfig;
use crate::output::{num, Table};
use crate::{Check, CliError, RunOutput};

struct Recorder {
    seed: u64,
    table: Table,
    checks: Vec<Check>,
}

impl Recorder {
    /// Records cases `(name, value)` against `value <= tol` and adds one check.
    fn cases(&mut self, check: &str, tol: f64, cases: Vec<(String, f64)>) {
        let mut worst = (String::new(), f64::NEG_INFINITY);
        let mut failed = 0;
        for (case, v) in &cases {
            let ok = *v <= tol;
            failed += usize::from(!ok);
            if *v > worst.1 || v.is_nan() {
                worst = (case.clone(), *v);
            }
            self.table.push(vec![
                self.seed.to_string(),
                check.into(),
                case.clone(),
                num(if v.is_finite() { *v } else { f64::MAX }),
                num(tol),
                ok.to_string(),
            ]);
        }
        self.checks.push(Check::new(
            check,
            failed == 0 && !cases.is_empty(),
            format!("{} cases, {failed} failed, worst {} = {:.3e} (tol {tol:.0e})", cases.len(), worst.0, worst.1),
        ));
    }
}

fn input(rng: &mut Rng64, n_x: usize, n_t: usize, n_in: usize) -> Tensor3 {
    Tensor3::from_rows(n_x, n_t, &gaussian_matrix(rng, n_x * n_t, n_in))
}

/// The materializable models: RNN (both update rules) and GRU with
/// `n_x = 3, n_t = 5, n_h = 4, n_in = 2`.
fn tiny_models(seed: u64) -> Result<Vec<(&'static str, Arc<dyn Recurrent>)>, CliError> {
    let mut out: Vec<(&'static str, Arc<dyn Recurrent>)> = Vec::new();
    for (i, (name, update)) in [("rnn-pre", Update::PreActivation), ("rnn-post", Update::PostActivation)].into_iter().enumerate() {
        let mut m = Rnn::xavier(&mut stream(seed, 100, i as u32), 2, 4, 1, 1.3);
        m.update = update;
        let x = input(&mut stream(seed, 101, i as u32), 3, 5, 2);
        out.push((name, Arc::new(m.forward(&x, None)?)));
    }
    let m = Gru::xavier(&mut stream(seed, 100, 2), 2, 4, 1, 1.5);
    let x = input(&mut stream(seed, 101, 2), 3, 5, 2);
    out.push(("gru", Arc::new(m.forward(&x, None)?)));
    Ok(out)
}

/// Sum of `m[(a, i), (b, i)]` over the traced axes of a `(n_x, n_t, n)` state,
/// divided by their extent; `spatial` keeps the neuron axis.
fn dense_view(m: &DMatrix<f64>, dims: [usize; 3], spatial: bool) -> DMatrix<f64> {
    let (k, n) = (dims[0] * dims[1], dims[2]);
    if spatial {
        DMatrix::from_fn(n, n, |i, l| (0..k).map(|a| m[(a * n + i, a * n + l)]).sum::<f64>() / k as f64)
    } else {
        DMatrix::from_fn(k, k, |a, b| (0..n).map(|i| m[(a * n + i, b * n + i)]).sum::<f64>() / n as f64)
    }
}

pub fn run(cfg: &VerifyConfig, seed: u64) -> Result<RunOutput, CliError> {
    let mut rec = Recorder {
        seed,
        table: Table::new("verify.csv", &["seed", "check", "case", "value", "tolerance", "passed"]),
        checks: Vec::new(),
    };
    let models = tiny_models(seed)?;

    let mut core_eq = Vec::new();
    let mut gram = Vec::new();
    let mut gram_fd = Vec::new();
    let mut filter = Vec::new();
    for (name, tr) in &models {
        let direct = global_ntk(tr.clone(), NtkMode::Direct)?;
        let dm = direct.ntk.materialize()?;
        let lm = global_ntk(tr.clone(), NtkMode::Lifted)?.ntk.materialize()?;
        core_eq.push((name.to_string(), rel_err_mat(&lm, &dm)));

        let jac = param_jacobian(tr.as_ref())?;
        let err = gaussian_vec(&mut stream(seed, 102, 0), dm.nrows());
        let e = DMatrix::from_column_slice(err.len(), 1, &err);
        gram.push((name.to_string(), rel_err(&direct.ntk.apply(&err), (&jac * (jac.transpose() * &e)).as_slice())));
        gram_fd.push((name.to_string(), rel_err_mat(&jac, &param_jacobian_fd(tr.as_ref(), 1e-6)?)));

        for s in 0..cfg.random_errors {
            let err = gaussian_vec(&mut stream(seed, 103, s as u32), dm.nrows());
            let lhs = quadratic_form(&direct.ntk, &err);
            let rhs = core_filter_norm(&direct.sites, &lifted_adjoint(tr.clone(), &err)?)?;
            filter.push((format!("{name}/{s}"), (lhs - rhs).abs() / lhs.abs().max(rhs.abs())));
        }
    }
    rec.cases("core_equality", 1e-8, core_eq);
    rec.cases("jacobian_gram_oracle", 1e-8, gram);
    rec.cases("jacobian_fd_oracle", 1e-4, gram_fd);
    rec.cases("adjoint_filter_identity", 1e-8, filter);

    let desk = {
        let m = Gru::xavier(&mut stream(seed, 104, 0), 3, 32, 3, 1.0);
        let tr: Arc<dyn Recurrent> = Arc::new(m.forward(&input(&mut stream(seed, 104, 1), 4, 20, 3), None)?);
        let d = global_ntk(tr.clone(), NtkMode::Direct)?.ntk;
        let l = global_ntk(tr, NtkMode::Lifted)?.ntk;
        verify_core(&d, &l, &ProbeConfig::new(8, 8, seed)?)?
    };
    rec.cases("core_equality_desk_probe", 1e-6, vec![("gru n_h=32".into(), desk)]);

    let mut bottleneck = Vec::new();
    for s in 0..cfg.rank_instances as u64 {
        let mut rng = stream(seed, 105, s as u32);
        let n_h = 2 + (s % 3) as usize;
        let n_in = 1 + (s % 2) as usize;
        let (n_x, n_t) = (1 + (s % 3) as usize, 2 + (s % 4) as usize);
        let x = input(&mut rng, n_x, n_t, n_in);
        let gain = 0.5 + (s % 5) as f64 * 0.5;
        let tr: Arc<dyn Recurrent> = if s % 2 == 0 {
            let mut m = Rnn::xavier(&mut rng, n_in, n_h, 1, gain);
            if s % 4 == 0 {
                m.trainable = vec![Family::In];
            }
            Arc::new(m.forward(&x, None)?)
        } else {
            let mut m = Gru::xavier(&mut rng, n_in, n_h, 1, gain);
            if s % 3 == 0 {
                m.trainable = vec![Family::Rec];
            }
            Arc::new(m.forward(&x, None)?)
        };
        let ntk = global_ntk(tr, NtkMode::Direct)?.ntk;
        let err = gaussian_vec(&mut rng, ntk.domain().dim());
        let r = delta_h_rank_check(&ntk, &err)?;
        let excess = r.delta_h as f64 - r.temporal.min(r.spatial) as f64;
        bottleneck.push((format!("instance {s}"), excess));
    }
    rec.cases("space_time_bottleneck", 0.0, bottleneck);

    let mut grads = Vec::new();
    for (name, tr) in &models {
        grads.push((name.to_string(), fd_check(tr.as_ref(), 1e-6, seed).max()));
    }
    for (layers, heads) in [(1, 1), (2, 1), (3, 1), (2, 2)] {
        let mut m = AttnMlp::xavier(&mut stream(seed, 106, layers as u32), 3, 4, 5, 2, layers, 1.0)?;
        m.heads = heads;
        let tr = m.forward(&input(&mut stream(seed, 107, layers as u32), 2, 5, 3))?;
        let mut rng = stream(seed, 108, layers as u32);
        let mut dtheta = tr.param_zeros();
        for (_, w) in dtheta.iter_mut() {
            *w = gaussian_matrix(&mut rng, w.nrows(), w.ncols());
        }
        let eps = 1e-6;
        let (mut plus, mut minus) = (dtheta.clone(), dtheta.clone());
        plus.scale(eps);
        minus.scale(-eps);
        let fd: Vec<f64> = tr
            .state_shifted(&plus)
            .as_slice()
            .iter()
            .zip(tr.state_shifted(&minus).as_slice())
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        grads.push((format!("attention L={layers} heads={heads}"), rel_err(tr.jvp_params(&dtheta)?.as_slice(), &fd)));
        let u = Tensor3::from_rows(2, 5, &gaussian_matrix(&mut rng, 10, m.state_width()));
        let lhs: f64 = tr.jvp_params(&dtheta)?.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum();
        let rhs = dtheta.dot(&tr.vjp_params(&u));
        grads.push((format!("attention L={layers} heads={heads} vjp"), (lhs - rhs).abs() / lhs.abs().max(rhs.abs())));
    }
    rec.cases("gradient_checks", 1e-6, grads);

    estimators(cfg, seed, &mut rec)?;

    let points = default_ntfp_points(64, 5, 3.0)?;
    let w = ntfp_weights(&mut stream(seed, 109, 0), 64, &points, gsntk::models::Activation::Tanh, 1.5)?;
    let residual = points
        .iter()
        .map(|p| {
            let h = DMatrix::from_column_slice(64, 1, p);
            (&w * h.map(f64::tanh) - h).norm()
        })
        .fold(0.0, f64::max);
    rec.cases("ntfp_residual", 1e-10, vec![("n=64 m=5".into(), residual)]);

    Ok(RunOutput {
        tables: vec![rec.table],
        checks: rec.checks,
    })
}

fn estimators(cfg: &VerifyConfig, seed: u64, rec: &mut Recorder) -> Result<(), CliError> {
    let mut exact = Vec::new();
    for r in [1, 3, 8, 16] {
        let v = gaussian_matrix(&mut stream(seed, 110, r as u32), 60, r);
        let op = LinOp::dense_psd(&v * v.transpose())?;
        let t = hutchpp_trace(&op, &ProbeConfig::new(16, 4, seed)?)?;
        exact.push((format!("rank {r}, sketch 16"), (t - v.norm_squared()).abs() / v.norm_squared()));
    }
    rec.cases("hutchpp_low_rank_exact", 1e-9, exact);

    let m = random_psd(&mut stream(seed, 111, 0), cfg.psd_dim, cfg.psd_dim);
    let tr = m.trace();
    let op = LinOp::dense_psd(m)?;
    let mut hits = 0;
    let mut errs = Vec::new();
    for s in 0..cfg.psd_trials {
        let t = hutchpp_trace(&op, &ProbeConfig::default().with_seed(seed * 1000 + s as u64))?;
        let e = (t - tr).abs() / tr;
        hits += usize::from(e <= cfg.psd_rel_tol);
        errs.push(e);
    }
    for (s, e) in errs.iter().enumerate() {
        rec.table.push(vec![
            seed.to_string(),
            "hutchpp_random_psd".into(),
            format!("trial {s}"),
            num(*e),
            num(cfg.psd_rel_tol),
            (*e <= cfg.psd_rel_tol).to_string(),
        ]);
    }
    rec.checks.push(Check::new(
        "hutchpp_random_psd",
        hits >= cfg.psd_min_pass,
        format!("{hits}/{} trials within {}% (need {})", cfg.psd_trials, 100.0 * cfg.psd_rel_tol, cfg.psd_min_pass),
    ));

    let mut partial = Vec::new();
    for (i, dims) in [[2, 3, 2], [3, 4, 5], [1, 6, 3]].into_iter().enumerate() {
        let n = dims.iter().product();
        let m = random_psd(&mut stream(seed, 112, i as u32), n, n);
        let shape = DomainShape::state(dims[0], dims[1], dims[2]);
        let op = LinOp::dense_shaped(m.clone(), shape.clone(), shape, true)?;
        let temporal = op.partial_average(&[2])?.materialize()?;
        let spatial = op.partial_average(&[0, 1])?.materialize()?;
        partial.push((format!("{dims:?} temporal"), rel_err_mat(&temporal, &dense_view(&m, dims, false))));
        partial.push((format!("{dims:?} spatial"), rel_err_mat(&spatial, &dense_view(&m, dims, true))));
    }
    rec.cases("partial_average", 1e-10, partial);

    let mut topk = Vec::new();
    for (i, (n, r)) in [(50, 50), (120, 20), (300, 40)].into_iter().enumerate() {
        let m = random_psd(&mut stream(seed, 113, i as u32), n, r);
        let (dense, _) = sym_eig_desc(&m);
        let res = topk_eigs(&LinOp::dense_psd(m)?, 6, &ProbeConfig::default().with_seed(seed))?;
        let worst = (0..6)
            .map(|k| (res.summary.eigenvalues[k] - dense[k]).abs() / dense[k])
            .fold(0.0, f64::max);
        topk.push((format!("n={n} rank={r}"), worst));
    }
    rec.cases("topk_eigs", 1e-6, topk);
    Ok(())
}
