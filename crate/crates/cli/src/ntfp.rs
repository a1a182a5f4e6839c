//! Long-run behaviour of `h ↦ W tanh(h)` with added non-trivial fixed points.
//!
//! Tables:
//! - `endpoints.csv`: `m, g, start, cluster, pc1, pc2, pc3, final_norm`
//! - `trajectories.csv`: `m, g, start, step, pc1, pc2, pc3`
//! - `results.csv`: `seed, m, g, metric, value`
//!
//! Principal components are computed per `(m, g)` from all sampled states.

use gsntk::models::Activation;
use gsntk::numerics::sym_eig_desc;
use gsntk::rng::{gaussian_matrix, stream};
use gsntk::tasks::{autonomous_endpoints, default_ntfp_points, ntfp_weights, single_linkage};
use nalgebra::DMatrix;

use crate::config::NtfpConfig;
use crate::output::{int, num, Table};
use crate::{Check, CliError, RunOutput};

/// Top three principal directions of the columns of `samples`, sign-fixed
/// so the largest-magnitude entry is positive, and the mean.
fn principal_axes(samples: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.ncols() as f64;
    let mean = samples.column_mean();
    let centered = DMatrix::from_fn(samples.nrows(), samples.ncols(), |i, j| samples[(i, j)] - mean[i]);
    let (_, vecs) = sym_eig_desc(&(&centered * centered.transpose() / n));
    let k = 3.min(vecs.ncols());
    let mut axes = vecs.columns(0, k).into_owned();
    for mut c in axes.column_iter_mut() {
        let pivot = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            c.neg_mut();
        }
    }
    (axes, DMatrix::from_column_slice(mean.len(), 1, mean.as_slice()))
}

fn project(axes: &DMatrix<f64>, mean: &DMatrix<f64>, h: &DMatrix<f64>, j: usize) -> Vec<String> {
    let d = h.column(j) - mean.column(0);
    (0..3).map(|c| num(if c < axes.ncols() { axes.column(c).dot(&d) } else { 0.0 })).collect()
}

pub fn run(cfg: &NtfpConfig, seed: u64) -> Result<RunOutput, CliError> {
    let tau = cfg.cluster_distance.unwrap_or(cfg.point_scale);
    let mut endpoints = Table::new("endpoints.csv", &["m", "g", "start", "cluster", "pc1", "pc2", "pc3", "final_norm"]);
    let mut traj = Table::new("trajectories.csv", &["m", "g", "start", "step", "pc1", "pc2", "pc3"]);
    let mut results = Table::new("results.csv", &["seed", "m", "g", "metric", "value"]);
    let mut checks = Vec::new();
    let mut worst_residual = 0.0f64;
    let mut cluster_fail = Vec::new();
    for (mi, &m) in cfg.points.iter().enumerate() {
        let points = default_ntfp_points(cfg.n_h, m, cfg.point_scale)?;
        for (gi, &g) in cfg.gains.iter().enumerate() {
            let index = (mi * cfg.gains.len() + gi) as u32;
            let w = ntfp_weights(&mut stream(seed, 70, index), cfg.n_h, &points, Activation::Tanh, g)?;
            let residual = points
                .iter()
                .map(|p| {
                    let h = DMatrix::from_column_slice(cfg.n_h, 1, p);
                    (&w * Activation::Tanh.map(&h) - h).norm()
                })
                .fold(0.0f64, f64::max);
            worst_residual = worst_residual.max(residual);
            let starts = gaussian_matrix(&mut stream(seed, 71, index), cfg.n_h, cfg.starts) * cfg.start_sd;
            let e = autonomous_endpoints(&w, Activation::Tanh, &starts, cfg.steps, cfg.window, cfg.sample_stride)?;
            let labels = single_linkage(&e.averaged, tau);
            let clusters = labels.iter().max().map_or(0, |l| l + 1);
            let final_norms: Vec<f64> = e.last.column_iter().map(|c| c.norm()).collect();
            let max_final = final_norms.iter().copied().fold(0.0, f64::max);

            let all = DMatrix::from_columns(
                &e.samples.iter().flat_map(|s| s.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>(),
            );
            let (axes, mean) = principal_axes(&all);
            let (ms, gs) = (int(m), num(g));
            for j in 0..cfg.starts {
                let mut row = vec![ms.clone(), gs.clone(), int(j), int(labels[j])];
                row.extend(project(&axes, &mean, &e.averaged, j));
                row.push(num(final_norms[j]));
                endpoints.push(row);
                for (s, h) in e.samples.iter().enumerate() {
                    let mut row = vec![ms.clone(), gs.clone(), int(j), int(s * cfg.sample_stride)];
                    row.extend(project(&axes, &mean, h, j));
                    traj.push(row);
                }
            }
            for (metric, value) in [
                ("cluster_count", clusters as f64),
                ("expected_clusters", (1usize << m) as f64),
                ("max_fixed_point_residual", residual),
                ("max_final_norm", max_final),
            ] {
                results.push(vec![seed.to_string(), ms.clone(), gs.clone(), metric.into(), num(value)]);
            }
            if clusters != 1 << m {
                cluster_fail.push(format!("m={m} g={g}: {clusters} clusters"));
            }
            if m == 0 && g == 1.0 {
                checks.push(Check::new(
                    "origin_collapse",
                    max_final <= cfg.origin_tol,
                    format!("max final norm {max_final:.3e} (tol {:.0e})", cfg.origin_tol),
                ));
            }
        }
    }
    checks.insert(
        0,
        Check::new(
            "fixed_point_residual",
            worst_residual <= cfg.max_residual,
            format!("max |W tanh(h) - h| = {worst_residual:.3e} (tol {:.0e})", cfg.max_residual),
        ),
    );
    checks.insert(
        1,
        Check::new(
            "cluster_counts",
            cluster_fail.is_empty(),
            if cluster_fail.is_empty() {
                format!("2^m clusters for m in {:?}, g in {:?}", cfg.points, cfg.gains)
            } else {
                cluster_fail.join("; ")
            },
        ),
    );
    Ok(RunOutput {
        tables: vec![endpoints, traj, results],
        checks,
    })
}
