//! NTK rank of a single attention block plus MLP at initialization.
//!
//! Sweeps: input dimension by trial count, Fourier features of a scalar
//! input, and input dimension by attention width. The dominant temporal
//! modes come from two extra points on a wider network. Tables:
//! - `ranks.csv`: `seed, sweep, n_x, n_in, frequencies, n_attn, quantity, method, value`
//! - `modes.csv`: `seed, n_in, mode, eigenvalue, j, t, value` (dominant
//!   temporal modes at the smallest and largest input dimension)

use gsntk::models::AttnMlp;
use gsntk::models::AttnTrace;
use gsntk::ntkops::attn_views;
use gsntk::numerics::{numerical_rank, sym_eig_desc};
use gsntk::rng::{gaussian_matrix, stream};
use gsntk::rnla::{effective_rank, RankMethod};
use gsntk::tasks::fourier_embed;
use gsntk::Tensor3;
use nalgebra::DMatrix;

use crate::config::TransformerRankConfig;
use crate::output::{int, num, Table};
use crate::{Check, CliError, RunOutput};

#[derive(Clone, Copy)]
struct Point {
    sweep: &'static str,
    n_x: usize,
    n_in: usize,
    frequencies: usize,
    n_attn: usize,
    n_mlp: usize,
    layers: usize,
}

struct Measured {
    temporal: Vec<f64>,
    temporal_vectors: DMatrix<f64>,
    spatial: Vec<f64>,
    full: Option<Vec<f64>>,
    core: Vec<f64>,
    core_rank: usize,
    bound: usize,
}

/// Eigenvalues of `J Jᵀ` through the smaller of the two Gram matrices.
fn gram_spectrum(j: &DMatrix<f64>) -> Vec<f64> {
    let g = if j.nrows() <= j.ncols() { j * j.transpose() } else { j.transpose() * j };
    sym_eig_desc(&g).0
}

/// Fraction of the energy of a `(j, t)` vector carried by its time means.
fn time_constancy(v: &[f64], n_t: usize) -> f64 {
    let total: f64 = v.iter().map(|x| x * x).sum();
    let held: f64 = v.chunks(n_t).map(|c| c.iter().sum::<f64>().powi(2) / n_t as f64).sum();
    held / total
}

/// Parameter Jacobian of the global state, one column per parameter.
fn state_jacobian(tr: &AttnTrace) -> Result<DMatrix<f64>, CliError> {
    let zero = tr.param_zeros();
    let dim = zero.to_vec().len();
    let mut e = vec![0.0; dim];
    let mut cols = Vec::with_capacity(dim);
    for p in 0..dim {
        e[p] = 1.0;
        let y = tr.jvp_params(&zero.from_vec_like(&e))?;
        cols.push(nalgebra::DVector::from_column_slice(y.as_slice()));
        e[p] = 0.0;
    }
    Ok(DMatrix::from_columns(&cols))
}

fn measure(cfg: &TransformerRankConfig, seed: u64, index: u32, p: Point, full: bool) -> Result<Measured, CliError> {
    let raw_in = if p.sweep == "fourier" { 1 } else { p.n_in };
    let rows = gaussian_matrix(&mut stream(seed, 90, index), p.n_x * cfg.n_t, raw_in);
    let mut x = Tensor3::from_rows(p.n_x, cfg.n_t, &rows);
    if p.sweep == "fourier" {
        x = fourier_embed(&x, p.frequencies)?;
    }
    let model = AttnMlp::xavier(&mut stream(seed, 91, index), x.n, p.n_attn, p.n_mlp, cfg.n_out, p.layers, 1.0)?;
    let tr = model.forward(&x)?;
    let views = attn_views(&tr)?;
    let (temporal, temporal_vectors) = sym_eig_desc(&views.temporal);
    let (spatial, _) = sym_eig_desc(&views.spatial);
    let sites = tr.weight_sites();
    let core = gram_spectrum(&sites.v);
    Ok(Measured {
        temporal,
        temporal_vectors,
        spatial,
        full: if full { Some(gram_spectrum(&state_jacobian(&tr)?)) } else { None },
        core,
        core_rank: numerical_rank(&sites.v, cfg.rank_tol),
        bound: 3 * x.n + p.n_attn + (p.layers - 1) * p.n_mlp,
    })
}

pub fn run(cfg: &TransformerRankConfig, seed: u64) -> Result<RunOutput, CliError> {
    let base = |sweep, n_x, n_in| Point {
        sweep,
        n_x,
        n_in,
        frequencies: 0,
        n_attn: cfg.n_attn,
        n_mlp: cfg.n_mlp,
        layers: cfg.layers,
    };
    let mut points = Vec::new();
    for &n_x in &cfg.n_x {
        for &n_in in &cfg.n_in {
            points.push(base("n_in", n_x, n_in));
        }
    }
    for &f in &cfg.frequencies {
        let n_in = if f == 0 { 1 } else { 2 * f };
        points.push(Point { frequencies: f, ..base("fourier", cfg.base_n_x, n_in) });
    }
    for &n_in in &cfg.width_n_in {
        for &w in &cfg.widths {
            points.push(Point { n_attn: w, ..base("width", cfg.base_n_x, n_in) });
        }
    }
    let (lo_in, hi_in) = (cfg.n_in.iter().min().copied(), cfg.n_in.iter().max().copied());
    let mut mode_in: Vec<usize> = lo_in.into_iter().chain(hi_in).collect();
    mode_in.dedup();
    for n_in in mode_in {
        points.push(Point {
            n_attn: cfg.mode_n_attn,
            n_mlp: cfg.mode_n_mlp,
            layers: cfg.mode_layers,
            ..base("mode", cfg.base_n_x, n_in)
        });
    }

    let mut ranks = Table::new(
        "ranks.csv",
        &["seed", "sweep", "n_x", "n_in", "frequencies", "n_attn", "quantity", "method", "value"],
    );
    let mut modes = Table::new("modes.csv", &["seed", "n_in", "mode", "eigenvalue", "j", "t", "value"]);
    let mut bound_violations = Vec::new();
    let mut temporal_pr = Vec::new();
    let mut ratio = None;
    for (index, &p) in points.iter().enumerate() {
        let m = measure(cfg, seed, index as u32, p, p.sweep == "width")?;
        let prefix = [seed.to_string(), p.sweep.into(), int(p.n_x), int(p.n_in), int(p.frequencies), int(p.n_attn)];
        let mut push = |quantity: &str, method: &str, value: f64| {
            let mut row = prefix.to_vec();
            row.extend([quantity.into(), method.into(), num(value)]);
            ranks.push(row);
        };
        let mut spectra = vec![("temporal", &m.temporal), ("core_temporal", &m.core)];
        if p.sweep == "width" {
            spectra.push(("spatial", &m.spatial));
        }
        if let Some(f) = &m.full {
            spectra.push(("full", f));
        }
        for (q, eig) in spectra {
            push(q, "pr", effective_rank(eig, RankMethod::ParticipationRatio));
            push(q, "var95", effective_rank(eig, RankMethod::Variance95));
        }
        push("core_rank", "numerical", m.core_rank as f64);
        push("core_rank_bound", "formula", m.bound as f64);
        if m.core_rank > m.bound {
            bound_violations.push(format!("{} n_x={} n_in={} n_attn={}: {} > {}", p.sweep, p.n_x, p.n_in, p.n_attn, m.core_rank, m.bound));
        }
        temporal_pr.push(effective_rank(&m.temporal, RankMethod::ParticipationRatio));

        if p.sweep == "mode" {
            if Some(p.n_in) == lo_in {
                let lead: Vec<f64> = m.temporal_vectors.column(0).iter().copied().collect();
                ratio = Some((
                    m.temporal.get(1).copied().unwrap_or(0.0).max(0.0) / m.temporal[0],
                    time_constancy(&lead, cfg.n_t),
                ));
            }
            for k in 0..cfg.export_modes.min(m.temporal.len()) {
                let v = m.temporal_vectors.column(k);
                for row in 0..v.len() {
                    modes.push(vec![
                        seed.to_string(),
                        int(p.n_in),
                        int(k + 1),
                        num(m.temporal[k]),
                        int(row / cfg.n_t),
                        int(row % cfg.n_t),
                        num(v[row]),
                    ]);
                }
            }
        }
    }

    let mut checks = vec![Check::new(
        "core_rank_bound",
        bound_violations.is_empty(),
        if bound_violations.is_empty() {
            format!("rank(V) within 3 n_in + n_attn + (L-1) n_mlp at all {} points", points.len())
        } else {
            bound_violations.join("; ")
        },
    )];
    let increasing = |sweep: &str, n_x: usize| -> (bool, String) {
        let vals: Vec<f64> = points
            .iter()
            .zip(&temporal_pr)
            .filter(|(p, _)| p.sweep == sweep && p.n_x == n_x)
            .map(|(_, &v)| v)
            .collect();
        let ok = vals.windows(2).all(|w| w[1] > w[0]);
        (ok, vals.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" < "))
    };
    let mut ok_all = true;
    let mut details = Vec::new();
    for &n_x in &cfg.n_x {
        let (ok, d) = increasing("n_in", n_x);
        ok_all &= ok;
        details.push(format!("n_x={n_x}: {d}"));
    }
    checks.push(Check::new("temporal_rank_vs_n_in", ok_all, details.join("; ")));
    let (ok, d) = increasing("fourier", cfg.base_n_x);
    checks.push(Check::new("temporal_rank_vs_fourier", ok, d));
    if let Some((r, c)) = ratio {
        checks.push(Check::new(
            "single_dominant_mode",
            r < cfg.max_mode_ratio && c >= cfg.min_mode_constancy,
            format!(
                "lambda2/lambda1 = {r:.3e} (max {}), time-mean energy {c:.3} (min {}) at n_in={}, n_attn={}, n_mlp={}, L={}",
                cfg.max_mode_ratio,
                cfg.min_mode_constancy,
                lo_in.unwrap_or(0),
                cfg.mode_n_attn,
                cfg.mode_n_mlp,
                cfg.mode_layers
            ),
        ));
    } else {
        checks.push(Check::new("single_dominant_mode", false, "empty n_in grid"));
    }
    Ok(RunOutput {
        tables: vec![ranks, modes],
        checks,
    })
}
