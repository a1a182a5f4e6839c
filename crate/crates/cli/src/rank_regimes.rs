//! Effective ranks of the reduced NTK views for student-teacher RNNs at
//! initialization, over a grid of student gain and input rank.
//!
//! `ranks.csv`: `seed, family, g, input_rank, view, method, value, status`.
//! A sweep point whose forward pass leaves the finite range is kept as
//! `status = censored` with an empty value.

use gsntk::ntkops::recurrent_views;
use gsntk::numerics::sym_eig_desc;
use gsntk::rnla::{effective_rank, RankMethod};
use gsntk::tasks::{student_teacher, StudentTeacherConfig};
use gsntk::Error;

use crate::config::{RankRegimesConfig, TrainedFamily};
use crate::output::{int, num, Table};
use crate::stats::spearman;
use crate::{Check, CliError, RunOutput};

const METHODS: [(RankMethod, &str); 2] = [(RankMethod::ParticipationRatio, "pr"), (RankMethod::Variance95, "var95")];

/// Participation-ratio ranks `(temporal, spatial)`, or `None` when censored.
type Point = Option<(f64, f64)>;

pub fn run(cfg: &RankRegimesConfig, seed: u64) -> Result<RunOutput, CliError> {
    let mut table = Table::new(
        "ranks.csv",
        &["seed", "family", "g", "input_rank", "view", "method", "value", "status"],
    );
    // points[family][gain][rank]
    let mut points: Vec<Vec<Vec<Point>>> = Vec::new();
    for &fam in &cfg.families {
        let mut per_gain = Vec::new();
        for &g in &cfg.gains {
            let mut per_rank = Vec::new();
            for &r in &cfg.input_ranks {
                let st = StudentTeacherConfig {
                    family: fam.family(),
                    g_star: 1.0,
                    g,
                    n_in: cfg.n_in,
                    n_h: cfg.n_h,
                    n_out: cfg.n_out,
                    n_t: cfg.n_t,
                    batch: cfg.batch,
                    input_rank: Some(r),
                    seed,
                };
                let prefix = vec![seed.to_string(), fam.name().into(), num(g), int(r)];
                let st = student_teacher(&st)?;
                let views = match st.student.forward(&st.batch.x, None) {
                    Ok(tr) => Some(recurrent_views(&tr)?),
                    Err(Error::NonFiniteState { .. }) => None,
                    Err(e) => return Err(e.into()),
                };
                let Some(views) = views else {
                    for view in ["temporal", "spatial"] {
                        for (_, m) in METHODS {
                            let mut row = prefix.clone();
                            row.extend([view.into(), m.into(), String::new(), "censored".into()]);
                            table.push(row);
                        }
                    }
                    per_rank.push(None);
                    continue;
                };
                let mut pr = [0.0; 2];
                for (v, (view, mat)) in [("temporal", &views.temporal), ("spatial", &views.spatial)].into_iter().enumerate() {
                    let (eig, _) = sym_eig_desc(mat);
                    for (method, m) in METHODS {
                        let value = effective_rank(&eig, method);
                        if method == RankMethod::ParticipationRatio {
                            pr[v] = value;
                        }
                        let mut row = prefix.clone();
                        row.extend([view.into(), m.into(), num(value), "ok".into()]);
                        table.push(row);
                    }
                }
                per_rank.push(Some((pr[0], pr[1])));
            }
            per_gain.push(per_rank);
        }
        points.push(per_gain);
    }
    let checks = checks(cfg, &points);
    Ok(RunOutput {
        tables: vec![table],
        checks,
    })
}

fn checks(cfg: &RankRegimesConfig, points: &[Vec<Vec<Point>>]) -> Vec<Check> {
    let mut out = Vec::new();
    let family = |f: TrainedFamily| cfg.families.iter().position(|&x| x == f).map(|i| &points[i]);
    let full = cfg.input_ranks.iter().enumerate().max_by_key(|(_, &r)| r).map(|(i, _)| i);

    if let Some(pts) = family(TrainedFamily::In) {
        let (mut rank, mut temporal) = (Vec::new(), Vec::new());
        for per_rank in pts {
            for (ri, p) in per_rank.iter().enumerate() {
                if let Some((t, _)) = p {
                    rank.push(cfg.input_ranks[ri] as f64);
                    temporal.push(*t);
                }
            }
        }
        let rho = spearman(&rank, &temporal);
        out.push(Check::new(
            "input_rank_spearman",
            rho >= cfg.min_spearman,
            format!("Spearman(input rank, temporal rank) = {rho:.3} over {} points (min {})", rank.len(), cfg.min_spearman),
        ));
    }

    if let (Some(pts), Some(full)) = (family(TrainedFamily::Rec), full) {
        let at = |g: f64| cfg.gains.iter().position(|&x| x == g).and_then(|gi| pts[gi][full]);
        let (lo, hi) = cfg.spatial_gains;
        out.push(match (at(lo), at(hi)) {
            (Some((_, a)), Some((_, b))) => Check::new(
                "spatial_collapse",
                b < a,
                format!("spatial rank {b:.3} at g={hi} vs {a:.3} at g={lo}"),
            ),
            _ => Check::new("spatial_collapse", false, format!("g={lo} or g={hi} missing or censored")),
        });

        let curve: Vec<Option<f64>> = pts.iter().map(|per_rank| per_rank[full].map(|p| p.0)).collect();
        let detail = curve
            .iter()
            .zip(&cfg.gains)
            .map(|(v, g)| v.map_or(format!("g={g}: censored"), |v| format!("g={g}: {v:.3}")))
            .collect::<Vec<_>>()
            .join(", ");
        let vals: Vec<f64> = curve.iter().flatten().copied().collect();
        let interior = vals.len() == curve.len()
            && vals.len() >= 3
            && (1..vals.len() - 1).any(|i| vals[i] > vals[0] && vals[i] > vals[vals.len() - 1]);
        out.push(Check::new("temporal_interior_max", interior, detail));
    }
    out
}
