//! Memory-Pro experiments on GRUs.
//!
//! Network 1 is a Xavier GRU; Network 2 has the same shape with a set of
//! non-trivial fixed points inserted in its recurrent weights.
//!
//! `core-alignment` trains Network 1 with SGD and at each checkpoint compares
//! the NTK with its core and with a random PSD operator of equal trace:
//! - `alignment.csv`: `seed, iteration, metric, value`
//! - `cumvar.csv`: `seed, iteration, operator, mode, value`
//! - `modes.csv`: `seed, iteration, mode, eigenvalue, j, t, value`
//!
//! `selfref` trains Network 1 and Network 2 with SGD and Network 1 with the
//! Kronecker-factored preconditioner, for several seeds:
//! - `training.csv`: `seed, network, optimizer, iteration, metric, value`
//! - `loss_curve.csv`: `seed, network, optimizer, iteration, loss`

use std::f64::consts::PI;
use std::sync::Arc;

use gsntk::models::{Gru, Recurrent};
use gsntk::ntkops::{core_with_replication, global_ntk, propagator_temporal_gram, recurrent_views, target_alignment_dense, NtkMode};
use gsntk::numerics::sym_eig_desc;
use gsntk::rng::{gaussian_matrix, stream, uniform};
use gsntk::rnla::{cumulative_variance, effective_rank, op_cosine, ProbeConfig, RankMethod};
use gsntk::tasks::{
    default_ntfp_points, gru_with_ntfp, memory_pro_angles, memory_pro_batch, target_modes, train, MemoryProConfig,
    Optimizer, TaskBatch, TargetModes, TrainConfig, TrainLog, TrainModel,
};
use gsntk::{DomainShape, LinOp};
use nalgebra::DMatrix;

use crate::config::{CoreAlignmentConfig, MemoryProSettings, SelfrefConfig};
use crate::output::{int, num, Table};
use crate::{Check, CliError, RunOutput};

/// Leading entries of each cumulative-variance curve written out.
const CUMVAR_MODES: usize = 20;

fn task(s: &MemoryProSettings, n_x: usize, seed: u64) -> MemoryProConfig {
    MemoryProConfig {
        n_x,
        n_t: 3 * s.phase,
        stimulus: s.phase,
        memory: s.phase,
        response: s.phase,
        noise_var: s.noise_var,
        mask_response: s.mask_response,
        seed,
    }
}

/// Clean evaluation batch on the seed's fixed angles.
fn eval_batch(s: &MemoryProSettings, seed: u64) -> Result<TaskBatch, CliError> {
    let cfg = task(s, s.n_x, seed);
    Ok(memory_pro_batch(&cfg, &memory_pro_angles(&cfg), None)?)
}

/// Fresh noisy trials for training step `i`.
fn train_batch(s: &MemoryProSettings, seed: u64, i: usize) -> gsntk::Result<TaskBatch> {
    let cfg = task(s, s.train_batch, seed);
    let mut rng = stream(seed, 50, 1 + i as u32);
    let angles: Vec<f64> = (0..s.train_batch).map(|_| uniform(&mut rng, 0.0, 2.0 * PI)).collect();
    memory_pro_batch(&cfg, &angles, (s.noise_var > 0.0).then_some(i as u32))
}

fn network1(s: &MemoryProSettings, seed: u64) -> Gru {
    Gru::xavier(&mut stream(seed, 80, 0), 3, s.n_h, 3, s.gain)
}

fn network2(s: &MemoryProSettings, seed: u64) -> Result<Gru, CliError> {
    let points = default_ntfp_points(s.n_h, s.ntfp_points, s.ntfp_scale)?;
    Ok(gru_with_ntfp(&mut stream(seed, 81, 0), 3, s.n_h, 3, s.gain, &points)?)
}

fn train_config(iterations: usize, checkpoints: usize, lr: f64, optimizer: Optimizer) -> TrainConfig {
    TrainConfig {
        iterations,
        lr,
        optimizer,
        log_every: (iterations / checkpoints).max(1),
    }
}

/// Kernel-target alignment of the temporal NTK with each target mode.
fn ntk_alignments(tr: &dyn Recurrent, modes: &TargetModes) -> Result<Vec<f64>, CliError> {
    let views = recurrent_views(tr)?;
    modes
        .modes
        .column_iter()
        .map(|u| Ok(target_alignment_dense(&views.temporal, u.as_slice())?))
        .collect()
}

/// Random `R Rᵀ ⊗ I_n` with `R` of the core's shape, scaled to the core's trace.
fn random_psd_like(v: &DMatrix<f64>, n: usize, seed: u64, index: u32) -> Result<LinOp, CliError> {
    let r = gaussian_matrix(&mut stream(seed, 95, index), v.nrows(), v.ncols());
    let c = v.norm_squared() / r.norm_squared();
    let gram = LinOp::dense_psd(&r * r.transpose() * c)?;
    Ok(gram.tensor_product(&LinOp::identity(DomainShape::flat(n))))
}

pub fn core_alignment(cfg: &CoreAlignmentConfig, seed: u64) -> Result<RunOutput, CliError> {
    let s = &cfg.task;
    let eval = eval_batch(s, seed)?;
    let resp = task(s, s.n_x, seed).response_start();
    let n_t = 3 * s.phase;
    let probes = ProbeConfig::new(cfg.probes.sketch, cfg.probes.residual, seed)?;
    let mut alignment = Table::new("alignment.csv", &["seed", "iteration", "metric", "value"]);
    let mut cumvar = Table::new("cumvar.csv", &["seed", "iteration", "operator", "mode", "value"]);
    let mut modes = Table::new("modes.csv", &["seed", "iteration", "mode", "eigenvalue", "j", "t", "value"]);
    let mut beats = Vec::new();
    let mut init = None;

    let mut observe = |it: usize, model: &Gru| -> gsntk::Result<()> {
        let tr: Arc<dyn Recurrent> = Arc::new(model.forward(&eval.x, None)?);
        let bundle = global_ntk(tr.clone(), NtkMode::Direct)?;
        let n = tr.n_h();
        let core = core_with_replication(&bundle.sites, n)?;
        let shape = core.domain().clone();
        let random = random_psd_like(&bundle.sites.v, n, seed, it as u32)
            .map_err(|e| gsntk::Error::InvalidArgument(e.to_string()))?
            .reshape(shape.clone(), shape)?;
        let cos_core = op_cosine(&bundle.ntk, &core, &probes)?;
        let cos_random = op_cosine(&bundle.ntk, &random, &probes)?;
        let sid = seed.to_string();
        for (m, v) in [("cos_ntk_core", cos_core), ("cos_ntk_random_psd", cos_random)] {
            alignment.push(vec![sid.clone(), int(it), m.into(), num(v)]);
        }
        beats.push((it, cos_core, cos_random));

        let (ntk_eig, ntk_vec) = sym_eig_desc(&recurrent_views(tr.as_ref())?.temporal);
        let (core_eig, _) = sym_eig_desc(&bundle.sites.gram());
        let (p_eig, _) = sym_eig_desc(&propagator_temporal_gram(tr.as_ref()));
        for (name, eig) in [("ntk", &ntk_eig), ("core", &core_eig), ("propagator", &p_eig)] {
            for (k, v) in cumulative_variance(eig).iter().take(CUMVAR_MODES).enumerate() {
                cumvar.push(vec![sid.clone(), int(it), name.into(), int(k + 1), num(*v)]);
            }
        }
        for k in 0..cfg.export_modes.min(ntk_eig.len()) {
            for row in 0..ntk_vec.nrows() {
                modes.push(vec![
                    sid.clone(),
                    int(it),
                    int(k + 1),
                    num(ntk_eig[k]),
                    int(row / n_t),
                    int(row % n_t),
                    num(ntk_vec[(row, k)]),
                ]);
            }
        }
        if it == 0 {
            let v = ntk_vec.column(0);
            let total = v.norm_squared();
            let late: f64 = (0..v.len()).filter(|r| r % n_t >= resp).map(|r| v[r] * v[r]).sum();
            init = Some((effective_rank(&core_eig, RankMethod::Variance95), late / total));
        }
        Ok(())
    };
    let mut model = network1(s, seed);
    let tc = train_config(cfg.iterations, cfg.checkpoints, cfg.lr, Optimizer::Sgd);
    train(&mut model, &mut |i| train_batch(s, seed, i), &eval, &tc, &mut observe)?;

    let losing: Vec<String> = beats
        .iter()
        .filter(|(_, c, r)| c <= r)
        .map(|(it, c, r)| format!("iteration {it}: {c:.3} <= {r:.3}"))
        .collect();
    let detail = beats
        .iter()
        .map(|(it, c, r)| format!("{it}: {c:.3} vs {r:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut checks = vec![Check::new(
        "core_beats_random_psd",
        losing.is_empty(),
        if losing.is_empty() { detail } else { losing.join("; ") },
    )];
    let (modes95, energy) = init.expect("checkpoint at iteration 0");
    checks.push(Check::new(
        "core_modes_95",
        modes95 <= cfg.max_core_modes_95 as f64,
        format!("core reaches 95% variance in {modes95} modes (max {})", cfg.max_core_modes_95),
    ));
    checks.push(Check::new(
        "mode1_response_energy",
        energy < cfg.max_response_energy,
        format!("leading NTK mode has {:.2}% of its energy in the response period (max {}%)", 100.0 * energy, 100.0 * cfg.max_response_energy),
    ));
    Ok(RunOutput {
        tables: vec![alignment, cumvar, modes],
        checks,
    })
}

struct Run {
    seed: u64,
    network: &'static str,
    optimizer: &'static str,
    log: TrainLog,
    ntk: Vec<(usize, Vec<f64>)>,
}

fn train_run(
    cfg: &SelfrefConfig,
    seed: u64,
    network: &'static str,
    model: Gru,
    optimizer: Optimizer,
    lr: f64,
    eval: &TaskBatch,
    modes: &TargetModes,
) -> Result<Run, CliError> {
    let s = &cfg.task;
    let mut model = model;
    let mut ntk = Vec::new();
    let mut observe = |it: usize, m: &Gru| -> gsntk::Result<()> {
        let tr = m.trace(&eval.x)?;
        let a = ntk_alignments(tr.as_ref(), modes).map_err(|e| gsntk::Error::InvalidArgument(e.to_string()))?;
        ntk.push((it, a));
        Ok(())
    };
    let tc = train_config(cfg.iterations, cfg.checkpoints, lr, optimizer);
    let log = train(&mut model, &mut |i| train_batch(s, seed, i), eval, &tc, &mut observe)?;
    let optimizer = match optimizer {
        Optimizer::Sgd => "sgd",
        Optimizer::Kfp { .. } => "kfp",
    };
    Ok(Run {
        seed,
        network,
        optimizer,
        log,
        ntk,
    })
}

pub fn selfref(cfg: &SelfrefConfig, seed: u64) -> Result<RunOutput, CliError> {
    let s = &cfg.task;
    let mut training = Table::new("training.csv", &["seed", "network", "optimizer", "iteration", "metric", "value"]);
    let mut curve = Table::new("loss_curve.csv", &["seed", "network", "optimizer", "iteration", "loss"]);
    let mut runs = Vec::new();
    for k in 0..cfg.seeds_per_run as u64 {
        let sub = seed + k;
        let eval = eval_batch(s, sub)?;
        let modes = target_modes(&eval.y)?;
        let (n1, n2) = (network1(s, sub), network2(s, sub)?);
        runs.push(train_run(cfg, sub, "n1", n1.clone(), Optimizer::Sgd, cfg.lr, &eval, &modes)?);
        runs.push(train_run(cfg, sub, "n2", n2, Optimizer::Sgd, cfg.lr, &eval, &modes)?);
        let kfp = Optimizer::Kfp { damping: cfg.kfp_damping };
        runs.push(train_run(cfg, sub, "n1", n1, kfp, cfg.kfp_lr, &eval, &modes)?);
    }
    for r in &runs {
        let prefix = [r.seed.to_string(), r.network.into(), r.optimizer.into()];
        for c in &r.log.checkpoints {
            let mut push = |metric: String, v: f64| {
                let mut row = prefix.to_vec();
                row.extend([int(c.iteration), metric, num(v)]);
                training.push(row);
            };
            push("eval_loss".into(), c.eval_loss);
            for (m, a) in c.alignments.iter().enumerate() {
                push(format!("target_alignment_{}", m + 1), *a);
            }
        }
        for (it, a) in &r.ntk {
            for (m, v) in a.iter().enumerate() {
                let mut row = prefix.to_vec();
                row.extend([int(*it), format!("ntk_alignment_{}", m + 1), num(*v)]);
                training.push(row);
            }
        }
        for (it, l) in r.log.loss.iter().enumerate() {
            let mut row = prefix.to_vec();
            row.extend([int(it), num(*l)]);
            curve.push(row);
        }
    }
    Ok(RunOutput {
        checks: selfref_checks(cfg, &runs),
        tables: vec![training, curve],
    })
}

fn selfref_checks(cfg: &SelfrefConfig, runs: &[Run]) -> Vec<Check> {
    let find = |seed: u64, net: &str, opt: &str| runs.iter().find(|r| r.seed == seed && r.network == net && r.optimizer == opt);
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).fold(Vec::new(), |mut v, s| {
        if !v.contains(&s) {
            v.push(s);
        }
        v
    });
    let mode = |a: &[f64], m: usize| a.get(m - 1).copied().unwrap_or(0.0);
    let (mut ratio_ok, mut gain_ok, mut loss_ok, mut stall_ok, mut learn_ok) = (true, true, true, true, true);
    let (mut ratio_d, mut gain_d, mut loss_d, mut stall_d, mut learn_d) = (vec![], vec![], vec![], vec![], vec![]);
    for &s in &seeds {
        let (Some(n1), Some(n2)) = (find(s, "n1", "sgd"), find(s, "n2", "sgd")) else {
            continue;
        };
        let (a1, a2) = (&n1.ntk[0].1, &n2.ntk[0].1);
        let r = mode(a1, 3).abs() / mode(a1, 1).abs();
        ratio_ok &= r <= cfg.max_init_ratio;
        ratio_d.push(format!("seed {s}: {r:.3}"));
        let g = mode(a2, 3).abs() / mode(a1, 3).abs();
        gain_ok &= g >= cfg.min_init_gain;
        gain_d.push(format!("seed {s}: {g:.1}x"));
        let (l1, l2) = (n1.log.final_eval_loss().unwrap_or(f64::NAN), n2.log.final_eval_loss().unwrap_or(f64::NAN));
        loss_ok &= l2 < l1;
        loss_d.push(format!("seed {s}: {l2:.4} vs {l1:.4}"));
        let worst = n1.log.checkpoints.iter().map(|c| mode(&c.alignments, 3)).fold(f64::NEG_INFINITY, f64::max);
        let first = n1.log.checkpoints.last().map(|c| mode(&c.alignments, 1)).unwrap_or(f64::NAN);
        stall_ok &= worst < cfg.stall_threshold && first > cfg.n1_mode1_threshold;
        stall_d.push(format!("seed {s}: {worst:.3} (mode 1 final {first:.2})"));
        let last = n2.log.checkpoints.last().map(|c| c.alignments.clone()).unwrap_or_default();
        for &m in &cfg.learned_modes {
            learn_ok &= mode(&last, m) > cfg.learned_threshold;
        }
        learn_d.push(format!(
            "seed {s}: [{}]",
            last.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ")
        ));
    }
    vec![
        Check::new(
            "n1_init_mode3_ratio",
            ratio_ok,
            format!("NTK alignment mode 3 / mode 1 (max {}): {}", cfg.max_init_ratio, ratio_d.join(", ")),
        ),
        Check::new(
            "n2_init_mode3_gain",
            gain_ok,
            format!("network 2 / network 1 mode-3 NTK alignment (min {}): {}", cfg.min_init_gain, gain_d.join(", ")),
        ),
        Check::new(
            "final_loss_ordering",
            loss_ok,
            format!("network 2 vs network 1 final loss: {}", loss_d.join(", ")),
        ),
        Check::new(
            "n1_mode3_stall",
            stall_ok,
            format!(
                "network 1 max mode-3 target alignment below {} with final mode 1 above {}: {}",
                cfg.stall_threshold,
                cfg.n1_mode1_threshold,
                stall_d.join(", ")
            ),
        ),
        Check::new(
            "n2_learned_modes",
            learn_ok,
            format!(
                "network 2 final alignments, modes {:?} above {}: {}",
                cfg.learned_modes,
                cfg.learned_threshold,
                learn_d.join(", ")
            ),
        ),
    ]
}
