//! Task generators, special initializations, target modes and training loops.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::models::{xavier, Activation, Family, Gru, ParamSet, Recurrent, Rnn};
use crate::ntkops::{param_cotangent, propagate_adjoint};
use crate::numerics::sym_eig_desc;
use crate::rng::{gaussian, gaussian_matrix, stream, uniform, Rng64};
use crate::tensor::Tensor3;

/// Inputs, targets and per-step loss weights for one batch of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub x: Tensor3,
    pub y: Tensor3,
    /// Loss weight of each time step (1 everywhere unless masked).
    pub step_weights: Vec<f64>,
}

impl TaskBatch {
    pub fn new(x: Tensor3, y: Tensor3) -> Result<Self> {
        if x.n_x != y.n_x || x.n_t != y.n_t {
            return Err(Error::InvalidShape(format!(
                "inputs ({}, {}) and targets ({}, {}) disagree on trials/steps",
                x.n_x, x.n_t, y.n_x, y.n_t
            )));
        }
        let n_t = x.n_t;
        Ok(Self {
            x,
            y,
            step_weights: vec![1.0; n_t],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryProConfig {
    pub n_x: usize,
    pub n_t: usize,
    pub stimulus: usize,
    pub memory: usize,
    pub response: usize,
    pub noise_var: f64,
    /// Weight only the response period in the loss.
    pub mask_response: bool,
    pub seed: u64,
}

impl MemoryProConfig {
    pub fn paper() -> Self {
        Self {
            n_x: 500,
            n_t: 90,
            stimulus: 30,
            memory: 30,
            response: 30,
            noise_var: 3.2,
            mask_response: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stimulus + self.memory + self.response != self.n_t {
            return Err(Error::InvalidArgument(format!(
                "phase lengths {}+{}+{} do not sum to n_t = {}",
                self.stimulus, self.memory, self.response, self.n_t
            )));
        }
        if self.n_x == 0 || self.stimulus == 0 || self.response == 0 {
            return Err(Error::InvalidArgument("empty Memory-Pro batch or phase".into()));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise variance {}", self.noise_var)));
        }
        Ok(())
    }

    pub fn response_start(&self) -> usize {
        self.stimulus + self.memory
    }
}

/// Trial angles drawn uniformly in `[0, 2π)`.
pub fn memory_pro_angles(cfg: &MemoryProConfig) -> Vec<f64> {
    let mut rng = stream(cfg.seed, 50, 0);
    (0..cfg.n_x).map(|_| uniform(&mut rng, 0.0, 2.0 * PI)).collect()
}

/// Memory-Pro batch for the given angles. Input channels are
/// `(fixation, cos θ, sin θ)`, target channels `(fixation, cos θ, sin θ)` with
/// the stimulus reproduced only during the response period. `noise` selects
/// the noise stream; `None` gives the clean evaluation batch.
pub fn memory_pro_batch(cfg: &MemoryProConfig, angles: &[f64], noise: Option<u32>) -> Result<TaskBatch> {
    cfg.validate()?;
    if angles.len() != cfg.n_x {
        return Err(Error::InvalidArgument(format!("{} angles for {} trials", angles.len(), cfg.n_x)));
    }
    let resp = cfg.response_start();
    let mut x = Tensor3::from_fn(cfg.n_x, cfg.n_t, 3, |j, t, c| match c {
        0 => f64::from(t < resp),
        1 if t < cfg.stimulus => angles[j].cos(),
        2 if t < cfg.stimulus => angles[j].sin(),
        _ => 0.0,
    });
    let y = Tensor3::from_fn(cfg.n_x, cfg.n_t, 3, |j, t, c| match c {
        0 => f64::from(t < resp),
        1 if t >= resp => angles[j].cos(),
        2 if t >= resp => angles[j].sin(),
        _ => 0.0,
    });
    if let Some(index) = noise {
        let mut rng = stream(cfg.seed, 51, index);
        let sd = cfg.noise_var.sqrt();
        for v in x.as_mut_slice() {
            *v += sd * gaussian(&mut rng);
        }
    }
    let mut batch = TaskBatch::new(x, y)?;
    if cfg.mask_response {
        for (t, w) in batch.step_weights.iter_mut().enumerate() {
            *w = f64::from(t >= resp);
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacherConfig {
    /// The single trained family, `Rec` or `In`.
    pub family: Family,
    pub g_star: f64,
    pub g: f64,
    pub n_in: usize,
    pub n_h: usize,
    pub n_out: usize,
    pub n_t: usize,
    pub batch: usize,
    /// Inputs confined to a random subspace of this dimension.
    pub input_rank: Option<usize>,
    pub seed: u64,
}

impl StudentTeacherConfig {
    pub fn paper(family: Family, g: f64) -> Self {
        Self {
            family,
            g_star: 1.0,
            g,
            n_in: 16,
            n_h: 64,
            n_out: 1,
            n_t: 40,
            batch: 128,
            input_rank: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentTeacher {
    pub teacher: Rnn,
    pub student: Rnn,
    pub batch: TaskBatch,
}

/// Gaussian inputs `(n_x, n_t, n_in)`, optionally projected onto `rank`
/// random orthonormal directions.
pub fn gaussian_inputs(rng: &mut Rng64, n_x: usize, n_t: usize, n_in: usize, rank: Option<usize>) -> Result<Tensor3> {
    let rows = match rank {
        None => gaussian_matrix(rng, n_x * n_t, n_in),
        Some(r) if r == 0 || r > n_in => {
            return Err(Error::InvalidArgument(format!("input rank {r} outside 1..={n_in}")));
        }
        Some(r) => {
            let basis = gaussian_matrix(rng, n_in, r).qr().q();
            gaussian_matrix(rng, n_x * n_t, r) * basis.transpose()
        }
    };
    Ok(Tensor3::from_rows(n_x, n_t, &rows))
}

pub fn student_teacher(cfg: &StudentTeacherConfig) -> Result<StudentTeacher> {
    if !matches!(cfg.family, Family::Rec | Family::In) {
        return Err(Error::InvalidArgument(format!("student trains rec or in, not {}", cfg.family)));
    }
    let mut rng = stream(cfg.seed, 60, 0);
    let mut teacher = Rnn::xavier(&mut rng, cfg.n_in, cfg.n_h, cfg.n_out, cfg.g_star);
    teacher.trainable = vec![cfg.family];
    let mut student = teacher.clone();
    let mut rng = stream(cfg.seed, 61, 0);
    match cfg.family {
        Family::Rec => student.w_rec = xavier(&mut rng, cfg.n_h, cfg.n_h, cfg.g),
        _ => student.w_in = xavier(&mut rng, cfg.n_h, cfg.n_in, cfg.g),
    }
    let x = gaussian_inputs(&mut stream(cfg.seed, 62, 0), cfg.batch, cfg.n_t, cfg.n_in, cfg.input_rank)?;
    let y = teacher.output(&teacher.forward(&x, None)?.hidden());
    Ok(StudentTeacher {
        teacher,
        student,
        batch: TaskBatch::new(x, y)?,
    })
}

/// Features `(cos 2πfx, sin 2πfx)` for `f = 1..=frequencies`; `0` passes the
/// input through unchanged.
pub fn fourier_embed(x: &Tensor3, frequencies: usize) -> Result<Tensor3> {
    if x.n != 1 {
        return Err(Error::InvalidShape(format!("Fourier embedding needs one channel, got {}", x.n)));
    }
    if frequencies == 0 {
        return Ok(x.clone());
    }
    Ok(Tensor3::from_fn(x.n_x, x.n_t, 2 * frequencies, |j, t, c| {
        let arg = 2.0 * PI * (c / 2 + 1) as f64 * x.get(j, t, 0);
        if c % 2 == 0 {
            arg.cos()
        } else {
            arg.sin()
        }
    }))
}

/// Scaled coordinate directions `scale * e_i`, `i < m`.
pub fn default_ntfp_points(n_h: usize, m: usize, scale: f64) -> Result<Vec<Vec<f64>>> {
    if m > n_h {
        return Err(Error::InvalidArgument(format!("{m} fixed points in {n_h} dimensions")));
    }
    Ok((0..m)
        .map(|i| {
            let mut v = vec![0.0; n_h];
            v[i] = scale;
            v
        })
        .collect())
}

/// `W = Σ h̄ σ(h̄)ᵀ/‖σ(h̄)‖² + X Π`, with `X` Xavier-gain-`gain` and `Π` the
/// projector onto the orthocomplement of the `σ(h̄_i)`, so `W σ(h̄_i) = h̄_i`.
pub fn ntfp_weights(rng: &mut Rng64, n_h: usize, points: &[Vec<f64>], activation: Activation, gain: f64) -> Result<DMatrix<f64>> {
    let images: Vec<DMatrix<f64>> = points
        .iter()
        .map(|p| {
            if p.len() != n_h {
                return Err(Error::InvalidShape(format!("fixed point of length {} for n_h = {n_h}", p.len())));
            }
            Ok(activation.map(&DMatrix::from_column_slice(n_h, 1, p)))
        })
        .collect::<Result<_>>()?;
    for (i, a) in images.iter().enumerate() {
        let na = a.norm();
        if na == 0.0 {
            return Err(Error::InvalidArgument(format!("fixed point {i} has a zero image")));
        }
        for (j, b) in images.iter().enumerate().skip(i + 1) {
            let c = a.dot(b) / (na * b.norm());
            if c.abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "images of fixed points {i} and {j} are not orthogonal (cosine {c:e})"
                )));
            }
        }
    }
    let mut proj = DMatrix::<f64>::identity(n_h, n_h);
    let mut w = DMatrix::zeros(n_h, n_h);
    for (p, s) in points.iter().zip(&images) {
        let s2 = s.norm_squared();
        let h = DMatrix::from_column_slice(n_h, 1, p);
        w += &h * s.transpose() / s2;
        proj -= s * s.transpose() / s2;
    }
    Ok(w + xavier(rng, n_h, n_h, gain) * proj)
}

/// GRU whose candidate-gate recurrent block `W_hl` carries the fixed-point
/// construction; the other blocks stay Xavier.
pub fn gru_with_ntfp(rng: &mut Rng64, n_in: usize, n_h: usize, n_out: usize, gain: f64, points: &[Vec<f64>]) -> Result<Gru> {
    let mut m = Gru::xavier(rng, n_in, n_h, n_out, gain);
    let block = ntfp_weights(rng, n_h, points, Activation::Tanh, gain)?;
    m.w_rec.rows_mut(2 * n_h, n_h).copy_from(&block);
    Ok(m)
}

/// Long-run behaviour of the autonomous map `h ↦ W σ(h)` from several starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoints {
    /// Mean state over the final `window` steps, one column per start.
    pub averaged: DMatrix<f64>,
    /// State after the last step, one column per start.
    pub last: DMatrix<f64>,
    /// States every `stride` steps, starting with the initial states.
    pub samples: Vec<DMatrix<f64>>,
}

/// Iterates `h ↦ W σ(h)` for all columns of `starts` at once.
pub fn autonomous_endpoints(
    w: &DMatrix<f64>,
    activation: Activation,
    starts: &DMatrix<f64>,
    steps: usize,
    window: usize,
    stride: usize,
) -> Result<Endpoints> {
    if w.nrows() != w.ncols() || starts.nrows() != w.nrows() {
        return Err(Error::InvalidShape(format!(
            "weights {}x{} and starts with {} rows",
            w.nrows(),
            w.ncols(),
            starts.nrows()
        )));
    }
    if window == 0 || window > steps || stride == 0 {
        return Err(Error::InvalidArgument(format!("window {window}, stride {stride} for {steps} steps")));
    }
    let mut h = starts.clone();
    let mut sum = DMatrix::zeros(h.nrows(), h.ncols());
    let mut samples = vec![h.clone()];
    for t in 1..=steps {
        h = w * activation.map(&h);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { batch: 0, time: t });
        }
        if t > steps - window {
            sum += &h;
        }
        if t % stride == 0 {
            samples.push(h.clone());
        }
    }
    Ok(Endpoints {
        averaged: sum / window as f64,
        last: h,
        samples,
    })
}

/// Single-linkage cluster labels of the columns of `points` at distance `tau`,
/// numbered by first appearance.
pub fn single_linkage(points: &DMatrix<f64>, tau: f64) -> Vec<usize> {
    let n = points.ncols();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            if (points.column(a) - points.column(b)).norm() <= tau {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut labels = vec![0; n];
    let mut seen: Vec<usize> = Vec::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        labels[i] = match seen.iter().position(|&s| s == r) {
            Some(k) => k,
            None => {
                seen.push(r);
                seen.len() - 1
            }
        };
    }
    labels
}

/// Orthonormal temporal target modes: left singular vectors of the targets
/// reshaped `(n_x n_t) x n_out`, by decreasing singular value.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModes {
    pub modes: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

pub fn target_modes(y: &Tensor3) -> Result<TargetModes> {
    let rows = y.to_rows();
    if rows.norm() == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let svd = rows.svd(true, false);
    let u = svd.u.expect("left vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut modes = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    for mut col in modes.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    Ok(TargetModes {
        modes,
        singular_values: order.iter().map(|&i| svd.singular_values[i]).collect(),
    })
}

/// Mode-`m` alignment `⟨u_mᵀY, u_mᵀY*⟩ / ‖u_mᵀY*‖²` for each mode.
pub fn mode_alignments(modes: &TargetModes, y: &Tensor3, y_star: &Tensor3) -> Vec<f64> {
    let (a, b) = (y.to_rows(), y_star.to_rows());
    modes
        .modes
        .column_iter()
        .map(|u| {
            let pa = u.transpose() * &a;
            let pb = u.transpose() * &b;
            let den = pb.norm_squared();
            if den == 0.0 {
                0.0
            } else {
                pa.dot(&pb) / den
            }
        })
        .collect()
}

/// A recurrent model with a linear readout that can be trained end to end.
pub trait TrainModel: Clone {
    fn trace(&self, x: &Tensor3) -> Result<Arc<dyn Recurrent>>;
    fn readout(&self) -> &DMatrix<f64>;
    fn params(&self) -> ParamSet;
    fn set_params(&mut self, p: &ParamSet);
    fn trainable(&self) -> &[Family];
}

impl TrainModel for Rnn {
    fn trace(&self, x: &Tensor3) -> Result<Arc<dyn Recurrent>> {
        Ok(Arc::new(self.forward(x, None)?))
    }
    fn readout(&self) -> &DMatrix<f64> {
        &self.w_out
    }
    fn params(&self) -> ParamSet {
        Rnn::params(self)
    }
    fn set_params(&mut self, p: &ParamSet) {
        Rnn::set_params(self, p)
    }
    fn trainable(&self) -> &[Family] {
        &self.trainable
    }
}

impl TrainModel for Gru {
    fn trace(&self, x: &Tensor3) -> Result<Arc<dyn Recurrent>> {
        Ok(Arc::new(self.forward(x, None)?))
    }
    fn readout(&self) -> &DMatrix<f64> {
        &self.w_out
    }
    fn params(&self) -> ParamSet {
        Gru::params(self)
    }
    fn set_params(&mut self, p: &ParamSet) {
        Gru::set_params(self, p)
    }
    fn trainable(&self) -> &[Family] {
        &self.trainable
    }
}

/// Readout `W_out h` at every step.
pub fn readout(w_out: &DMatrix<f64>, h: &Tensor3) -> Tensor3 {
    Tensor3::from_steps(&h.steps().iter().map(|s| w_out * s).collect::<Vec<_>>())
}

/// Weighted mean squared error over trials, steps and outputs.
pub fn mse(yhat: &Tensor3, batch: &TaskBatch) -> f64 {
    let (sum, count) = weighted_residual(yhat, batch, |_, _, _, _| ());
    sum / count
}

fn weighted_residual(yhat: &Tensor3, batch: &TaskBatch, mut each: impl FnMut(usize, usize, usize, f64)) -> (f64, f64) {
    let y = &batch.y;
    let mut sum = 0.0;
    let mut count = 0.0;
    for j in 0..y.n_x {
        for t in 0..y.n_t {
            let w = batch.step_weights[t];
            for c in 0..y.n {
                let r = yhat.get(j, t, c) - y.get(j, t, c);
                sum += w * r * r;
                count += w;
                each(j, t, c, w * r);
            }
        }
    }
    (sum, count.max(1.0))
}

/// Loss, gradient over the trainable families, and the forward trace.
pub struct Evaluation {
    pub loss: f64,
    pub grad: ParamSet,
    pub trace: Arc<dyn Recurrent>,
    pub output: Tensor3,
}

pub fn loss_and_grad<M: TrainModel>(model: &M, batch: &TaskBatch) -> Result<Evaluation> {
    let trace = model.trace(&batch.x)?;
    let h = trace.hidden();
    let w_out = model.readout();
    let output = readout(w_out, &h);
    let mut dy = Tensor3::zeros(output.n_x, output.n_t, output.n);
    let (sum, count) = weighted_residual(&output, batch, |j, t, c, wr| dy.set(j, t, c, wr));
    let loss = sum / count;
    for v in dy.as_mut_slice() {
        *v *= 2.0 / count;
    }
    let err = Tensor3::from_steps(&dy.steps().iter().map(|s| w_out.tr_mul(s)).collect::<Vec<_>>());
    let mut grad = if trace.state_families().is_empty() {
        ParamSet::new()
    } else {
        param_cotangent(trace.as_ref(), &propagate_adjoint(trace.as_ref(), &err))
    };
    if model.trainable().contains(&Family::Out) {
        let mut g = DMatrix::zeros(w_out.nrows(), w_out.ncols());
        for t in 0..h.n_t {
            g += dy.step(t) * h.step(t).transpose();
        }
        grad.insert(Family::Out, g);
    }
    if grad.is_empty() {
        return Err(Error::NothingTrainable);
    }
    Ok(Evaluation {
        loss,
        grad,
        trace,
        output,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Two-sided Kronecker-factored preconditioner `L^{-1/4} G R^{-1/4}`.
    Kfp { damping: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Evaluate alignments and call the observer every this many iterations.
    pub log_every: usize,
}

/// Diagnostics recorded at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub eval_loss: f64,
    pub alignments: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// Training loss before the update at each iteration.
    pub loss: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainLog {
    pub fn final_eval_loss(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.eval_loss)
    }
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Preconditioner state for one weight matrix.
struct Factors {
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

fn inv_fourth_root(m: &DMatrix<f64>, damping: f64) -> DMatrix<f64> {
    let (ev, vecs) = sym_eig_desc(m);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        ev.len(),
        ev.iter().map(|&l| (l.max(0.0) + damping).powf(-0.25)),
    ));
    &vecs * d * vecs.transpose()
}

/// Kronecker-factored update direction for one gradient, updating the factors.
fn kfp_direction(g: &DMatrix<f64>, f: &mut Factors, damping: f64) -> DMatrix<f64> {
    f.left += g * g.transpose();
    f.right += g.transpose() * g;
    inv_fourth_root(&f.left, damping) * g * inv_fourth_root(&f.right, damping)
}

/// Minimizes the task loss. `data(i)` supplies the batch for iteration `i`,
/// `eval` is the clean batch used for checkpoints, and `observe` runs at every
/// checkpoint with the current model.
pub fn train<M: TrainModel>(
    model: &mut M,
    data: &mut dyn FnMut(usize) -> Result<TaskBatch>,
    eval: &TaskBatch,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(usize, &M) -> Result<()>,
) -> Result<TrainLog> {
    if cfg.log_every == 0 {
        return Err(Error::InvalidArgument("log_every must be positive".into()));
    }
    let modes = target_modes(&eval.y)?;
    let mut log = TrainLog::default();
    let mut factors: Vec<(Family, Factors)> = Vec::new();
    let mut checkpoint = |it: usize, model: &M, log: &mut TrainLog| -> Result<()> {
        let e = loss_and_grad(model, eval)?;
        log.checkpoints.push(Checkpoint {
            iteration: it,
            eval_loss: e.loss,
            alignments: mode_alignments(&modes, &e.output, &eval.y),
        });
        observe(it, model)
    };
    for it in 0..cfg.iterations {
        let batch = data(it)?;
        let e = loss_and_grad(model, &batch).map_err(|err| match err {
            Error::NonFiniteState { .. } => Error::Diverged {
                iteration: it,
                loss: f64::INFINITY,
            },
            other => other,
        })?;
        if !e.loss.is_finite() || e.loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                iteration: it,
                loss: e.loss,
            });
        }
        log.loss.push(e.loss);
        if it % cfg.log_every == 0 {
            checkpoint(it, model, &mut log)?;
        }
        let mut params = model.params();
        for (fam, g) in e.grad.iter() {
            let step = match cfg.optimizer {
                Optimizer::Sgd => g.clone(),
                Optimizer::Kfp { damping } => {
                    let idx = match factors.iter().position(|(f, _)| *f == fam) {
                        Some(i) => i,
                        None => {
                            factors.push((
                                fam,
                                Factors {
                                    left: DMatrix::zeros(g.nrows(), g.nrows()),
                                    right: DMatrix::zeros(g.ncols(), g.ncols()),
                                },
                            ));
                            factors.len() - 1
                        }
                    };
                    kfp_direction(g, &mut factors[idx].1, damping)
                }
            };
            let w = params.get_mut(fam).expect("trainable family has a weight");
            *w -= step * cfg.lr;
        }
        model.set_params(&params);
    }
    checkpoint(cfg.iterations, model, &mut log)?;
    Ok(log)
}

/// First update direction of each optimizer on a batch, for comparing them.
pub fn first_step_direction<M: TrainModel>(model: &M, batch: &TaskBatch, optimizer: Optimizer) -> Result<ParamSet> {
    let e = loss_and_grad(model, batch)?;
    let mut out = ParamSet::new();
    for (fam, g) in e.grad.iter() {
        let d = match optimizer {
            Optimizer::Sgd => g.clone(),
            Optimizer::Kfp { damping } => {
                let mut f = Factors {
                    left: DMatrix::zeros(g.nrows(), g.nrows()),
                    right: DMatrix::zeros(g.ncols(), g.ncols()),
                };
                kfp_direction(g, &mut f, damping)
            }
        };
        out.insert(fam, d);
    }
    Ok(out)
}
