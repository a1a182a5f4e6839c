use nalgebra::DMatrix;

use super::{
    check_families, check_finite, check_shape, initial_state, input_steps, sigmoid, tile, tile_all,
    xavier, Family, ParamSet, Recurrent, SiteFamily,
};
use crate::error::Result;
use crate::rng::Rng64;
use crate::tensor::Tensor3;

/// Bias-free GRU. `w_rec` stacks `(W_hr, W_hz, W_hl)` and `w_in` stacks
/// `(W_ir, W_iz, W_il)` row-block-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub w_rec: DMatrix<f64>,
    pub w_in: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
    pub trainable: Vec<Family>,
}

struct Cell {
    r: DMatrix<f64>,
    z: DMatrix<f64>,
    l: DMatrix<f64>,
    c: DMatrix<f64>,
    h: DMatrix<f64>,
}

fn block(m: &DMatrix<f64>, b: usize, n: usize) -> DMatrix<f64> {
    m.rows(b * n, n).into_owned()
}

/// Remaining gate arithmetic given the site products `q = W h` and `p = W_in x`.
fn cell(q: &DMatrix<f64>, p: &DMatrix<f64>, h_prev: &DMatrix<f64>) -> Cell {
    let n = h_prev.nrows();
    let r = (block(q, 0, n) + block(p, 0, n)).map(sigmoid);
    let z = (block(q, 1, n) + block(p, 1, n)).map(sigmoid);
    let c = block(q, 2, n);
    let l = (block(p, 2, n) + r.component_mul(&c)).map(f64::tanh);
    let h = z.map(|v| 1.0 - v).component_mul(&l) + z.component_mul(h_prev);
    Cell { r, z, l, c, h }
}

impl Gru {
    pub fn new(w_rec: DMatrix<f64>, w_in: DMatrix<f64>, w_out: DMatrix<f64>, trainable: Vec<Family>) -> Result<Self> {
        let n_h = w_rec.ncols();
        check_shape("W_rec", &w_rec, 3 * n_h, n_h)?;
        check_shape("W_in", &w_in, 3 * n_h, w_in.ncols())?;
        check_shape("W_out", &w_out, w_out.nrows(), n_h)?;
        Ok(Self {
            w_rec,
            w_in,
            w_out,
            trainable,
        })
    }

    /// Xavier-normal gate blocks, each drawn at its own `n_h x fan_in` shape.
    pub fn xavier(rng: &mut Rng64, n_in: usize, n_h: usize, n_out: usize, gain: f64) -> Self {
        let mut w_rec = DMatrix::zeros(3 * n_h, n_h);
        let mut w_in = DMatrix::zeros(3 * n_h, n_in);
        for b in 0..3 {
            w_rec.rows_mut(b * n_h, n_h).copy_from(&xavier(rng, n_h, n_h, gain));
            w_in.rows_mut(b * n_h, n_h).copy_from(&xavier(rng, n_h, n_in, 1.0));
        }
        let w_out = xavier(rng, n_out, n_h, 1.0);
        Self {
            w_rec,
            w_in,
            w_out,
            trainable: vec![Family::Rec, Family::In],
        }
    }

    pub fn n_h(&self) -> usize {
        self.w_rec.ncols()
    }

    pub fn n_in(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn step(&self, h_prev: &DMatrix<f64>, x_t: &DMatrix<f64>) -> DMatrix<f64> {
        cell(&(&self.w_rec * h_prev), &(&self.w_in * x_t), h_prev).h
    }

    pub fn forward(&self, x: &Tensor3, h0: Option<&DMatrix<f64>>) -> Result<GruTrace> {
        let xs = input_steps(x, self.n_in())?;
        let h0 = initial_state(h0, self.n_h(), x.n_x)?;
        let mut tr = GruTrace {
            model: self.clone(),
            h0,
            x: Vec::with_capacity(x.n_t),
            h: Vec::with_capacity(x.n_t),
            r: Vec::with_capacity(x.n_t),
            z: Vec::with_capacity(x.n_t),
            l: Vec::with_capacity(x.n_t),
            c: Vec::with_capacity(x.n_t),
        };
        for (t, x_t) in xs.into_iter().enumerate() {
            let prev = if t == 0 { &tr.h0 } else { &tr.h[t - 1] };
            let cl = cell(&(&self.w_rec * prev), &(&self.w_in * &x_t), prev);
            check_finite(t, &cl.h)?;
            tr.x.push(x_t);
            tr.h.push(cl.h);
            tr.r.push(cl.r);
            tr.z.push(cl.z);
            tr.l.push(cl.l);
            tr.c.push(cl.c);
        }
        Ok(tr)
    }

    pub fn output(&self, h: &Tensor3) -> Tensor3 {
        Tensor3::from_steps(&h.steps().iter().map(|s| &self.w_out * s).collect::<Vec<_>>())
    }

    pub fn params(&self) -> ParamSet {
        ParamSet::new()
            .with(Family::Rec, self.w_rec.clone())
            .with(Family::In, self.w_in.clone())
            .with(Family::Out, self.w_out.clone())
    }

    pub fn set_params(&mut self, p: &ParamSet) {
        if let Some(m) = p.get(Family::Rec) {
            self.w_rec.copy_from(m);
        }
        if let Some(m) = p.get(Family::In) {
            self.w_in.copy_from(m);
        }
        if let Some(m) = p.get(Family::Out) {
            self.w_out.copy_from(m);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GruTrace {
    pub model: Gru,
    h0: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    l: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
}

impl GruTrace {
    pub fn gates(&self, t: usize) -> (&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>) {
        (&self.r[t], &self.z[t], &self.l[t])
    }

    /// Linearized cell in the site products, either of which may be absent.
    fn lin(&self, t: usize, dq: Option<&DMatrix<f64>>, dp: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let n = self.n_h();
        let (r, z, l, c) = (&self.r[t], &self.z[t], &self.l[t], &self.c[t]);
        let hp = self.h_prev(t).as_slice();
        let (r, z, l, c) = (r.as_slice(), z.as_slice(), l.as_slice(), c.as_slice());
        let dq = dq.map(|m| m.as_slice());
        let dp = dp.map(|m| m.as_slice());
        // site products are 3n x n_x column-major: gate b of entry (i, j) sits at j*3n + b*n + i
        let at = |m: Option<&[f64]>, k: usize| m.map_or(0.0, |m| m[k]);
        let mut out = DMatrix::zeros(n, self.n_x());
        for (k, o) in out.as_mut_slice().iter_mut().enumerate() {
            let (i, j) = (k % n, k / n);
            let base = j * 3 * n + i;
            let (ri, zi, li) = (r[k], z[k], l[k]);
            let dr = ri * (1.0 - ri) * (at(dq, base) + at(dp, base));
            let dz = zi * (1.0 - zi) * (at(dq, base + n) + at(dp, base + n));
            let inner = at(dp, base + 2 * n) + dr * c[k] + ri * at(dq, base + 2 * n);
            *o = (hp[k] - li) * dz + (1.0 - zi) * (1.0 - li * li) * inner;
        }
        out
    }

    /// Adjoint of [`GruTrace::lin`]: cotangents of `(q, p)`.
    fn lin_adjoint(&self, t: usize, u: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n_h();
        let (r, z, l, c) = (&self.r[t], &self.z[t], &self.l[t], &self.c[t]);
        let hl = self.h_prev(t) - l;
        let mut g_l = DMatrix::zeros(n, self.n_x());
        let mut g_z = DMatrix::zeros(n, self.n_x());
        let mut g_r = DMatrix::zeros(n, self.n_x());
        for k in 0..u.len() {
            g_l[k] = (1.0 - z[k]) * u[k] * (1.0 - l[k] * l[k]);
            g_z[k] = hl[k] * u[k] * z[k] * (1.0 - z[k]);
            g_r[k] = g_l[k] * c[k] * r[k] * (1.0 - r[k]);
        }
        let mut dq = DMatrix::zeros(3 * n, self.n_x());
        let mut dp = DMatrix::zeros(3 * n, self.n_x());
        dq.rows_mut(0, n).copy_from(&g_r);
        dq.rows_mut(n, n).copy_from(&g_z);
        dq.rows_mut(2 * n, n).copy_from(&g_l.component_mul(r));
        dp.rows_mut(0, n).copy_from(&g_r);
        dp.rows_mut(n, n).copy_from(&g_z);
        dp.rows_mut(2 * n, n).copy_from(&g_l);
        (dq, dp)
    }
}

impl Recurrent for GruTrace {
    fn n_x(&self) -> usize {
        self.h0.ncols()
    }

    fn n_t(&self) -> usize {
        self.h.len()
    }

    fn n_h(&self) -> usize {
        self.model.n_h()
    }

    fn n_in(&self) -> usize {
        self.model.n_in()
    }

    fn hidden_at(&self, t: usize) -> &DMatrix<f64> {
        &self.h[t]
    }

    fn h_prev(&self, t: usize) -> &DMatrix<f64> {
        if t == 0 {
            &self.h0
        } else {
            &self.h[t - 1]
        }
    }

    fn input_at(&self, t: usize) -> &DMatrix<f64> {
        &self.x[t]
    }

    fn trainable(&self) -> &[Family] {
        &self.model.trainable
    }

    fn param_zeros(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for f in self.state_families() {
            let m = if f == Family::Rec { &self.model.w_rec } else { &self.model.w_in };
            p.insert(f, DMatrix::zeros(m.nrows(), m.ncols()));
        }
        p
    }

    fn state_jvp(&self, t: usize, dh: &DMatrix<f64>) -> DMatrix<f64> {
        self.lin(t, Some(&(&self.model.w_rec * dh)), None) + self.z[t].component_mul(dh)
    }

    fn state_vjp(&self, t: usize, u: &DMatrix<f64>) -> DMatrix<f64> {
        let (dq, _) = self.lin_adjoint(t, u);
        self.model.w_rec.tr_mul(&dq) + self.z[t].component_mul(u)
    }

    fn param_jvp(&self, t: usize, dtheta: &ParamSet) -> Result<DMatrix<f64>> {
        check_families(&self.state_families(), dtheta)?;
        // Expanded directly from the gate equations.
        let n = self.n_h();
        let hp = self.h_prev(t);
        let x = &self.x[t];
        let mut a = [
            DMatrix::zeros(n, self.n_x()),
            DMatrix::zeros(n, self.n_x()),
            DMatrix::zeros(n, self.n_x()),
        ];
        let mut a_rec3 = DMatrix::zeros(n, self.n_x());
        if let Some(dw) = dtheta.get(Family::Rec) {
            a[0] += dw.rows(0, n) * hp;
            a[1] += dw.rows(n, n) * hp;
            a_rec3 += dw.rows(2 * n, n) * hp;
        }
        if let Some(dw) = dtheta.get(Family::In) {
            a[0] += dw.rows(0, n) * x;
            a[1] += dw.rows(n, n) * x;
            a[2] += dw.rows(2 * n, n) * x;
        }
        let (r, z, l, c) = (&self.r[t], &self.z[t], &self.l[t], &self.c[t]);
        let mut out = DMatrix::zeros(n, self.n_x());
        for k in 0..out.len() {
            let dr = r[k] * (1.0 - r[k]) * a[0][k];
            let dz = z[k] * (1.0 - z[k]) * a[1][k];
            let dl = (1.0 - l[k] * l[k]) * (a[2][k] + dr * c[k] + r[k] * a_rec3[k]);
            out[k] = (hp[k] - l[k]) * dz + (1.0 - z[k]) * dl;
        }
        Ok(out)
    }

    fn param_vjp(&self, t: usize, u: &DMatrix<f64>, acc: &mut ParamSet) {
        let (dq, dp) = self.lin_adjoint(t, u);
        if let Some(m) = acc.get_mut(Family::Rec) {
            *m += &dq * self.h_prev(t).transpose();
        }
        if let Some(m) = acc.get_mut(Family::In) {
            *m += &dp * self.x[t].transpose();
        }
    }

    fn site_families(&self) -> Vec<SiteFamily> {
        self.state_families()
            .into_iter()
            .map(|family| SiteFamily {
                family,
                width: if family == Family::Rec { self.n_h() } else { self.n_in() },
                rep: 3 * self.n_h(),
            })
            .collect()
    }

    fn site_vectors(&self, t: usize) -> Vec<DMatrix<f64>> {
        self.state_families()
            .into_iter()
            .map(|f| if f == Family::Rec { self.h_prev(t).clone() } else { self.x[t].clone() })
            .collect()
    }

    fn site_jvp(&self, t: usize, dq: &[DMatrix<f64>]) -> DMatrix<f64> {
        let fams = self.state_families();
        let pos = |f| fams.iter().position(|&g| g == f).map(|i| &dq[i]);
        self.lin(t, pos(Family::Rec), pos(Family::In))
    }

    fn site_vjp(&self, t: usize, u: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let (dq, dp) = self.lin_adjoint(t, u);
        self.state_families()
            .into_iter()
            .map(|f| if f == Family::Rec { dq.clone() } else { dp.clone() })
            .collect()
    }

    fn step_from(&self, t: usize, h_prev: &DMatrix<f64>) -> DMatrix<f64> {
        self.model.step(h_prev, &self.x[t])
    }

    fn step_shifted_params(&self, t: usize, dtheta: &ParamSet) -> DMatrix<f64> {
        let mut m = self.model.clone();
        if let Some(d) = dtheta.get(Family::Rec) {
            m.w_rec += d;
        }
        if let Some(d) = dtheta.get(Family::In) {
            m.w_in += d;
        }
        m.step(self.h_prev(t), &self.x[t])
    }

    fn step_shifted_sites(&self, t: usize, dq: &[DMatrix<f64>]) -> DMatrix<f64> {
        let hp = self.h_prev(t);
        let mut q = &self.model.w_rec * hp;
        let mut p = &self.model.w_in * &self.x[t];
        for (f, d) in self.state_families().into_iter().zip(dq) {
            if f == Family::Rec {
                q += d;
            } else {
                p += d;
            }
        }
        cell(&q, &p, hp).h
    }

    fn tiled(&self, copies: usize) -> Box<dyn Recurrent> {
        Box::new(GruTrace {
            model: self.model.clone(),
            h0: tile(&self.h0, copies),
            x: tile_all(&self.x, copies),
            h: tile_all(&self.h, copies),
            r: tile_all(&self.r, copies),
            z: tile_all(&self.z, copies),
            l: tile_all(&self.l, copies),
            c: tile_all(&self.c, copies),
        })
    }

    fn rerun_shifted(&self, dtheta: &ParamSet) -> Result<Tensor3> {
        let mut m = self.model.clone();
        if let Some(d) = dtheta.get(Family::Rec) {
            m.w_rec += d;
        }
        if let Some(d) = dtheta.get(Family::In) {
            m.w_in += d;
        }
        let x = Tensor3::from_steps(&self.x);
        Ok(m.forward(&x, Some(&self.h0))?.hidden())
    }
}
