use nalgebra::DMatrix;

use super::{
    check_families, check_finite, check_shape, initial_state, input_steps, tile, tile_all, xavier,
    Activation, Family, ParamSet, Recurrent, SiteFamily,
};
use crate::error::Result;
use crate::rng::Rng64;
use crate::tensor::Tensor3;

/// Where the nonlinearity sits in the recurrent update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    /// `h[t] = φ(W h[t-1] + W_in x[t])`
    PreActivation,
    /// `h[t] = W φ(h[t-1]) + W_in x[t]`
    PostActivation,
}

/// Vanilla RNN with readout `y = W_out h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rnn {
    pub w_rec: DMatrix<f64>,
    pub w_in: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
    pub activation: Activation,
    pub update: Update,
    pub trainable: Vec<Family>,
}

impl Rnn {
    pub fn new(
        w_rec: DMatrix<f64>,
        w_in: DMatrix<f64>,
        w_out: DMatrix<f64>,
        activation: Activation,
        update: Update,
        trainable: Vec<Family>,
    ) -> Result<Self> {
        let n_h = w_rec.nrows();
        check_shape("W_rec", &w_rec, n_h, n_h)?;
        check_shape("W_in", &w_in, n_h, w_in.ncols())?;
        check_shape("W_out", &w_out, w_out.nrows(), n_h)?;
        Ok(Self {
            w_rec,
            w_in,
            w_out,
            activation,
            update,
            trainable,
        })
    }

    /// Xavier-normal weights; `gain` scales the recurrent matrix only.
    pub fn xavier(rng: &mut Rng64, n_in: usize, n_h: usize, n_out: usize, gain: f64) -> Self {
        let w_rec = xavier(rng, n_h, n_h, gain);
        let w_in = xavier(rng, n_h, n_in, 1.0);
        let w_out = xavier(rng, n_out, n_h, 1.0);
        Self {
            w_rec,
            w_in,
            w_out,
            activation: Activation::Tanh,
            update: Update::PreActivation,
            trainable: vec![Family::Rec, Family::In],
        }
    }

    pub fn n_h(&self) -> usize {
        self.w_rec.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w_out.nrows()
    }

    fn outer(&self) -> Activation {
        match self.update {
            Update::PreActivation => self.activation,
            Update::PostActivation => Activation::Identity,
        }
    }

    fn inner(&self) -> Activation {
        match self.update {
            Update::PreActivation => Activation::Identity,
            Update::PostActivation => self.activation,
        }
    }

    pub fn step(&self, h_prev: &DMatrix<f64>, x_t: &DMatrix<f64>) -> DMatrix<f64> {
        let a = &self.w_rec * self.inner().map(h_prev) + &self.w_in * x_t;
        self.outer().map(&a)
    }

    pub fn forward(&self, x: &Tensor3, h0: Option<&DMatrix<f64>>) -> Result<RnnTrace> {
        let xs = input_steps(x, self.n_in())?;
        let h0 = initial_state(h0, self.n_h(), x.n_x)?;
        let (inner, outer) = (self.inner(), self.outer());
        let mut h = Vec::with_capacity(x.n_t);
        let mut sites = Vec::with_capacity(x.n_t);
        let mut d_inner = Vec::with_capacity(x.n_t);
        let mut d_outer = Vec::with_capacity(x.n_t);
        for (t, x_t) in xs.iter().enumerate() {
            let prev = if t == 0 { &h0 } else { &h[t - 1] };
            let s = inner.map(prev);
            let ht = outer.map(&(&self.w_rec * &s + &self.w_in * x_t));
            check_finite(t, &ht)?;
            d_inner.push(s.map(|v| inner.deriv_from_output(v)));
            d_outer.push(ht.map(|v| outer.deriv_from_output(v)));
            sites.push(s);
            h.push(ht);
        }
        Ok(RnnTrace {
            model: self.clone(),
            h0,
            x: xs,
            h,
            sites,
            d_inner,
            d_outer,
        })
    }

    /// Readout `W_out h[t]` for every step, shape `(n_x, n_t, n_out)`.
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
pub struct RnnTrace {
    pub model: Rnn,
    h0: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
    /// Recurrent site vector `φ_inner(h[t-1])`.
    sites: Vec<DMatrix<f64>>,
    d_inner: Vec<DMatrix<f64>>,
    d_outer: Vec<DMatrix<f64>>,
}

impl RnnTrace {
    fn shifted(&self, t: usize, w_rec: &DMatrix<f64>, w_in: &DMatrix<f64>, extra: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let mut a = w_rec * &self.sites[t] + w_in * &self.x[t];
        if let Some(e) = extra {
            a += e;
        }
        self.model.outer().map(&a)
    }
}

impl Recurrent for RnnTrace {
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
        let inner = self.d_inner[t].component_mul(dh);
        self.d_outer[t].component_mul(&(&self.model.w_rec * inner))
    }

    fn state_vjp(&self, t: usize, u: &DMatrix<f64>) -> DMatrix<f64> {
        let g = self.d_outer[t].component_mul(u);
        self.d_inner[t].component_mul(&self.model.w_rec.tr_mul(&g))
    }

    fn param_jvp(&self, t: usize, dtheta: &ParamSet) -> Result<DMatrix<f64>> {
        check_families(&self.state_families(), dtheta)?;
        let mut a = DMatrix::zeros(self.n_h(), self.n_x());
        if let Some(dw) = dtheta.get(Family::Rec) {
            a += dw * &self.sites[t];
        }
        if let Some(dw) = dtheta.get(Family::In) {
            a += dw * &self.x[t];
        }
        Ok(self.d_outer[t].component_mul(&a))
    }

    fn param_vjp(&self, t: usize, u: &DMatrix<f64>, acc: &mut ParamSet) {
        let g = self.d_outer[t].component_mul(u);
        if let Some(m) = acc.get_mut(Family::Rec) {
            *m += &g * self.sites[t].transpose();
        }
        if let Some(m) = acc.get_mut(Family::In) {
            *m += &g * self.x[t].transpose();
        }
    }

    fn site_families(&self) -> Vec<SiteFamily> {
        self.state_families()
            .into_iter()
            .map(|family| SiteFamily {
                family,
                width: if family == Family::Rec { self.n_h() } else { self.n_in() },
                rep: self.n_h(),
            })
            .collect()
    }

    fn site_vectors(&self, t: usize) -> Vec<DMatrix<f64>> {
        self.state_families()
            .into_iter()
            .map(|f| if f == Family::Rec { self.sites[t].clone() } else { self.x[t].clone() })
            .collect()
    }

    fn site_jvp(&self, t: usize, dq: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n_h(), self.n_x());
        for d in dq {
            s += d;
        }
        self.d_outer[t].component_mul(&s)
    }

    fn site_vjp(&self, t: usize, u: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let g = self.d_outer[t].component_mul(u);
        vec![g; self.state_families().len()]
    }

    fn step_from(&self, t: usize, h_prev: &DMatrix<f64>) -> DMatrix<f64> {
        self.model.step(h_prev, &self.x[t])
    }

    fn step_shifted_params(&self, t: usize, dtheta: &ParamSet) -> DMatrix<f64> {
        let mut w_rec = self.model.w_rec.clone();
        let mut w_in = self.model.w_in.clone();
        if let Some(d) = dtheta.get(Family::Rec) {
            w_rec += d;
        }
        if let Some(d) = dtheta.get(Family::In) {
            w_in += d;
        }
        self.shifted(t, &w_rec, &w_in, None)
    }

    fn step_shifted_sites(&self, t: usize, dq: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut extra = DMatrix::zeros(self.n_h(), self.n_x());
        for d in dq {
            extra += d;
        }
        self.shifted(t, &self.model.w_rec, &self.model.w_in, Some(&extra))
    }

    fn tiled(&self, copies: usize) -> Box<dyn Recurrent> {
        Box::new(RnnTrace {
            model: self.model.clone(),
            h0: tile(&self.h0, copies),
            x: tile_all(&self.x, copies),
            h: tile_all(&self.h, copies),
            sites: tile_all(&self.sites, copies),
            d_inner: tile_all(&self.d_inner, copies),
            d_outer: tile_all(&self.d_outer, copies),
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
