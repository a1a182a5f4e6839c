//! Single self-attention block followed by a tanh MLP.
//!
//! Per trial, with tokens as rows:
//!
//! ```text
//! Q = X W_Qᵀ, K = X W_Kᵀ, Z = X W_Vᵀ
//! A = softmax(Q Kᵀ / sqrt(d)) Z            (row-wise softmax over time)
//! O_1 = A W_Oᵀ
//! O_{l+1} = tanh(O_l W_lᵀ + b_l)           l = 1..L-2
//! Y = O_{L-1} W_{L-1}ᵀ + b_{L-1}
//! ```
//!
//! With `L = 1` the readout is `Y = A W_Oᵀ`. The per-token state is
//! `cat(A, O_1, .., O_{L-1}, Y)` and the weight sites are
//! `cat(X, X, X, A, O_1, .., O_{L-1})`. With several heads, `d = n_attn / heads`
//! and each head attends with its own slice of the projections.

use nalgebra::DMatrix;

use super::{check_families, check_shape, xavier, Family, ParamSet, WeightSites};
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct AttnMlp {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    /// `W_1 .. W_{L-1}`.
    pub mlp: Vec<DMatrix<f64>>,
    /// `b_1 .. b_{L-1}` as column vectors.
    pub bias: Vec<DMatrix<f64>>,
    pub heads: usize,
    pub trainable: Vec<Family>,
}

impl AttnMlp {
    /// Xavier-normal weights with zero biases. `layers` is `L`; biases are frozen.
    pub fn xavier(
        rng: &mut Rng64,
        n_in: usize,
        n_attn: usize,
        n_mlp: usize,
        n_out: usize,
        layers: usize,
        gain: f64,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        let w_q = xavier(rng, n_attn, n_in, gain);
        let w_k = xavier(rng, n_attn, n_in, gain);
        let w_v = xavier(rng, n_attn, n_in, gain);
        let o_width = if layers == 1 { n_out } else { n_mlp };
        let w_o = xavier(rng, o_width, n_attn, gain);
        let mut mlp = Vec::new();
        let mut bias = Vec::new();
        for l in 1..layers {
            let rows = if l == layers - 1 { n_out } else { n_mlp };
            mlp.push(xavier(rng, rows, n_mlp, gain));
            bias.push(DMatrix::zeros(rows, 1));
        }
        let mut trainable = vec![Family::Query, Family::Key, Family::Value, Family::AttnOut];
        trainable.extend((1..layers).map(Family::Mlp));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            mlp,
            bias,
            heads: 1,
            trainable,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (n_attn, n_in) = self.w_q.shape();
        check_shape("W_Q", &self.w_q, n_attn, n_in)?;
        check_shape("W_K", &self.w_k, n_attn, n_in)?;
        check_shape("W_V", &self.w_v, n_attn, n_in)?;
        check_shape("W_O", &self.w_o, self.w_o.nrows(), n_attn)?;
        let mut width = self.w_o.nrows();
        for (l, (w, b)) in self.mlp.iter().zip(&self.bias).enumerate() {
            check_shape(&format!("W_{}", l + 1), w, w.nrows(), width)?;
            check_shape(&format!("b_{}", l + 1), b, w.nrows(), 1)?;
            width = w.nrows();
        }
        if self.mlp.len() != self.bias.len() {
            return Err(Error::InvalidShape("one bias per MLP layer".into()));
        }
        if self.heads == 0 || n_attn % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide attention width {n_attn}",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn n_attn(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn layers(&self) -> usize {
        self.mlp.len() + 1
    }

    pub fn n_out(&self) -> usize {
        self.mlp.last().unwrap_or(&self.w_o).nrows()
    }

    /// Widths of `A, O_1, .., O_L` where `O_L = Y`.
    pub fn state_widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_attn(), self.w_o.nrows()];
        w.extend(self.mlp.iter().map(|m| m.nrows()));
        w
    }

    pub fn state_width(&self) -> usize {
        self.state_widths().iter().sum()
    }

    /// Column count of the weight-site matrix when every weight family trains.
    pub fn site_width(&self) -> usize {
        let w = self.state_widths();
        3 * self.n_in() + w[..w.len() - 1].iter().sum::<usize>()
    }

    fn weight(&self, f: Family) -> Option<&DMatrix<f64>> {
        match f {
            Family::Query => Some(&self.w_q),
            Family::Key => Some(&self.w_k),
            Family::Value => Some(&self.w_v),
            Family::AttnOut => Some(&self.w_o),
            Family::Mlp(l) if l >= 1 && l <= self.mlp.len() => Some(&self.mlp[l - 1]),
            Family::MlpBias(l) if l >= 1 && l <= self.bias.len() => Some(&self.bias[l - 1]),
            _ => None,
        }
    }

    fn weight_mut(&mut self, f: Family) -> Option<&mut DMatrix<f64>> {
        match f {
            Family::Query => Some(&mut self.w_q),
            Family::Key => Some(&mut self.w_k),
            Family::Value => Some(&mut self.w_v),
            Family::AttnOut => Some(&mut self.w_o),
            Family::Mlp(l) if l >= 1 && l <= self.mlp.len() => Some(&mut self.mlp[l - 1]),
            Family::MlpBias(l) if l >= 1 && l <= self.bias.len() => Some(&mut self.bias[l - 1]),
            _ => None,
        }
    }

    fn all_families(&self) -> Vec<Family> {
        let mut f = vec![Family::Query, Family::Key, Family::Value, Family::AttnOut];
        for l in 1..=self.mlp.len() {
            f.push(Family::Mlp(l));
            f.push(Family::MlpBias(l));
        }
        f.sort();
        f
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for f in self.all_families() {
            p.insert(f, self.weight(f).expect("known family").clone());
        }
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) {
        for (f, m) in p.iter() {
            if let Some(w) = self.weight_mut(f) {
                w.copy_from(m);
            }
        }
    }

    fn trainable_sorted(&self) -> Vec<Family> {
        let mut f: Vec<Family> = self
            .trainable
            .iter()
            .copied()
            .filter(|f| self.weight(*f).is_some())
            .collect();
        f.sort();
        f.dedup();
        f
    }

    pub fn forward(&self, x: &Tensor3) -> Result<AttnTrace> {
        self.validate()?;
        if x.n != self.n_in() {
            return Err(Error::InvalidShape(format!(
                "input has {} channels, model expects {}",
                x.n,
                self.n_in()
            )));
        }
        let mut trials = Vec::with_capacity(x.n_x);
        for b in 0..x.n_x {
            let xb = DMatrix::from_fn(x.n_t, x.n, |t, i| x.get(b, t, i));
            let tr = self.forward_trial(xb);
            if let Some(t) = tr.outs.iter().find_map(|o| {
                (0..o.nrows()).find(|&t| o.row(t).iter().any(|v| !v.is_finite()))
            }) {
                return Err(Error::NonFiniteState { batch: b, time: t });
            }
            trials.push(tr);
        }
        Ok(AttnTrace {
            model: self.clone(),
            n_t: x.n_t,
            trials,
        })
    }

    fn forward_trial(&self, x: DMatrix<f64>) -> Trial {
        let d = self.n_attn() / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let q = &x * self.w_q.transpose();
        let k = &x * self.w_k.transpose();
        let z = &x * self.w_v.transpose();
        let n_t = x.nrows();
        let mut a = DMatrix::zeros(n_t, self.n_attn());
        let mut s = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.columns(h * d, d);
            let kh = k.columns(h * d, d);
            let sh = softmax_rows(&((qh * kh.transpose()) * scale));
            a.columns_mut(h * d, d).copy_from(&(&sh * z.columns(h * d, d)));
            s.push(sh);
        }
        let mut outs = vec![&a * self.w_o.transpose()];
        for (l, (w, b)) in self.mlp.iter().zip(&self.bias).enumerate() {
            let mut pre = outs[l].clone() * w.transpose();
            for mut row in pre.row_iter_mut() {
                row += b.transpose();
            }
            if l + 1 < self.mlp.len() {
                pre.apply(|v| *v = v.tanh());
            }
            outs.push(pre);
        }
        Trial { x, q, k, z, s, a, outs }
    }
}

fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mx = row.max();
        row.apply(|v| *v = (*v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise softmax Jacobian `diag(s) - s sᵀ` applied to `d` (self-adjoint).
fn softmax_jvp(s: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.component_mul(d);
    for r in 0..s.nrows() {
        let inner = s.row(r).dot(&d.row(r));
        for c in 0..s.ncols() {
            out[(r, c)] -= s[(r, c)] * inner;
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Trial {
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    z: DMatrix<f64>,
    s: Vec<DMatrix<f64>>,
    a: DMatrix<f64>,
    /// `O_1 .. O_L`, the last being the readout `Y`.
    outs: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct AttnTrace {
    pub model: AttnMlp,
    n_t: usize,
    trials: Vec<Trial>,
}

impl AttnTrace {
    pub fn n_x(&self) -> usize {
        self.trials.len()
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    /// Attention weights of trial `b`, head `h` (rows sum to one).
    pub fn attention(&self, b: usize, h: usize) -> &DMatrix<f64> {
        &self.trials[b].s[h]
    }

    pub fn output(&self) -> Tensor3 {
        self.pack(|tr| vec![tr.outs.last().expect("readout").clone()])
    }

    /// Global state `cat(A, O_1, .., O_L)` per token.
    pub fn state(&self) -> Tensor3 {
        self.pack(|tr| {
            let mut parts = vec![tr.a.clone()];
            parts.extend(tr.outs.iter().cloned());
            parts
        })
    }

    fn pack(&self, f: impl Fn(&Trial) -> Vec<DMatrix<f64>>) -> Tensor3 {
        let blocks: Vec<Vec<DMatrix<f64>>> = self.trials.iter().map(f).collect();
        let width: usize = blocks[0].iter().map(|m| m.ncols()).sum();
        let mut out = Tensor3::zeros(self.n_x(), self.n_t, width);
        for (b, parts) in blocks.iter().enumerate() {
            let mut off = 0;
            for p in parts {
                for t in 0..self.n_t {
                    for c in 0..p.ncols() {
                        out.set(b, t, off + c, p[(t, c)]);
                    }
                }
                off += p.ncols();
            }
        }
        out
    }

    fn unpack(&self, u: &Tensor3, b: usize) -> Vec<DMatrix<f64>> {
        let mut off = 0;
        self.model
            .state_widths()
            .into_iter()
            .map(|w| {
                let m = DMatrix::from_fn(self.n_t, w, |t, c| u.get(b, t, off + c));
                off += w;
                m
            })
            .collect()
    }

    pub fn state_width(&self) -> usize {
        self.model.state_width()
    }

    /// Trainable families in canonical order.
    pub fn trainable(&self) -> Vec<Family> {
        self.model.trainable_sorted()
    }

    pub fn param_zeros(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for f in self.trainable() {
            let w = self.model.weight(f).expect("known family");
            p.insert(f, DMatrix::zeros(w.nrows(), w.ncols()));
        }
        p
    }

    /// Weight sites `cat(X, X, X, A, O_1, .., O_{L-1})` restricted to trainable
    /// weight families; bias families contribute a column of ones.
    pub fn weight_sites(&self) -> WeightSites {
        let train = self.trainable();
        let n_t = self.n_t;
        let site_of = |tr: &Trial, f: Family| -> DMatrix<f64> {
            match f {
                Family::Query | Family::Key | Family::Value => tr.x.clone(),
                Family::AttnOut => tr.a.clone(),
                Family::Mlp(l) => tr.outs[l - 1].clone(),
                Family::MlpBias(_) => DMatrix::from_element(n_t, 1, 1.0),
                _ => unreachable!("not an attention family"),
            }
        };
        let widths: Vec<usize> = train.iter().map(|&f| site_of(&self.trials[0], f).ncols()).collect();
        let m: usize = widths.iter().sum();
        let mut v = DMatrix::zeros(self.n_x() * n_t, m);
        let mut slices = Vec::new();
        let mut off = 0;
        for (f, w) in train.iter().zip(&widths) {
            slices.push((*f, off..off + w));
            for (b, tr) in self.trials.iter().enumerate() {
                v.view_mut((b * n_t, off), (n_t, *w)).copy_from(&site_of(tr, *f));
            }
            off += w;
        }
        WeightSites {
            v,
            replication: self.model.n_attn(),
            family_slices: slices,
            n_x: self.n_x(),
            n_t,
        }
    }

    /// Directional derivative of the global state along `dtheta`.
    pub fn jvp_params(&self, dtheta: &ParamSet) -> Result<Tensor3> {
        check_families(&self.trainable(), dtheta)?;
        let m = &self.model;
        let d = m.n_attn() / m.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let zero = |f: Family| {
            let w = m.weight(f).expect("known family");
            DMatrix::zeros(w.nrows(), w.ncols())
        };
        let get = |f: Family| dtheta.get(f).cloned().unwrap_or_else(|| zero(f));
        let (dwq, dwk, dwv, dwo) = (get(Family::Query), get(Family::Key), get(Family::Value), get(Family::AttnOut));
        let dmlp: Vec<_> = (1..=m.mlp.len()).map(|l| get(Family::Mlp(l))).collect();
        let dbias: Vec<_> = (1..=m.mlp.len()).map(|l| get(Family::MlpBias(l))).collect();

        let blocks: Vec<Vec<DMatrix<f64>>> = self
            .trials
            .iter()
            .map(|tr| {
                let dq = &tr.x * dwq.transpose();
                let dk = &tr.x * dwk.transpose();
                let dz = &tr.x * dwv.transpose();
                let mut da = DMatrix::zeros(self.n_t, m.n_attn());
                for h in 0..m.heads {
                    let cols = h * d;
                    let (qh, kh, zh) = (tr.q.columns(cols, d), tr.k.columns(cols, d), tr.z.columns(cols, d));
                    let dlog = (dq.columns(cols, d) * kh.transpose() + qh * dk.columns(cols, d).transpose()) * scale;
                    let ds = softmax_jvp(&tr.s[h], &dlog);
                    da.columns_mut(cols, d)
                        .copy_from(&(&ds * zh + &tr.s[h] * dz.columns(cols, d)));
                }
                let mut douts = vec![&da * m.w_o.transpose() + &tr.a * dwo.transpose()];
                for l in 0..m.mlp.len() {
                    let mut dpre = &douts[l] * m.mlp[l].transpose() + &tr.outs[l] * dmlp[l].transpose();
                    for mut row in dpre.row_iter_mut() {
                        row += dbias[l].transpose();
                    }
                    if l + 1 < m.mlp.len() {
                        dpre = tr.outs[l + 1].zip_map(&dpre, |o, g| (1.0 - o * o) * g);
                    }
                    douts.push(dpre);
                }
                let mut parts = vec![da];
                parts.extend(douts);
                parts
            })
            .collect();
        let width = m.state_width();
        let mut out = Tensor3::zeros(self.n_x(), self.n_t, width);
        for (b, parts) in blocks.iter().enumerate() {
            let mut off = 0;
            for p in parts {
                for t in 0..self.n_t {
                    for c in 0..p.ncols() {
                        out.set(b, t, off + c, p[(t, c)]);
                    }
                }
                off += p.ncols();
            }
        }
        Ok(out)
    }

    /// Adjoint of [`AttnTrace::jvp_params`].
    pub fn vjp_params(&self, u: &Tensor3) -> ParamSet {
        let m = &self.model;
        let d = m.n_attn() / m.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let n_layers = m.mlp.len();
        let mut gwq = DMatrix::zeros(m.n_attn(), m.n_in());
        let mut gwk = gwq.clone();
        let mut gwv = gwq.clone();
        let mut gwo = DMatrix::zeros(m.w_o.nrows(), m.w_o.ncols());
        let mut gmlp: Vec<DMatrix<f64>> = m.mlp.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let mut gbias: Vec<DMatrix<f64>> = m.bias.iter().map(|b| DMatrix::zeros(b.nrows(), 1)).collect();

        for (b, tr) in self.trials.iter().enumerate() {
            let mut g = self.unpack(u, b);
            // g[0] = cotangent of A, g[l + 1] = cotangent of O_{l+1}.
            for l in (0..n_layers).rev() {
                let mut gpre = g[l + 2].clone();
                if l + 1 < n_layers {
                    gpre = tr.outs[l + 1].zip_map(&gpre, |o, c| (1.0 - o * o) * c);
                }
                g[l + 1] += &gpre * &m.mlp[l];
                gmlp[l] += gpre.transpose() * &tr.outs[l];
                gbias[l] += gpre.row_sum().transpose();
            }
            let g1 = g[1].clone();
            g[0] += &g1 * &m.w_o;
            gwo += g1.transpose() * &tr.a;
            let ga = &g[0];
            let mut gq = DMatrix::zeros(self.n_t, m.n_attn());
            let mut gk = gq.clone();
            let mut gz = gq.clone();
            for h in 0..m.heads {
                let cols = h * d;
                let gah = ga.columns(cols, d);
                let gs = gah * tr.z.columns(cols, d).transpose();
                gz.columns_mut(cols, d).copy_from(&(tr.s[h].transpose() * gah));
                let glog = softmax_jvp(&tr.s[h], &gs) * scale;
                gq.columns_mut(cols, d).copy_from(&(&glog * tr.k.columns(cols, d)));
                gk.columns_mut(cols, d).copy_from(&(glog.transpose() * tr.q.columns(cols, d)));
            }
            gwq += gq.transpose() * &tr.x;
            gwk += gk.transpose() * &tr.x;
            gwv += gz.transpose() * &tr.x;
        }

        let mut out = ParamSet::new();
        for f in self.trainable() {
            let g = match f {
                Family::Query => gwq.clone(),
                Family::Key => gwk.clone(),
                Family::Value => gwv.clone(),
                Family::AttnOut => gwo.clone(),
                Family::Mlp(l) => gmlp[l - 1].clone(),
                Family::MlpBias(l) => gbias[l - 1].clone(),
                _ => unreachable!("not an attention family"),
            };
            out.insert(f, g);
        }
        out
    }

    /// State of the same inputs under parameters shifted by `dtheta`.
    pub fn state_shifted(&self, dtheta: &ParamSet) -> Tensor3 {
        let mut model = self.model.clone();
        for (f, d) in dtheta.iter() {
            if let Some(w) = model.weight_mut(f) {
                *w += d;
            }
        }
        let trials = self.trials.iter().map(|tr| model.forward_trial(tr.x.clone())).collect();
        AttnTrace {
            model,
            n_t: self.n_t,
            trials,
        }
        .state()
    }
}
