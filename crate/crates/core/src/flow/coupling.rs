use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, OutputAct};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Which contiguous half conditions the transform of the other half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    FirstConditions,
    SecondConditions,
}

impl Parity {
    pub fn alternate(i: usize) -> Self {
        if i % 2 == 0 {
            Parity::FirstConditions
        } else {
            Parity::SecondConditions
        }
    }

    /// `(conditioning, transformed)` index ranges for a vector of length `dim`.
    pub fn halves(self, dim: usize) -> (Range<usize>, Range<usize>) {
        let h = dim / 2;
        match self {
            Parity::FirstConditions => (0..h, h..dim),
            Parity::SecondConditions => (h..dim, 0..h),
        }
    }
}

pub(crate) fn check_input(x: &[f64], dim: usize, what: &str) -> Result<()> {
    if x.len() != dim {
        return Err(Error::dim(format!("{what} expects length {dim}, got {}", x.len())));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite input at index {i}")));
    }
    Ok(())
}

/// Affine coupling: `z_T = x_T ⊙ exp(s_c(x_C)) + t(x_C)` with the
/// conditioning half `x_C` passed through, and
/// `s_c = clamp · tanh(s / clamp)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    dim: usize,
    parity: Parity,
    s_net: Mlp,
    t_net: Mlp,
    s_clamp: f64,
}

pub const DEFAULT_S_CLAMP: f64 = 5.0;

impl CouplingLayer {
    /// `s` and `t` nets are `d/2 → d/4 → d/2`, last layer zeroed, so a fresh
    /// layer is the identity.
    pub fn new(rng: &mut impl Rng, dim: usize, parity: Parity, s_clamp: f64) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::dim(format!("coupling dimension must be even and >= 2, got {dim}")));
        }
        if !(s_clamp > 0.0) {
            return Err(Error::Contract(format!("s_clamp must be positive, got {s_clamp}")));
        }
        let h = dim / 2;
        let sizes = [h, (dim / 4).max(1), h];
        Ok(Self {
            dim,
            parity,
            s_net: Mlp::new(rng, sizes, OutputAct::Linear, true),
            t_net: Mlp::new(rng, sizes, OutputAct::Linear, true),
            s_clamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn s_net_mut(&mut self) -> &mut Mlp {
        &mut self.s_net
    }

    pub fn t_net_mut(&mut self) -> &mut Mlp {
        &mut self.t_net
    }

    fn soft_clamp(&self, s: Vec<f64>) -> Vec<f64> {
        let c = self.s_clamp;
        s.into_iter().map(|v| c * (v / c).tanh()).collect()
    }

    /// Clamped log-scales and shifts for a conditioning half.
    pub fn scale_shift(&self, cond: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.soft_clamp(self.s_net.forward(cond)), self.t_net.forward(cond))
    }

    /// Latent Gaussian read off the networks: `μ = t`, `log σ² = 2·s_c`.
    pub fn latent_stats(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (c, _) = self.parity.halves(self.dim);
        let (s, t) = self.scale_shift(&x[c]);
        (t, s.into_iter().map(|v| 2.0 * v).collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_input(x, self.dim, "coupling forward")?;
        let (c, t_range) = self.parity.halves(self.dim);
        let (s, t) = self.scale_shift(&x[c]);
        let mut z = x.to_vec();
        for ((zi, si), ti) in z[t_range].iter_mut().zip(&s).zip(&t) {
            *zi = *zi * si.exp() + ti;
        }
        Ok((z, s.iter().sum()))
    }

    /// Returns `x` and the inverse log-det, `−Σ s_c`.
    pub fn inverse(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_input(z, self.dim, "coupling inverse")?;
        let (c, t_range) = self.parity.halves(self.dim);
        let (s, t) = self.scale_shift(&z[c]);
        let mut x = z.to_vec();
        for ((xi, si), ti) in x[t_range].iter_mut().zip(&s).zip(&t) {
            *xi = (*xi - ti) * (-si).exp();
        }
        Ok((x, -s.iter().sum::<f64>()))
    }

    pub(crate) fn param_tensors(&self) -> impl Iterator<Item = &crate::autodiff::Tensor> {
        self.s_net.params().into_iter().chain(self.t_net.params())
    }

    pub(crate) fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut crate::autodiff::Tensor> {
        self.s_net.params_mut().into_iter().chain(self.t_net.params_mut())
    }

    pub(crate) const TENSORS: usize = 2 * Mlp::TENSORS;

    /// Graph version of [`CouplingLayer::forward`]. Returns
    /// `(z, logdet, (μ, log σ²))`.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        p: &[Var],
    ) -> Result<(Var, Var, (Var, Var))> {
        let h = self.dim / 2;
        let (c, t) = self.parity.halves(self.dim);
        let cond = g.slice(x, c.start, h)?;
        let trans = g.slice(x, t.start, h)?;
        let s_raw = self.s_net.forward_graph(g, cond, &p[..Mlp::TENSORS])?;
        let s_scaled = g.scale(s_raw, 1.0 / self.s_clamp);
        let s_t = g.tanh(s_scaled);
        let s = g.scale(s_t, self.s_clamp);
        let shift = self.t_net.forward_graph(g, cond, &p[Mlp::TENSORS..])?;
        let e = g.exp(s);
        let scaled = g.mul(trans, e)?;
        let z_t = g.add(scaled, shift)?;
        let z = match self.parity {
            Parity::FirstConditions => g.concat(&[cond, z_t]),
            Parity::SecondConditions => g.concat(&[z_t, cond]),
        };
        let logdet = g.sum(s);
        let log_var = g.scale(s, 2.0);
        Ok((z, logdet, (shift, log_var)))
    }
}
