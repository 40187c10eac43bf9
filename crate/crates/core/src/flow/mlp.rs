use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// What is applied after the last dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputAct {
    Linear,
    /// `π · tanh(·)`, keeping rotation angles inside (−π, π).
    AngleTanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    w: Tensor,
    b: Tensor,
}

impl Dense {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, zero: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            if zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        let w = draw(fan_out * fan_in);
        let b = draw(fan_out);
        Self {
            w: Tensor::new(vec![fan_out, fan_in], w)
                .expect("shape matches")
                .requiring_grad(),
            b: Tensor::vector(b).requiring_grad(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.w.shape()[1];
        self.w
            .values()
            .chunks_exact(n)
            .zip(self.b.values())
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Three-width tanh network `in → hidden → out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    hidden: Dense,
    output: Dense,
    act: OutputAct,
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialisation; `zero_output` zeroes the last
    /// layer so the network starts out as the zero map.
    pub fn new(
        rng: &mut impl Rng,
        sizes: [usize; 3],
        act: OutputAct,
        zero_output: bool,
    ) -> Self {
        let [i, h, o] = sizes;
        Self {
            hidden: Dense::init(rng, i, h, false),
            output: Dense::init(rng, h, o, zero_output),
            act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.output.w.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.hidden.apply(x).into_iter().map(f64::tanh).collect();
        let o = self.output.apply(&h);
        match self.act {
            OutputAct::Linear => o,
            OutputAct::AngleTanh => o.into_iter().map(|v| PI * v.tanh()).collect(),
        }
    }

    /// Number of parameter tensors (`w1, b1, w2, b2`).
    pub const TENSORS: usize = 4;

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.hidden.w, &self.hidden.b, &self.output.w, &self.output.b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.output.w,
            &mut self.output.b,
        ]
    }

    /// Same computation as [`Mlp::forward`], recorded on `g` using the
    /// parameter leaves `p` (in [`Mlp::params`] order).
    pub fn forward_graph(&self, g: &mut Graph, x: Var, p: &[Var]) -> Result<Var> {
        if p.len() != Self::TENSORS {
            return Err(Error::dim(format!("mlp needs 4 parameter vars, got {}", p.len())));
        }
        let h = g.linear(x, p[0], p[1])?;
        let h = g.tanh(h);
        let o = g.linear(h, p[2], p[3])?;
        Ok(match self.act {
            OutputAct::Linear => o,
            OutputAct::AngleTanh => {
                let t = g.tanh(o);
                g.scale(t, PI)
            }
        })
    }
}
