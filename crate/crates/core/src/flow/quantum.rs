use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::coupling::{check_input, Parity};
use super::mlp::{Mlp, OutputAct};
use crate::autodiff::{CustomBackward, Graph, Var};
use crate::error::{Error, Result};
use crate::qsim::{Ansatz, AnsatzKind, StateVector};

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-8;

/// Orthogonal block driven by a parameterized circuit.
///
/// The first `B` entries `v` of the transformed half are normalized, loaded
/// as amplitudes (real for RY·CNOT, consecutive `(re, im)` pairs for
/// RZ·RY·RZ·CNOT), rotated by `U(θ)` with `θ = angle_net(x_C)`, read back and
/// rescaled by `‖v‖`. The map `v ↦ U v` is orthogonal, so the block's
/// log-det is exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumBlock {
    dim: usize,
    parity: Parity,
    ansatz: Ansatz,
    angle_net: Mlp,
    block_size: usize,
    epsilon_floor: f64,
}

/// Per-call diagnostics of a quantum block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockNorms {
    pub input: f64,
    pub output: f64,
    /// The block was below `epsilon_floor` and acted as the identity.
    pub fallback: bool,
}

impl QuantumBlock {
    /// Angle net is `d/2 → d/4 → P` with an `π·tanh` head; its last layer
    /// starts at zero so every angle starts at zero.
    pub fn new(
        rng: &mut impl Rng,
        dim: usize,
        parity: Parity,
        kind: AnsatzKind,
        n_qubits: usize,
        layers: usize,
        epsilon_floor: f64,
    ) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::dim(format!("quantum block dimension must be even, got {dim}")));
        }
        let ansatz = Ansatz::new(kind, n_qubits, layers)?;
        let block_size = kind.block_size(n_qubits);
        if block_size > dim / 2 {
            return Err(Error::dim(format!(
                "{kind:?} on {n_qubits} qubits acts on {block_size} values but only {} are available",
                dim / 2
            )));
        }
        let h = dim / 2;
        let angle_net = Mlp::new(
            rng,
            [h, (dim / 4).max(1), ansatz.param_count()],
            OutputAct::AngleTanh,
            true,
        );
        Ok(Self {
            dim,
            parity,
            ansatz,
            angle_net,
            block_size,
            epsilon_floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn ansatz(&self) -> &Ansatz {
        &self.ansatz
    }

    pub fn angle_net_mut(&mut self) -> &mut Mlp {
        &mut self.angle_net
    }

    /// Index range of `v` inside the full vector.
    pub fn block_range(&self) -> std::ops::Range<usize> {
        let (_, t) = self.parity.halves(self.dim);
        t.start..t.start + self.block_size
    }

    pub fn angles(&self, x: &[f64]) -> Vec<f64> {
        let (c, _) = self.parity.halves(self.dim);
        self.angle_net.forward(&x[c])
    }

    fn to_state(&self, v: &[f64], scale: f64) -> StateVector {
        let amps = match self.ansatz.kind() {
            AnsatzKind::RyCnot => v.iter().map(|r| Complex64::new(r * scale, 0.0)).collect(),
            AnsatzKind::RzRyRzCnot => v
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0] * scale, p[1] * scale))
                .collect(),
        };
        StateVector::from_amplitudes(amps).expect("block size is a power of two")
    }

    fn from_state(&self, s: &StateVector, scale: f64) -> Vec<f64> {
        amps_to_reals(self.ansatz.kind(), s.amplitudes(), scale)
    }

    /// Rotates `v` by `U(θ)` (or `U(θ)†`), going through a normalized state.
    fn rotate(&self, v: &[f64], angles: &[f64], adjoint: bool) -> Result<(Vec<f64>, bool)> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < self.epsilon_floor {
            log::debug!("quantum block input norm {n:e} below floor; identity fallback");
            return Ok((v.to_vec(), true));
        }
        let mut s = self.to_state(v, 1.0 / n);
        if adjoint {
            self.ansatz.apply_adjoint(&mut s, angles)?;
        } else {
            self.ansatz.apply(&mut s, angles)?;
        }
        Ok((self.from_state(&s, n), false))
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, BlockNorms)> {
        check_input(x, self.dim, "quantum block forward")?;
        let angles = self.angles(x);
        let r = self.block_range();
        let (out, fallback) = self.rotate(&x[r.clone()], &angles, false)?;
        let norms = BlockNorms {
            input: l2(&x[r.clone()]),
            output: l2(&out),
            fallback,
        };
        let mut z = x.to_vec();
        z[r].copy_from_slice(&out);
        Ok((z, norms))
    }

    /// Returns `z` and the log-det, which is always 0.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        Ok((self.forward_traced(x)?.0, 0.0))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_input(z, self.dim, "quantum block inverse")?;
        let angles = self.angles(z);
        let r = self.block_range();
        let (out, _) = self.rotate(&z[r.clone()], &angles, true)?;
        let mut x = z.to_vec();
        x[r].copy_from_slice(&out);
        Ok(x)
    }

    pub(crate) fn param_tensors(&self) -> impl Iterator<Item = &crate::autodiff::Tensor> {
        self.angle_net.params().into_iter()
    }

    pub(crate) fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut crate::autodiff::Tensor> {
        self.angle_net.params_mut().into_iter()
    }

    pub(crate) const TENSORS: usize = Mlp::TENSORS;

    /// Graph version of [`QuantumBlock::forward_traced`]. The circuit is a
    /// custom op whose angle gradients come from amplitude parameter shifts.
    pub(crate) fn forward_graph(&self, g: &mut Graph, x: Var, p: &[Var]) -> Result<(Var, BlockNorms)> {
        let h = self.dim / 2;
        let b = self.block_size;
        let (c, t) = self.parity.halves(self.dim);
        let cond = g.slice(x, c.start, h)?;
        let angles_var = self.angle_net.forward_graph(g, cond, p)?;
        let v_var = g.slice(x, t.start, b)?;
        let v = g.value(v_var).to_vec();
        let angles = g.value(angles_var).to_vec();
        let (out, fallback) = self.rotate(&v, &angles, false)?;
        let norms = BlockNorms {
            input: l2(&v),
            output: l2(&out),
            fallback,
        };
        let rule = CircuitBackward {
            ansatz: self.ansatz.clone(),
            angles,
            state: (!fallback).then(|| self.to_state(&v, 1.0)),
        };
        let rotated = g.custom(&[angles_var, v_var], out, Box::new(rule));
        let mut parts = Vec::with_capacity(3);
        let rest = (b < h).then(|| g.slice(x, t.start + b, h - b)).transpose()?;
        let z_t = match rest {
            Some(rest) => g.concat(&[rotated, rest]),
            None => rotated,
        };
        match self.parity {
            Parity::FirstConditions => parts.extend([cond, z_t]),
            Parity::SecondConditions => parts.extend([z_t, cond]),
        }
        Ok((g.concat(&parts), norms))
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn amps_to_reals(kind: AnsatzKind, amps: &[Complex64], scale: f64) -> Vec<f64> {
    match kind {
        AnsatzKind::RyCnot => amps.iter().map(|a| a.re * scale).collect(),
        AnsatzKind::RzRyRzCnot => amps.iter().flat_map(|a| [a.re * scale, a.im * scale]).collect(),
    }
}

/// Backward rule for `out = U(θ) v`.
///
/// `∂L/∂v = U(θ)ᵀ g` in real coordinates (the adjoint circuit applied to the
/// upstream gradient) and `∂L/∂θ_k = ⟨g, ∂(U v)/∂θ_k⟩`, with the state
/// derivative taken from the two-point shift rule.
struct CircuitBackward {
    ansatz: Ansatz,
    angles: Vec<f64>,
    /// Unnormalized input amplitudes; `None` when the block fell back to
    /// the identity.
    state: Option<StateVector>,
}

impl CustomBackward for CircuitBackward {
    fn backward(&self, up: &[f64]) -> Vec<Vec<f64>> {
        let kind = self.ansatz.kind();
        let Some(state) = &self.state else {
            return vec![vec![0.0; self.angles.len()], up.to_vec()];
        };
        let to_amps = |r: &[f64]| -> Vec<Complex64> {
            match kind {
                AnsatzKind::RyCnot => r.iter().map(|v| Complex64::new(*v, 0.0)).collect(),
                AnsatzKind::RzRyRzCnot => {
                    r.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
                }
            }
        };
        let mut g_state = StateVector::from_amplitudes(to_amps(up)).expect("power of two");
        self.ansatz
            .apply_adjoint(&mut g_state, &self.angles)
            .expect("layout checked at construction");
        let dv = amps_to_reals(kind, g_state.amplitudes(), 1.0);

        let derivs = self
            .ansatz
            .amplitude_shift_derivatives(state, &self.angles)
            .expect("layout checked at construction");
        let dtheta = derivs
            .iter()
            .map(|d| {
                amps_to_reals(kind, d, 1.0)
                    .iter()
                    .zip(up)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        vec![dtheta, dv]
    }
}
