//! Dense statevector simulation for up to [`MAX_QUBITS`] qubits.
//!
//! Qubit 0 is the most significant bit of the basis index, so `|10⟩` is
//! index 2 for two qubits and amplitude embedding writes `x[i]` into basis
//! state `i` unchanged.

use std::f64::consts::{FRAC_PI_2, SQRT_2};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_QUBITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// `|0…0⟩`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        check_qubits(n_qubits)?;
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    /// Wraps raw amplitudes without normalizing them.
    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        let n = amps.len();
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::dim(format!("{n} amplitudes is not a power of two")));
        }
        let n_qubits = n.trailing_zeros() as usize;
        check_qubits(n_qubits)?;
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn mask(&self, qubit: usize) -> Result<usize> {
        if qubit >= self.n_qubits {
            return Err(Error::dim(format!(
                "qubit {qubit} out of range for {} qubits",
                self.n_qubits
            )));
        }
        Ok(1 << (self.n_qubits - 1 - qubit))
    }

    /// Applies `gate` in place.
    pub fn apply(&mut self, gate: Gate) -> Result<()> {
        match gate {
            Gate::RY(q, theta) => {
                let m = self.mask(q)?;
                let (s, c) = (theta / 2.0).sin_cos();
                for i in 0..self.amps.len() {
                    if i & m == 0 {
                        let a0 = self.amps[i];
                        let a1 = self.amps[i | m];
                        self.amps[i] = a0 * c - a1 * s;
                        self.amps[i | m] = a0 * s + a1 * c;
                    }
                }
            }
            Gate::RZ(q, theta) => {
                let m = self.mask(q)?;
                let (s, c) = (theta / 2.0).sin_cos();
                let lo = Complex64::new(c, -s);
                let hi = Complex64::new(c, s);
                for (i, a) in self.amps.iter_mut().enumerate() {
                    *a *= if i & m == 0 { lo } else { hi };
                }
            }
            Gate::CNOT(c, t) => {
                if c == t {
                    return Err(Error::dim(format!("CNOT control equals target ({c})")));
                }
                let cm = self.mask(c)?;
                let tm = self.mask(t)?;
                for i in 0..self.amps.len() {
                    if i & cm != 0 && i & tm == 0 {
                        self.amps.swap(i, i | tm);
                    }
                }
            }
        }
        Ok(())
    }

    /// `⟨Z⟩` on `qubit`.
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        let m = self.mask(qubit)?;
        Ok(self
            .amps
            .iter()
            .enumerate()
            .map(|(i, a)| if i & m == 0 { a.norm_sqr() } else { -a.norm_sqr() })
            .sum())
    }
}

fn check_qubits(n: usize) -> Result<()> {
    if n == 0 || n > MAX_QUBITS {
        return Err(Error::dim(format!("qubit count {n} outside 1..={MAX_QUBITS}")));
    }
    Ok(())
}

/// Single gate with its qubit operands and (for rotations) angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    RY(usize, f64),
    RZ(usize, f64),
    CNOT(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnsatzKind {
    /// One RY per qubit per layer, then the CNOT chain.
    RyCnot,
    /// Two RZ·RY·RZ sub-layers per qubit per layer, then the CNOT chain.
    RzRyRzCnot,
}

impl AnsatzKind {
    pub fn angles_per_qubit_layer(self) -> usize {
        match self {
            AnsatzKind::RyCnot => 1,
            AnsatzKind::RzRyRzCnot => 6,
        }
    }

    /// Real dimension of the block a circuit of `n_qubits` acts on.
    pub fn block_size(self, n_qubits: usize) -> usize {
        match self {
            AnsatzKind::RyCnot => 1 << n_qubits,
            AnsatzKind::RzRyRzCnot => 2 << n_qubits,
        }
    }
}

#[derive(Clone, Copy)]
enum Slot {
    RY(usize, usize),
    RZ(usize, usize),
    CNOT(usize, usize),
}

/// Gate layout of a parameterized circuit. The layout is fixed; angles are
/// supplied per evaluation so that one ansatz can serve many inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ansatz {
    kind: AnsatzKind,
    n_qubits: usize,
    layers: usize,
}

impl Ansatz {
    pub fn new(kind: AnsatzKind, n_qubits: usize, layers: usize) -> Result<Self> {
        check_qubits(n_qubits)?;
        if layers == 0 {
            return Err(Error::dim("ansatz needs at least one layer"));
        }
        Ok(Self {
            kind,
            n_qubits,
            layers,
        })
    }

    pub fn kind(&self) -> AnsatzKind {
        self.kind
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers * self.n_qubits * self.kind.angles_per_qubit_layer()
    }

    fn slots(&self) -> Vec<Slot> {
        let n = self.n_qubits;
        let mut out = Vec::with_capacity(self.param_count() + self.layers * n);
        let mut k = 0;
        for _ in 0..self.layers {
            match self.kind {
                AnsatzKind::RyCnot => {
                    for q in 0..n {
                        out.push(Slot::RY(q, k));
                        k += 1;
                    }
                }
                AnsatzKind::RzRyRzCnot => {
                    for _ in 0..2 {
                        for q in 0..n {
                            out.push(Slot::RZ(q, k));
                            out.push(Slot::RY(q, k + 1));
                            out.push(Slot::RZ(q, k + 2));
                            k += 3;
                        }
                    }
                }
            }
            for q in 0..n.saturating_sub(1) {
                out.push(Slot::CNOT(q, q + 1));
            }
        }
        out
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(format!(
                "ansatz expects {} angles, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    fn check_state(&self, state: &StateVector) -> Result<()> {
        if state.n_qubits != self.n_qubits {
            return Err(Error::dim(format!(
                "ansatz on {} qubits given a {}-qubit state",
                self.n_qubits, state.n_qubits
            )));
        }
        Ok(())
    }

    /// The concrete gate sequence for `params`, in circuit time order.
    pub fn gates(&self, params: &[f64]) -> Result<Vec<Gate>> {
        self.check_params(params)?;
        Ok(self
            .slots()
            .into_iter()
            .map(|s| match s {
                Slot::RY(q, k) => Gate::RY(q, params[k]),
                Slot::RZ(q, k) => Gate::RZ(q, params[k]),
                Slot::CNOT(c, t) => Gate::CNOT(c, t),
            })
            .collect())
    }

    /// Applies `U(params)` in place.
    pub fn apply(&self, state: &mut StateVector, params: &[f64]) -> Result<()> {
        self.check_state(state)?;
        for g in self.gates(params)? {
            state.apply(g)?;
        }
        Ok(())
    }

    /// Applies `U(params)†`: reversed gate order with negated angles.
    pub fn apply_adjoint(&self, state: &mut StateVector, params: &[f64]) -> Result<()> {
        self.check_state(state)?;
        for g in self.gates(params)?.into_iter().rev() {
            state.apply(match g {
                Gate::RY(q, t) => Gate::RY(q, -t),
                Gate::RZ(q, t) => Gate::RZ(q, -t),
                cx => cx,
            })?;
        }
        Ok(())
    }

    pub fn run(&self, input: &EmbeddedVector, params: &[f64]) -> Result<StateVector> {
        let mut s = input.state.clone();
        self.apply(&mut s, params)?;
        Ok(s)
    }

    /// `∂(U(θ)ψ)/∂θ_k` for every k via the two-point shift rule on
    /// amplitudes: `[U(θ_k + π/2) − U(θ_k − π/2)] ψ / (2√2)`.
    ///
    /// Exact for RY/RZ because each rotation is linear in `(cos θ/2, sin θ/2)`.
    pub fn amplitude_shift_derivatives(
        &self,
        input: &StateVector,
        params: &[f64],
    ) -> Result<Vec<Vec<Complex64>>> {
        self.check_params(params)?;
        self.check_state(input)?;
        let mut shifted = params.to_vec();
        (0..params.len())
            .map(|k| {
                shifted[k] = params[k] + FRAC_PI_2;
                let mut plus = input.clone();
                self.apply(&mut plus, &shifted)?;
                shifted[k] = params[k] - FRAC_PI_2;
                let mut minus = input.clone();
                self.apply(&mut minus, &shifted)?;
                shifted[k] = params[k];
                Ok(plus
                    .amps
                    .iter()
                    .zip(&minus.amps)
                    .map(|(p, m)| (p - m) / (2.0 * SQRT_2))
                    .collect())
            })
            .collect()
    }
}

/// A normalized real vector loaded as amplitudes, remembering what is needed
/// to undo the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedVector {
    pub state: StateVector,
    pub norm: f64,
    pub pad_len: usize,
}

impl EmbeddedVector {
    /// Reverses [`amplitude_embed`] using the stored norm and padding.
    pub fn de_embed(&self) -> Vec<f64> {
        let len = self.state.amps.len() - self.pad_len;
        self.state.amps[..len].iter().map(|a| a.re * self.norm).collect()
    }
}

/// `amps[i] = x[i] / ‖x‖`, zero-padded to `2^n_qubits`.
pub fn amplitude_embed(x: &[f64], n_qubits: usize) -> Result<EmbeddedVector> {
    check_qubits(n_qubits)?;
    let dim = 1usize << n_qubits;
    if x.len() > dim {
        return Err(Error::dim(format!(
            "{} values do not fit in {n_qubits} qubits",
            x.len()
        )));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("cannot embed vector with norm {norm}")));
    }
    let mut amps = vec![Complex64::new(0.0, 0.0); dim];
    for (a, v) in amps.iter_mut().zip(x) {
        *a = Complex64::new(v / norm, 0.0);
    }
    Ok(EmbeddedVector {
        state: StateVector { n_qubits, amps },
        norm,
        pad_len: dim - x.len(),
    })
}

/// Real matrix of size `2^(n+1)` representing `U(params)` on interleaved
/// `(re, im)` coordinates, row-major.
pub fn realify_unitary(ansatz: &Ansatz, params: &[f64]) -> Result<Vec<f64>> {
    let n = 1usize << ansatz.n_qubits;
    let size = 2 * n;
    let mut out = vec![0.0; size * size];
    for col in 0..size {
        let mut amps = vec![Complex64::new(0.0, 0.0); n];
        amps[col / 2] = if col % 2 == 0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 1.0)
        };
        let mut s = StateVector {
            n_qubits: ansatz.n_qubits,
            amps,
        };
        ansatz.apply(&mut s, params)?;
        for (k, a) in s.amps.iter().enumerate() {
            out[(2 * k) * size + col] = a.re;
            out[(2 * k + 1) * size + col] = a.im;
        }
    }
    Ok(out)
}

/// Parameter-shift derivative of `⟨Z_qubit⟩` after the circuit with respect
/// to angle `k`: `[f(θ_k + π/2) − f(θ_k − π/2)] / 2`.
pub fn parameter_shift_grad(
    input: &EmbeddedVector,
    ansatz: &Ansatz,
    params: &[f64],
    qubit: usize,
    k: usize,
) -> Result<f64> {
    ansatz.check_params(params)?;
    if k >= params.len() {
        return Err(Error::dim(format!("parameter {k} of {}", params.len())));
    }
    let mut shifted = params.to_vec();
    shifted[k] = params[k] + FRAC_PI_2;
    let plus = ansatz.run(input, &shifted)?.expectation_z(qubit)?;
    shifted[k] = params[k] - FRAC_PI_2;
    let minus = ansatz.run(input, &shifted)?.expectation_z(qubit)?;
    Ok((plus - minus) / 2.0)
}
