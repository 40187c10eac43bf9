//! Invertible flow layers and their composition.
//!
//! Direction convention: [`FlowModel::forward`] maps data to latent and
//! returns `log|det ∂z/∂x|`; training maximizes
//! `log N(z; 0, I) + logdet`. Sampling draws `z ~ N(0, I)` and applies
//! [`FlowModel::inverse`], which runs the layers in reverse.

mod checkpoint;
mod coupling;
mod mlp;
mod quantum;

pub use checkpoint::{Checkpoint, ImageMeta, CHECKPOINT_VERSION};
pub use coupling::{CouplingLayer, Parity, DEFAULT_S_CLAMP};
pub use mlp::{Mlp, OutputAct};
pub use quantum::{BlockNorms, QuantumBlock, DEFAULT_EPSILON_FLOOR};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::qsim::AnsatzKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Layer {
    Coupling(CouplingLayer),
    Quantum(QuantumBlock),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Coupling(c) => c.dim(),
            Layer::Quantum(q) => q.dim(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self {
            Layer::Coupling(c) => c.forward(x),
            Layer::Quantum(q) => q.forward(x),
        }
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Layer::Coupling(c) => Ok(c.inverse(z)?.0),
            Layer::Quantum(q) => q.inverse(z),
        }
    }

    fn tensor_count(&self) -> usize {
        match self {
            Layer::Coupling(_) => CouplingLayer::TENSORS,
            Layer::Quantum(_) => QuantumBlock::TENSORS,
        }
    }
}

/// Architecture knobs for [`FlowModel::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    /// Number of affine coupling layers `K`; parities alternate.
    pub coupling_layers: usize,
    /// Insert one quantum block after every coupling.
    pub hybrid: bool,
    pub n_qubits: usize,
    pub ansatz: AnsatzKind,
    /// Ansatz depth `p` of each quantum block.
    pub circuit_layers: usize,
    pub s_clamp: f64,
    pub epsilon_floor: f64,
}

impl ModelConfig {
    pub fn classical(dim: usize, coupling_layers: usize) -> Self {
        Self {
            dim,
            coupling_layers,
            hybrid: false,
            n_qubits: 1,
            ansatz: AnsatzKind::RyCnot,
            circuit_layers: 1,
            s_clamp: DEFAULT_S_CLAMP,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }

    pub fn hybrid(dim: usize, coupling_layers: usize, n_qubits: usize, ansatz: AnsatzKind, circuit_layers: usize) -> Self {
        Self {
            hybrid: true,
            n_qubits,
            ansatz,
            circuit_layers,
            ..Self::classical(dim, coupling_layers)
        }
    }
}

/// Everything a forward pass can report besides `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub z: Vec<f64>,
    pub logdet: f64,
    /// Per-layer log-dets, in layer order.
    pub layer_logdets: Vec<f64>,
    /// `(μ, log σ²)` read from the last coupling layer.
    pub latent: Option<(Vec<f64>, Vec<f64>)>,
    pub blocks: Vec<BlockNorms>,
}

/// Graph handles produced by [`FlowModel::forward_graph`].
pub struct GraphTrace {
    pub z: Var,
    pub logdet: Var,
    pub latent: Option<(Var, Var)>,
    pub blocks: Vec<BlockNorms>,
}

/// Ordered stack of invertible layers over `dim` coordinates with a
/// standard-normal prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<Layer>,
}

impl FlowModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for i in 0..config.coupling_layers {
            let parity = Parity::alternate(i);
            layers.push(Layer::Coupling(CouplingLayer::new(
                &mut rng,
                config.dim,
                parity,
                config.s_clamp,
            )?));
            if config.hybrid {
                layers.push(Layer::Quantum(QuantumBlock::new(
                    &mut rng,
                    config.dim,
                    parity,
                    config.ansatz,
                    config.n_qubits,
                    config.circuit_layers,
                    config.epsilon_floor,
                )?));
            }
        }
        Ok(Self {
            dim: config.dim,
            layers,
        })
    }

    pub fn from_layers(dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|l| l.dim() != dim) {
            return Err(Error::dim(format!("layer of dim {} in a {dim}-dim model", bad.dim())));
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.dim {
            return Err(Error::dim(format!("model expects length {}, got {}", self.dim, x.len())));
        }
        let mut z = x.to_vec();
        let mut layer_logdets = Vec::with_capacity(self.layers.len());
        let mut latent = None;
        let mut blocks = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("layer {i}: {m}")),
                other => other,
            };
            match layer {
                Layer::Coupling(c) => {
                    latent = Some(c.latent_stats(&z));
                    let (next, ld) = c.forward(&z).map_err(at)?;
                    z = next;
                    layer_logdets.push(ld);
                }
                Layer::Quantum(q) => {
                    let (next, norms) = q.forward_traced(&z).map_err(at)?;
                    z = next;
                    layer_logdets.push(0.0);
                    blocks.push(norms);
                }
            }
            if let Some(j) = z.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i}: non-finite output at index {j}")));
            }
        }
        Ok(ForwardTrace {
            z,
            logdet: layer_logdets.iter().sum(),
            layer_logdets,
            latent,
            blocks,
        })
    }

    /// Data → latent. Returns `(z, Σ layer log-dets)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let t = self.forward_traced(x)?;
        Ok((t.z, t.logdet))
    }

    /// Latent → data: layer inverses in reverse order.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::dim(format!("model expects length {}, got {}", self.dim, z.len())));
        }
        let n = self.layers.len();
        self.layers.iter().rev().enumerate().try_fold(z.to_vec(), |acc, (k, l)| {
            l.inverse(&acc).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("layer {}: {m}", n - 1 - k)),
                other => other,
            })
        })
    }

    /// Exact `log p(x)` under the flow.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        Ok(standard_normal_log_density(&z) + logdet)
    }

    /// `count` samples of `z ~ N(0, I)` pushed through the inverse.
    /// Deterministic for a given seed.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        latents.iter().map(|z| self.inverse(z)).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| -> Box<dyn Iterator<Item = &Tensor>> {
                match l {
                    Layer::Coupling(c) => Box::new(c.param_tensors()),
                    Layer::Quantum(q) => Box::new(q.param_tensors()),
                }
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| -> Box<dyn Iterator<Item = &mut Tensor>> {
                match l {
                    Layer::Coupling(c) => Box::new(c.param_tensors_mut()),
                    Layer::Quantum(q) => Box::new(q.param_tensors_mut()),
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Overwrites every parameter with an independent uniform draw in
    /// `[−scale, scale]`.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params_mut() {
            for v in t.values_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
    }

    /// Leaf vars for every parameter tensor, in [`FlowModel::params`] order.
    pub fn register_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|t| g.leaf(t)).collect()
    }

    /// Splits one flat parameter var (laid out as [`FlowModel::flat_params`])
    /// into per-tensor vars for [`FlowModel::forward_graph`].
    pub fn unflatten_params(&self, g: &mut Graph, flat: Var) -> Result<Vec<Var>> {
        let mut off = 0;
        let mut out = Vec::new();
        for t in self.params() {
            let s = g.slice(flat, off, t.len())?;
            out.push(g.reshape(s, t.shape().to_vec())?);
            off += t.len();
        }
        Ok(out)
    }

    /// Records the data → latent pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, params: &[Var]) -> Result<GraphTrace> {
        let mut z = x;
        let mut logdets = Vec::new();
        let mut latent = None;
        let mut blocks = Vec::new();
        let mut off = 0;
        for layer in &self.layers {
            let n = layer.tensor_count();
            let p = &params[off..off + n];
            off += n;
            match layer {
                Layer::Coupling(c) => {
                    let (next, ld, stats) = c.forward_graph(g, z, p)?;
                    z = next;
                    logdets.push(ld);
                    latent = Some(stats);
                }
                Layer::Quantum(q) => {
                    let (next, norms) = q.forward_graph(g, z, p)?;
                    z = next;
                    blocks.push(norms);
                }
            }
        }
        let logdet = if logdets.is_empty() {
            g.constant(vec![0.0])
        } else {
            let cat = g.concat(&logdets);
            g.sum(cat)
        };
        Ok(GraphTrace {
            z,
            logdet,
            latent,
            blocks,
        })
    }
}

/// `log N(z; 0, I) = −d/2·log 2π − ‖z‖²/2`.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}
