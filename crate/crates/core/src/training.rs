//! Composite loss, KL regularisation, Adam, and the epoch loop.
//!
//! Per-sample loss, averaged over a batch:
//!
//! ```text
//! total = [d/2·log 2π + ‖z‖²/2] − logdet + β·KL(μ, log σ²) + λ_q·quantum_term
//! ```
//!
//! where `z, logdet` come from the data → latent pass, `(μ, log σ²)` are the
//! shift and doubled clamped log-scale of the last coupling layer, and
//! `quantum_term` is the mean squared norm drift across quantum blocks.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Dataset, ImageGrid};
use crate::error::{Error, Result};
use crate::flow::{BlockNorms, FlowModel, ModelConfig, DEFAULT_EPSILON_FLOOR, DEFAULT_S_CLAMP};
use crate::metrics::{fid_rows, fmt17, mode_collapse_score, Extractor, FeatureMap};
use crate::qsim::AnsatzKind;

const LOG_VAR_LIMIT: f64 = 30.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Seed offset for the fixed latent draw used by per-epoch evaluation.
const EVAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `λ_q`.
    pub quantum_multiplier: f64,
    /// `β`.
    pub kl_weight: f64,
    pub seed: u64,
    pub coupling_layers: usize,
    pub hybrid: bool,
    pub n_qubits: usize,
    pub ansatz: AnsatzKind,
    pub circuit_layers: usize,
    pub s_clamp: f64,
    /// Generated samples per epoch for FID and the mode-collapse score.
    pub eval_samples: usize,
    /// Append the training data's nonzero-pixel ratio to every metrics row.
    pub log_nonzero_ratio: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            quantum_multiplier: 100.0,
            kl_weight: DEFAULT_KL_WEIGHT,
            seed: 0,
            coupling_layers: 8,
            hybrid: true,
            n_qubits: 5,
            ansatz: AnsatzKind::RyCnot,
            circuit_layers: 2,
            s_clamp: DEFAULT_S_CLAMP,
            eval_samples: 100,
            log_nonzero_ratio: false,
        }
    }
}

pub const DEFAULT_KL_WEIGHT: f64 = 1.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.kl_weight >= 0.0) || !(self.quantum_multiplier >= 0.0) {
            return Err(Error::Config("kl_weight and quantum_multiplier must be >= 0".into()));
        }
        if self.eval_samples == 1 {
            return Err(Error::Config("eval_samples must be 0 or >= 2".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            coupling_layers: self.coupling_layers,
            hybrid: self.hybrid,
            n_qubits: self.n_qubits,
            ansatz: self.ansatz,
            circuit_layers: self.circuit_layers,
            s_clamp: self.s_clamp,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            kl: self.kl_weight,
            quantum: self.quantum_multiplier,
        }
    }
}

/// `β` and `λ_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub quantum: f64,
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights { kl: 0.0, quantum: 0.0 };
}

/// Loss components, each a mean over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_prior: f64,
    /// `−logdet`; minimizing the total maximizes the log-likelihood.
    pub logdet_term: f64,
    pub kl: f64,
    pub quantum_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(nll_prior: f64, logdet_term: f64, kl: f64, quantum_term: f64, w: LossWeights) -> Self {
        Self {
            nll_prior,
            logdet_term,
            kl,
            quantum_term,
            total: nll_prior + logdet_term + w.kl * kl + w.quantum * quantum_term,
        }
    }

    /// Component-wise mean; the total is recomputed from the means.
    pub fn mean(parts: &[LossBreakdown], w: LossWeights) -> Self {
        let n = parts.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Self::assemble(
            avg(|p| p.nll_prior),
            avg(|p| p.logdet_term),
            avg(|p| p.kl),
            avg(|p| p.quantum_term),
            w,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// `½ Σ (μ² + σ² − 1 − log σ²)`, with `log σ²` clamped to `[−30, 30]`.
pub fn kl_loss(latent: &LatentGaussian) -> f64 {
    0.5 * latent
        .mu
        .iter()
        .zip(&latent.log_var)
        .map(|(m, lv)| {
            let lv = lv.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT);
            m * m + lv.exp() - 1.0 - lv
        })
        .sum::<f64>()
}

/// Graph version of [`kl_loss`].
pub fn kl_graph(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let lv = g.clamp(log_var, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
    let var = g.exp(lv);
    let mu2 = g.square(mu);
    let a = g.add(mu2, var)?;
    let b = g.offset(a, -1.0);
    let c = g.sub(b, lv)?;
    let s = g.sum(c);
    Ok(g.scale(s, 0.5))
}

/// `z = μ + exp(log σ² / 2) ⊙ ε` with `ε ~ N(0, I)` drawn from `seed`.
pub fn reparameterize(latent: &LatentGaussian, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..latent.mu.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    reparameterize_with(latent, &eps)
}

pub fn reparameterize_with(latent: &LatentGaussian, eps: &[f64]) -> Vec<f64> {
    latent
        .mu
        .iter()
        .zip(&latent.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT)).exp() * e)
        .collect()
}

/// Graph version of [`reparameterize_with`]; `eps` enters as a constant so
/// gradients reach only `μ` and `log σ²`.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, log_var: Var, eps: &[f64]) -> Result<Var> {
    let lv = g.clamp(log_var, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
    let half = g.scale(lv, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps.to_vec());
    let noise = g.mul(sigma, e)?;
    g.add(mu, noise)
}

fn prior_nll(z: &[f64]) -> f64 {
    z.len() as f64 * HALF_LOG_2PI + 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Mean squared norm drift `(‖out‖ − ‖in‖)²` across quantum blocks.
pub fn quantum_term(blocks: &[BlockNorms]) -> f64 {
    if blocks.is_empty() {
        return 0.0;
    }
    blocks.iter().map(|b| (b.output - b.input).powi(2)).sum::<f64>() / blocks.len() as f64
}

fn check_batch(model: &FlowModel, batch: &[Vec<f64>]) -> Result<()> {
    if let Some(r) = batch.iter().find(|r| r.len() != model.dim()) {
        return Err(Error::dim(format!("batch row of length {} for a {}-dim model", r.len(), model.dim())));
    }
    Ok(())
}

fn sample_breakdown(model: &FlowModel, x: &[f64], w: LossWeights, latent: Option<&LatentGaussian>) -> Result<LossBreakdown> {
    let t = model.forward_traced(x)?;
    let kl = match (latent, &t.latent) {
        (Some(l), _) => kl_loss(l),
        (None, Some((mu, log_var))) => kl_loss(&LatentGaussian {
            mu: mu.clone(),
            log_var: log_var.clone(),
        }),
        (None, None) => 0.0,
    };
    Ok(LossBreakdown::assemble(prior_nll(&t.z), 0.0 - t.logdet, kl, quantum_term(&t.blocks), w))
}

/// Prior NLL and log-det terms only (`β = λ_q = 0`).
pub fn nll_loss(model: &FlowModel, batch: &[Vec<f64>]) -> Result<LossBreakdown> {
    check_batch(model, batch)?;
    let parts = batch
        .iter()
        .map(|x| {
            let t = model.forward_traced(x)?;
            Ok(LossBreakdown::assemble(prior_nll(&t.z), 0.0 - t.logdet, 0.0, 0.0, LossWeights::NONE))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&parts, LossWeights::NONE))
}

/// All four terms, batch-averaged.
pub fn composite_loss(model: &FlowModel, batch: &[Vec<f64>], w: LossWeights) -> Result<LossBreakdown> {
    composite_loss_with_latent(model, batch, w, None)
}

/// As [`composite_loss`], but with the KL term taken from `latent` instead
/// of the last coupling layer.
pub fn composite_loss_with_latent(
    model: &FlowModel,
    batch: &[Vec<f64>],
    w: LossWeights,
    latent: Option<&LatentGaussian>,
) -> Result<LossBreakdown> {
    check_batch(model, batch)?;
    let parts = batch
        .iter()
        .map(|x| sample_breakdown(model, x, w, latent))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&parts, w))
}

/// Records the per-sample total loss on `g`. The quantum term enters as a
/// constant: it carries no gradient.
pub fn loss_graph(
    model: &FlowModel,
    g: &mut Graph,
    x: Var,
    params: &[Var],
    w: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let t = model.forward_graph(g, x, params)?;
    let d = model.dim() as f64;
    let zz = g.square(t.z);
    let ss = g.sum(zz);
    let half = g.scale(ss, 0.5);
    let nll = g.offset(half, d * HALF_LOG_2PI);
    let ld = g.neg(t.logdet);
    let ld_value = 0.0 - g.value(t.logdet)[0];
    let mut total = g.add(nll, ld)?;
    let kl = match t.latent {
        Some((mu, lv)) => {
            let kl = kl_graph(g, mu, lv)?;
            let weighted = g.scale(kl, w.kl);
            total = g.add(total, weighted)?;
            g.value(kl)[0]
        }
        None => 0.0,
    };
    let q = quantum_term(&t.blocks);
    let qc = g.constant(vec![w.quantum * q]);
    total = g.add(total, qc)?;
    let parts = LossBreakdown::assemble(g.value(nll)[0], ld_value, kl, q, w);
    Ok((total, parts))
}

/// Per-sample loss and flat parameter gradient.
pub fn sample_gradient(model: &FlowModel, x: &[f64], w: LossWeights) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut g = Graph::new();
    let params = model.register_params(&mut g);
    let xv = g.constant(x.to_vec());
    let (total, parts) = loss_graph(model, &mut g, xv, &params, w)?;
    g.backward(total)?;
    let mut grad = Vec::with_capacity(model.param_count());
    for (p, t) in params.iter().zip(model.params()) {
        match g.grad(*p) {
            Some(gr) => grad.extend_from_slice(gr),
            None => grad.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    Ok((parts, grad))
}

/// Batch-mean loss and gradient. Samples are processed in parallel and the
/// per-sample gradients summed in batch order, so the result does not
/// depend on the thread count.
pub fn batch_gradient(model: &FlowModel, batch: &[Vec<f64>], w: LossWeights) -> Result<(LossBreakdown, Vec<f64>)> {
    check_batch(model, batch)?;
    let per: Vec<Result<(LossBreakdown, Vec<f64>)>> =
        batch.par_iter().map(|x| sample_gradient(model, x, w)).collect();
    let mut grad = vec![0.0; model.param_count()];
    let mut parts = Vec::with_capacity(batch.len());
    for r in per {
        let (p, gr) = r?;
        parts.push(p);
        grad.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|v| *v /= m);
    Ok((LossBreakdown::mean(&parts, w), grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub fid: f64,
    pub mode_collapse_score: f64,
    pub nonzero_pixel_ratio: Option<f64>,
    /// Single-image runs only: smallest L∞ pixel distance between a
    /// generated sample and the training image.
    pub linf_best: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "loss_total",
    "loss_nll",
    "loss_logdet",
    "loss_kl",
    "loss_quantum",
    "fid",
    "mode_collapse_score",
];

impl RunMetrics {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Contract(format!("writing metrics: {e}"));
        let first = self.epochs.first();
        let with_ratio = first.is_some_and(|e| e.nonzero_pixel_ratio.is_some());
        let with_linf = first.is_some_and(|e| e.linf_best.is_some());
        let mut header: Vec<&str> = METRICS_HEADER.to_vec();
        if with_ratio {
            header.push("nonzero_pixel_ratio");
        }
        if with_linf {
            header.push("linf_best");
        }
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.epochs {
            let l = &e.loss;
            let mut row = vec![
                e.epoch.to_string(),
                fmt17(l.total),
                fmt17(l.nll_prior),
                fmt17(l.logdet_term),
                fmt17(l.kl),
                fmt17(l.quantum_term),
                fmt17(e.fid),
                fmt17(e.mode_collapse_score),
            ];
            if with_ratio {
                row.push(fmt17(e.nonzero_pixel_ratio.unwrap_or(f64::NAN)));
            }
            if with_linf {
                row.push(fmt17(e.linf_best.unwrap_or(f64::NAN)));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Parses what [`RunMetrics::write_csv`] produces.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(r) => r.map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty metrics file".into(),
                })
            }
        };
        let names: Vec<&str> = header.iter().collect();
        if names.len() < 8 || names[..8] != METRICS_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: "unexpected metrics header".into(),
            });
        }
        let col = |name: &str| names.iter().position(|n| *n == name);
        let (ratio_col, linf_col) = (col("nonzero_pixel_ratio"), col("linf_best"));
        let mut epochs = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let num = |j: usize| -> Result<f64> {
                rec.get(j).and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad value in column {}", j + 1),
                })
            };
            let epoch = rec.get(0).and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
                line,
                message: "bad epoch".into(),
            })?;
            epochs.push(EpochMetrics {
                epoch,
                loss: LossBreakdown {
                    total: num(1)?,
                    nll_prior: num(2)?,
                    logdet_term: num(3)?,
                    kl: num(4)?,
                    quantum_term: num(5)?,
                },
                fid: num(6)?,
                mode_collapse_score: num(7)?,
                nonzero_pixel_ratio: ratio_col.map(num).transpose()?,
                linf_best: linf_col.map(num).transpose()?,
            });
        }
        Ok(Self { epochs })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub metrics: RunMetrics,
}

/// A run that stopped early, with every epoch completed before the failure.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub partial: RunMetrics,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} complete epochs)", self.error, self.partial.epochs.len())
    }
}

impl std::error::Error for TrainAbort {}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self {
            error,
            partial: RunMetrics::default(),
        }
    }
}

/// Model samples mapped into `[−1, 1]`, for evaluation.
pub fn generate_rows(model: &FlowModel, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(model
        .sample(count, seed)?
        .into_iter()
        .map(|r| r.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }).collect())
        .collect())
}

struct Evaluator {
    map: FeatureMap,
    reference: Vec<Vec<f64>>,
    samples: usize,
    seed: u64,
    target: Option<ImageGrid>,
}

impl Evaluator {
    fn evaluate(&self, model: &FlowModel) -> Result<(f64, f64, Option<f64>)> {
        if self.samples == 0 || self.reference.len() < 2 {
            return Ok((f64::NAN, f64::NAN, None));
        }
        let gen = generate_rows(model, self.samples, self.seed)?;
        let fid = fid_rows(&self.map, &self.reference, &gen)?;
        let mc = mode_collapse_score(&gen, &self.reference)?;
        let linf = self.target.as_ref().map(|t| {
            gen.iter()
                .map(|row| {
                    row.iter()
                        .zip(t.pixels())
                        .map(|(v, p)| ((v + 1.0) * 127.5 - p).abs())
                        .fold(0.0, f64::max)
                })
                .fold(f64::INFINITY, f64::min)
        });
        Ok((fid, mc, linf))
    }
}

/// Trains a fresh model on `dataset`.
///
/// `reference` holds held-out model-space rows for the per-epoch FID and
/// mode-collapse score. Each epoch shuffles with a seeded generator, takes
/// one Adam step per batch, and reports the mean of the pre-update batch
/// losses.
pub fn train_run(dataset: &Dataset, reference: &[Vec<f64>], config: &TrainConfig) -> Result<TrainOutcome, TrainAbort> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()).into());
    }
    let rows = dataset.model_rows();
    let mut model = FlowModel::new(&config.model_config(dataset.dim()), config.seed)?;
    let evaluator = Evaluator {
        map: FeatureMap::fit(Extractor::Identity, reference)?,
        reference: reference.to_vec(),
        samples: config.eval_samples,
        seed: config.seed ^ EVAL_SEED_SALT,
        target: (dataset.len() == 1).then(|| dataset.images[0].clone()),
    };
    let ratio = config.log_nonzero_ratio.then(|| dataset.nonzero_pixel_ratio());
    let w = config.weights();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut adam = AdamState::new(model.param_count());
    let mut metrics = RunMetrics::default();
    let mut order: Vec<usize> = (0..rows.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut parts = Vec::with_capacity(rows.len());
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
            let abort = |detail: String, metrics: &RunMetrics| TrainAbort {
                error: Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    detail,
                },
                partial: metrics.clone(),
            };
            let (loss, grad) = match batch_gradient(&model, &batch, w) {
                Ok(v) => v,
                Err(Error::Numeric(m)) => return Err(abort(m, &metrics)),
                Err(e) => {
                    return Err(TrainAbort {
                        error: e,
                        partial: metrics,
                    })
                }
            };
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(abort(format!("loss {loss:?}"), &metrics));
            }
            parts.extend(std::iter::repeat(loss).take(batch.len()));
            let mut flat = model.flat_params();
            adam_step(&mut flat, &grad, &mut adam, config.learning_rate)?;
            model.set_flat_params(&flat)?;
        }
        let (fid, mc, linf) = evaluator.evaluate(&model).map_err(|e| TrainAbort {
            error: match e {
                Error::Numeric(m) => Error::Numeric(format!("evaluating epoch {epoch}: {m}")),
                other => other,
            },
            partial: metrics.clone(),
        })?;
        let loss = LossBreakdown::mean(&parts, w);
        log::info!(
            "epoch {epoch}: loss {:.6} (nll {:.4}, logdet {:.4}, kl {:.4}) fid {fid:.4} mc {mc:.4}",
            loss.total,
            loss.nll_prior,
            loss.logdet_term,
            loss.kl
        );
        metrics.epochs.push(EpochMetrics {
            epoch,
            loss,
            fid,
            mode_collapse_score: mc,
            nonzero_pixel_ratio: ratio,
            linf_best: linf,
        });
    }
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::{synthetic_dataset, SynthSpec, DEFAULT_BIAS};
    use crate::flow::{CouplingLayer, Layer, Parity};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{E, PI};

    fn identity(dim: usize) -> FlowModel {
        FlowModel::new(&ModelConfig::classical(dim, 2), 0).unwrap()
    }

    #[test]
    fn nll_at_origin_and_unit_norm() {
        let l = nll_loss(&identity(2), &[vec![0.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(l.nll_prior, (2.0 * PI).ln(), epsilon = 1e-15);
        assert_eq!(l.logdet_term, 0.0);
        let l = nll_loss(&identity(2), &[vec![1.0, -1.0]]).unwrap();
        assert_abs_diff_eq!(l.nll_prior, (2.0 * PI).ln() + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn nll_matches_brute_force_density() {
        // Forward log-scale −1 on coordinate 2: data density is
        // N(x1; 0, 1)·N(x2; 0, e²).
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = CouplingLayer::new(&mut rng, 2, Parity::FirstConditions, DEFAULT_S_CLAMP).unwrap();
        c.s_net_mut().params_mut()[3].values_mut()[0] = DEFAULT_S_CLAMP * (-1.0 / DEFAULT_S_CLAMP).atanh();
        let model = FlowModel::from_layers(2, vec![Layer::Coupling(c)]).unwrap();
        let x = [0.4, 1.7];
        let l = nll_loss(&model, &[x.to_vec()]).unwrap();
        // Numerical Jacobian of the forward map.
        let h = 1e-6;
        let f = |v: [f64; 2]| model.forward(&v).unwrap().0;
        let j11 = (f([x[0] + h, x[1]])[0] - f([x[0] - h, x[1]])[0]) / (2.0 * h);
        let j12 = (f([x[0], x[1] + h])[0] - f([x[0], x[1] - h])[0]) / (2.0 * h);
        let j21 = (f([x[0] + h, x[1]])[1] - f([x[0] - h, x[1]])[1]) / (2.0 * h);
        let j22 = (f([x[0], x[1] + h])[1] - f([x[0], x[1] - h])[1]) / (2.0 * h);
        let z = f(x);
        let density = (-0.5 * (z[0] * z[0] + z[1] * z[1])).exp() / (2.0 * PI) * (j11 * j22 - j12 * j21).abs();
        let brute = -density.ln();
        assert!((l.total - brute).abs() / brute.abs() < 1e-6);
        let analytic = 0.5 * (2.0 * PI).ln() + 0.5 * x[0] * x[0] + 0.5 * (2.0 * PI * E * E).ln() + x[1] * x[1] / (2.0 * E * E);
        assert_abs_diff_eq!(l.total, analytic, epsilon = 1e-12);
    }

    #[test]
    fn kl_cases() {
        let kl = |mu: f64, lv: f64| kl_loss(&LatentGaussian { mu: vec![mu], log_var: vec![lv] });
        assert_eq!(kl(0.0, 0.0), 0.0);
        assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!((kl(0.0, 1.0) - (E - 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_cases() {
        let tight = LatentGaussian {
            mu: vec![1.5, -2.0],
            log_var: vec![-1e6, -1e6],
        };
        let z = reparameterize(&tight, 4);
        assert!((z[0] - 1.5).abs() < 1e-6 && (z[1] + 2.0).abs() < 1e-6);
        let unit = LatentGaussian {
            mu: vec![0.0; 3],
            log_var: vec![0.0; 3],
        };
        assert_eq!(reparameterize_with(&unit, &[0.3, -1.0, 2.0]), vec![0.3, -1.0, 2.0]);

        let n = 100_000;
        let l = LatentGaussian {
            mu: vec![0.7],
            log_var: vec![(2.0f64).ln()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = (0..n).map(|_| reparameterize(&l, rng.gen())[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 3.0 * 2f64.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn reparameterize_gradient_skips_noise() {
        let mut g = Graph::new();
        let mu = g.parameter(vec![0.5, -0.5]);
        let lv = g.parameter(vec![0.2, -0.4]);
        let z = reparameterize_graph(&mut g, mu, lv, &[1.0, 2.0]).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(mu).unwrap(), &[1.0, 1.0]);
        let dlv = g.grad(lv).unwrap();
        assert_abs_diff_eq!(dlv[0], 0.5 * (0.1f64).exp() * 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dlv[1], 0.5 * (-0.2f64).exp() * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn composite_degenerate_weights_equal_nll() {
        let mut model = FlowModel::new(&ModelConfig::hybrid(8, 2, 2, AnsatzKind::RyCnot, 1), 1).unwrap();
        model.randomize(2, 0.5);
        let batch: Vec<Vec<f64>> = (0..4).map(|i| (0..8).map(|j| ((i * 8 + j) as f64).sin()).collect()).collect();
        let a = composite_loss(&model, &batch, LossWeights::NONE).unwrap();
        let b = nll_loss(&model, &batch).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn quantum_term_vanishes_under_exact_simulation() {
        let mut model = FlowModel::new(&ModelConfig::hybrid(16, 3, 3, AnsatzKind::RyCnot, 2), 1).unwrap();
        model.randomize(3, 0.5);
        let batch: Vec<Vec<f64>> = (0..5).map(|i| (0..16).map(|j| ((i * 16 + j) as f64).cos()).collect()).collect();
        let w = LossWeights { kl: 0.0, quantum: 100.0 };
        let l = composite_loss(&model, &batch, w).unwrap();
        assert!(l.quantum_term < 1e-18, "{}", l.quantum_term);
        assert!((l.total - nll_loss(&model, &batch).unwrap().total).abs() < 1e-12);
    }

    #[test]
    fn forced_latent_adds_one() {
        let model = identity(2);
        let latent = LatentGaussian {
            mu: vec![1.0, 1.0],
            log_var: vec![0.0, 0.0],
        };
        let batch = vec![vec![0.3, 0.1]];
        let w = LossWeights { kl: 1.0, quantum: 0.0 };
        let with = composite_loss_with_latent(&model, &batch, w, Some(&latent)).unwrap();
        let without = nll_loss(&model, &batch).unwrap();
        assert_eq!(with.kl, 1.0);
        assert_eq!(with.total - without.total, 1.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for (seed, w) in [(0, LossWeights::NONE), (1, LossWeights { kl: 0.7, quantum: 0.0 })] {
            let mut model = FlowModel::new(&ModelConfig::classical(8, 3), seed).unwrap();
            model.randomize(seed + 10, 0.5);
            let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9 + seed as f64).sin()).collect();
            let err = grad_check(
                |g, flat| {
                    let p = model.unflatten_params(g, flat)?;
                    let xv = g.constant(x.clone());
                    Ok(loss_graph(&model, g, xv, &p, w)?.0)
                },
                &model.flat_params(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let mut model = FlowModel::new(&ModelConfig::hybrid(8, 2, 2, AnsatzKind::RyCnot, 1), 4).unwrap();
        model.randomize(5, 0.4);
        let batch: Vec<Vec<f64>> = (0..3).map(|i| (0..8).map(|j| ((i + j) as f64 * 0.3).sin()).collect()).collect();
        let w = LossWeights { kl: 0.5, quantum: 100.0 };
        let (loss, grad) = batch_gradient(&model, &batch, w).unwrap();
        let numeric = composite_loss(&model, &batch, w).unwrap();
        assert!((loss.total - numeric.total).abs() < 1e-12);
        let mut expect = vec![0.0; grad.len()];
        for x in &batch {
            let (_, g) = sample_gradient(&model, x, w).unwrap();
            expect.iter_mut().zip(g).for_each(|(a, b)| *a += b / 3.0);
        }
        for (a, b) in grad.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 0.01).unwrap();
            // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε).
            assert_abs_diff_eq!(p[0], -0.01 * g / (g.abs() + 1e-8), epsilon = 1e-15);
        }
        assert!(adam_step(&mut [0.0], &[1.0, 2.0], &mut AdamState::new(1), 0.1).is_err());
    }

    #[test]
    fn adam_bowl_follows_scalar_recurrence() {
        // f(w) = w², w₀ = 1, lr = 0.1. Momentum carries w past the minimum
        // after ~11 steps, so |w| falls monotonically only until then.
        let mut w = vec![1.0];
        let mut s = AdamState::new(1);
        let (mut m, mut v, mut ws) = (0.0f64, 0.0f64, 1.0f64);
        let mut prev = 1.0f64;
        for t in 1..=50 {
            let g = 2.0 * w[0];
            adam_step(&mut w, &[g], &mut s, 0.1).unwrap();
            let gs = 2.0 * ws;
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            ws -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert_abs_diff_eq!(w[0], ws, epsilon = 1e-14);
            if t <= 11 {
                assert!(w[0].abs() < prev);
            }
            prev = w[0].abs();
        }
        assert!(w[0].abs() < 0.01);
    }

    fn tiny_dataset(count: usize) -> Dataset {
        let spec = SynthSpec {
            count,
            seed: 9,
            canvas: 64,
            ..SynthSpec::default()
        };
        synthetic_dataset(&spec, 4, 4, DEFAULT_BIAS).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            coupling_layers: 2,
            n_qubits: 2,
            circuit_layers: 1,
            eval_samples: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_sample_first_epoch_is_prior_nll() {
        let ds = tiny_dataset(1);
        let reference = tiny_dataset(6).model_rows();
        let out = train_run(&ds, &reference, &TrainConfig { epochs: 1, ..tiny_config() }).unwrap();
        let x = &ds.model_rows()[0];
        let expected = 16.0 * HALF_LOG_2PI + 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let e = &out.metrics.epochs[0];
        assert!((e.loss.total - expected).abs() < 1e-10, "{} vs {expected}", e.loss.total);
        assert!(e.linf_best.is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(12);
        let reference = tiny_dataset(20).model_rows();
        let a = train_run(&ds, &reference, &tiny_config()).unwrap();
        let b = train_run(&ds, &reference, &tiny_config()).unwrap();
        assert_eq!(a.metrics.to_csv_string(), b.metrics.to_csv_string());
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let ds = tiny_dataset(8);
        let reference = tiny_dataset(20).model_rows();
        let cfg = TrainConfig {
            log_nonzero_ratio: true,
            ..tiny_config()
        };
        let m = train_run(&ds, &reference, &cfg).unwrap().metrics;
        let text = m.to_csv_string();
        assert!(text.starts_with(
            "epoch,loss_total,loss_nll,loss_logdet,loss_kl,loss_quantum,fid,mode_collapse_score,nonzero_pixel_ratio\n"
        ));
        assert_eq!(RunMetrics::read_csv(text.as_bytes()).unwrap(), m);
    }

    #[test]
    fn config_validation() {
        assert!(matches!(TrainConfig { epochs: 0, ..tiny_config() }.validate(), Err(Error::Config(_))));
        assert!(matches!(TrainConfig { batch_size: 0, ..tiny_config() }.validate(), Err(Error::Config(_))));
        assert!(matches!(TrainConfig { learning_rate: 0.0, ..tiny_config() }.validate(), Err(Error::Config(_))));
        let empty = tiny_dataset(3).take(0);
        assert!(train_run(&empty, &[], &tiny_config()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 1..6), lv_seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(lv_seed);
            let log_var: Vec<f64> = mu.iter().map(|_| rng.gen_range(-8.0..8.0)).collect();
            let kl = kl_loss(&LatentGaussian { mu, log_var });
            prop_assert!(kl >= 0.0);
        }

        #[test]
        fn decomposition_identity(seed in 0u64..500) {
            let mut model = FlowModel::new(&ModelConfig::hybrid(8, 2, 1, AnsatzKind::RzRyRzCnot, 1), seed).unwrap();
            model.randomize(seed, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let w = LossWeights { kl: rng.gen_range(0.0..2.0), quantum: 100.0 };
            let l = composite_loss(&model, &batch, w).unwrap();
            let sum = l.nll_prior + l.logdet_term + w.kl * l.kl + w.quantum * l.quantum_term;
            prop_assert!((l.total - sum).abs() <= 1e-12);
        }
    }
}
