//! PCGrad-coupled sharpness-aware training of the adapter.
//!
//! One step evaluates both loss gradients at the current point, merges them
//! with PCGrad, perturbs along the merged direction, re-evaluates and merges
//! at the perturbed point, then descends from the original point. Norms and
//! inner products are taken over the whole flat adapter vector.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EditPair;
use crate::error::{Error, TensorError};
use crate::losses::{Encoded, UpdateData, DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::model::{AdapterState, BaseParams, TokenSeq};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{GradientVector, ParamVector};

type Result<T> = std::result::Result<T, Error>;

/// How the two PCGrad projections are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcGradOrder {
    /// Project `g_sft` first, then project `g_dpo` against the updated `g_sft`.
    #[default]
    Sequential,
    /// Both projections from the original gradients.
    Simultaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lambda: f64,
    pub beta: f64,
    pub rho: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub use_sam: bool,
    pub use_dpo: bool,
    pub use_pcgrad: bool,
    pub pcgrad_order: PcGradOrder,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            rho: 0.05,
            learning_rate: 0.05,
            epsilon: 1e-12,
            steps: 200,
            batch_size: 16,
            use_sam: true,
            use_dpo: true,
            use_pcgrad: true,
            pcgrad_order: PcGradOrder::Sequential,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Full method: SAM, DPO and PCGrad all on.
    pub fn corsa() -> Self {
        Self::default()
    }

    /// Plain gradient descent on the SFT loss.
    pub fn sft_baseline() -> Self {
        Self { use_sam: false, use_dpo: false, use_pcgrad: false, ..Self::default() }
    }

    /// λ as actually applied: zero when DPO is switched off.
    pub fn effective_lambda(&self) -> f64 {
        if self.use_dpo {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} = {v}")));
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return bad("rho must be >= 0, got rho", self.rho);
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be > 0, got eta", self.learning_rate);
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon must be > 0, got epsilon", self.epsilon);
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0, got lambda", self.lambda);
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad("beta must be > 0, got beta", self.beta);
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `g_i − (g_i·g_j)/(‖g_j‖² + ε)·g_j` when the two conflict, else `g_i`.
pub fn pcgrad_project(g_i: &GradientVector, g_j: &GradientVector, eps: f64) -> Result<GradientVector> {
    let dot = g_i.dot(g_j)?;
    if dot < 0.0 {
        Ok(g_i.add_scaled(g_j, -dot / (g_j.norm_sq() + eps))?)
    } else {
        Ok(g_i.clone())
    }
}

/// `Π(g_sft; g_dpo) + λ·Π(g_dpo; g_sft)` with both projections taken from
/// the original gradients.
pub fn pcgrad_merge(g_sft: &GradientVector, g_dpo: &GradientVector, lambda: f64, eps: f64) -> Result<GradientVector> {
    let a = pcgrad_project(g_sft, g_dpo, eps)?;
    let b = pcgrad_project(g_dpo, g_sft, eps)?;
    Ok(a.add_scaled(&b, lambda)?)
}

/// Merge in the step-by-step order: `g_sft` is projected first and `g_dpo`
/// is then projected against the already-projected `g_sft`, reusing the
/// original inner product.
pub fn pcgrad_merge_sequential(g_sft: &GradientVector, g_dpo: &GradientVector, lambda: f64, eps: f64) -> Result<GradientVector> {
    let dp = g_sft.dot(g_dpo)?;
    if dp >= 0.0 {
        return Ok(g_sft.add_scaled(g_dpo, lambda)?);
    }
    let g1 = g_sft.add_scaled(g_dpo, -dp / (g_dpo.norm_sq() + eps))?;
    let g2 = g_dpo.add_scaled(&g1, -dp / (g1.norm_sq() + eps))?;
    Ok(g1.add_scaled(&g2, lambda)?)
}

pub fn merge(order: PcGradOrder, g_sft: &GradientVector, g_dpo: &GradientVector, lambda: f64, eps: f64) -> Result<GradientVector> {
    match order {
        PcGradOrder::Sequential => pcgrad_merge_sequential(g_sft, g_dpo, lambda, eps),
        PcGradOrder::Simultaneous => pcgrad_merge(g_sft, g_dpo, lambda, eps),
    }
}

/// `ρ·g/(‖g‖ + ε)`.
pub fn sam_perturbation(g: &GradientVector, rho: f64, eps: f64) -> GradientVector {
    g.scaled(rho / (g.norm() + eps))
}

/// Indices into D_new and D_pairs for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub new_idx: Vec<usize>,
    pub pair_idx: Vec<usize>,
}

/// Per-pair log-probabilities on the fixed probe set after a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub margins: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl ProbeStats {
    pub fn mean_logp_new(&self) -> f64 {
        mean(&self.logp_new)
    }

    pub fn mean_logp_old(&self) -> f64 {
        mean(&self.logp_old)
    }

    pub fn mean_margin(&self) -> f64 {
        mean(&self.margins)
    }
}

/// Pairs tracked after every step, independent of the sampled batches.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    enc: Encoded,
}

impl ProbeSet {
    pub fn new(base: &BaseParams, pairs: &[EditPair]) -> Result<Self> {
        let seqs: Vec<(&TokenSeq, &TokenSeq)> = pairs.iter().flat_map(|p| [(&p.x, &p.y_new), (&p.x, &p.y_old)]).collect();
        Ok(Self { enc: Encoded::new(base, &seqs)? })
    }

    pub fn measure(&self, base: &BaseParams, adapter: &AdapterState) -> Result<ProbeStats> {
        if self.enc.n_seqs() == 0 {
            return Ok(ProbeStats { logp_new: vec![], logp_old: vec![], margins: vec![] });
        }
        let tape = Tape::new();
        let ad = adapter.on_tape(&tape, false)?;
        let lp = self.enc.log_probs(&tape, base, Some(&ad))?.value().into_data();
        let logp_new: Vec<f64> = lp.iter().step_by(2).copied().collect();
        let logp_old: Vec<f64> = lp.iter().skip(1).step_by(2).copied().collect();
        let margins = logp_new.iter().zip(&logp_old).map(|(a, b)| a - b).collect();
        Ok(ProbeStats { logp_new, logp_old, margins })
    }
}

/// One step's record, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub sft_grad_norm: f64,
    pub dpo_grad_norm: f64,
    pub grad_dot: f64,
    pub conflict: bool,
    /// `g_sft·g_dpo` at the perturbed point; equals `grad_dot` without SAM.
    pub perturbed_grad_dot: f64,
    pub eps_norm: f64,
    /// `‖g_PC‖` at the current point.
    pub merged_norm: f64,
    /// `‖g̃_PC‖`, the direction actually descended on.
    pub descent_norm: f64,
    pub update_norm: f64,
    pub sft_loss: f64,
    pub dpo_loss: Option<f64>,
    pub combined_loss: f64,
    pub sft_loss_post: f64,
    pub dpo_loss_post: Option<f64>,
    pub combined_loss_post: f64,
    pub dpo_forward_passes: usize,
    /// Tape ids of the gradient passes; process-local, so not serialized.
    #[serde(skip)]
    pub anchor_tapes: Vec<u64>,
    #[serde(skip)]
    pub descent_tapes: Vec<u64>,
    pub probe: Option<ProbeStats>,
}

/// Gradients of both losses at one point.
struct PointEval {
    sft_loss: f64,
    dpo_loss: Option<f64>,
    g_sft: GradientVector,
    g_dpo: GradientVector,
    tapes: Vec<u64>,
}

fn non_finite(step: usize, point: &'static str, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss { step, point, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

fn evaluate_point(
    base: &BaseParams,
    adapter: &AdapterState,
    data: &UpdateData,
    batch: &Minibatch,
    cfg: &OptimizerConfig,
    step: usize,
    point: &'static str,
) -> Result<PointEval> {
    let sft = data.sft(base, adapter, &batch.new_idx).map_err(|e| non_finite(step, point, e))?;
    let mut tapes = vec![sft.tape_id];
    let (dpo_loss, g_dpo) = if cfg.use_dpo {
        let dpo = data.dpo(base, adapter, &batch.pair_idx, cfg.beta).map_err(|e| non_finite(step, point, e))?;
        tapes.push(dpo.tape_id);
        (Some(dpo.loss), dpo.grad)
    } else {
        (None, ParamVector::zeros(sft.grad.layout().clone()))
    };
    let finite = sft.loss.is_finite() && dpo_loss.map_or(true, f64::is_finite) && sft.grad.is_finite() && g_dpo.is_finite();
    if !finite {
        return Err(Error::NonFiniteLoss { step, point, detail: format!("sft {} dpo {:?}", sft.loss, dpo_loss) });
    }
    Ok(PointEval { sft_loss: sft.loss, dpo_loss, g_sft: sft.grad, g_dpo, tapes })
}

fn combine(e: &PointEval, cfg: &OptimizerConfig) -> Result<GradientVector> {
    let lambda = cfg.effective_lambda();
    if cfg.use_pcgrad {
        merge(cfg.pcgrad_order, &e.g_sft, &e.g_dpo, lambda, cfg.epsilon)
    } else {
        Ok(e.g_sft.add_scaled(&e.g_dpo, lambda)?)
    }
}

/// One full update from `adapter` on the given minibatch.
pub fn corsa_step(
    base: &BaseParams,
    adapter: &AdapterState,
    data: &UpdateData,
    batch: &Minibatch,
    cfg: &OptimizerConfig,
    step: usize,
) -> Result<(AdapterState, StepTrace)> {
    cfg.validate()?;
    let lambda = cfg.effective_lambda();
    let anchor = evaluate_point(base, adapter, data, batch, cfg, step, "current")?;
    let grad_dot = anchor.g_sft.dot(&anchor.g_dpo)?;
    let g_pc = combine(&anchor, cfg)?;

    let (descent, eps_norm, perturbed_grad_dot, descent_tapes, mut dpo_passes) = if cfg.use_sam {
        let eps = sam_perturbation(&g_pc, cfg.rho, cfg.epsilon);
        let perturbed = adapter.with_params(adapter.params().add(&eps)?)?;
        let at_eps = evaluate_point(base, &perturbed, data, batch, cfg, step, "perturbed")?;
        let dot = at_eps.g_sft.dot(&at_eps.g_dpo)?;
        let dir = combine(&at_eps, cfg)?;
        (dir, eps.norm(), dot, at_eps.tapes, 2)
    } else {
        (g_pc.clone(), 0.0, grad_dot, anchor.tapes.clone(), 1)
    };
    if !cfg.use_dpo {
        dpo_passes = 0;
    }

    let next = adapter.with_params(adapter.params().add_scaled(&descent, -cfg.learning_rate)?)?;
    let update_norm = next.params().sub(adapter.params())?.norm();

    let sft_loss_post = data.sft_value(base, &next, &batch.new_idx).map_err(|e| non_finite(step, "post", e))?;
    let dpo_loss_post = if cfg.use_dpo {
        dpo_passes += 1;
        Some(data.dpo_value(base, &next, &batch.pair_idx, cfg.beta).map_err(|e| non_finite(step, "post", e))?)
    } else {
        None
    };

    let trace = StepTrace {
        step,
        sft_grad_norm: anchor.g_sft.norm(),
        dpo_grad_norm: anchor.g_dpo.norm(),
        grad_dot,
        conflict: grad_dot < 0.0,
        perturbed_grad_dot,
        eps_norm,
        merged_norm: g_pc.norm(),
        descent_norm: descent.norm(),
        update_norm,
        sft_loss: anchor.sft_loss,
        dpo_loss: anchor.dpo_loss,
        combined_loss: anchor.sft_loss + lambda * anchor.dpo_loss.unwrap_or(0.0),
        sft_loss_post,
        dpo_loss_post,
        combined_loss_post: sft_loss_post + lambda * dpo_loss_post.unwrap_or(0.0),
        dpo_forward_passes: dpo_passes,
        anchor_tapes: anchor.tapes,
        descent_tapes,
        probe: None,
    };
    Ok((next, trace))
}

/// Independent uniform minibatch draws for the two losses.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    sft: rand_chacha::ChaCha8Rng,
    dpo: rand_chacha::ChaCha8Rng,
    n_new: usize,
    n_pairs: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n_new: usize, n_pairs: usize, batch_size: usize) -> Self {
        Self { sft: rng::stream(seed, "batches/sft"), dpo: rng::stream(seed, "batches/dpo"), n_new, n_pairs, batch_size }
    }

    fn draw(rng: &mut impl Rng, n: usize, b: usize) -> Vec<usize> {
        if n == 0 {
            return vec![];
        }
        index::sample(rng, n, b.min(n)).into_vec()
    }

    pub fn next_batch(&mut self) -> Minibatch {
        Minibatch { new_idx: Self::draw(&mut self.sft, self.n_new, self.batch_size), pair_idx: Self::draw(&mut self.dpo, self.n_pairs, self.batch_size) }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: AdapterState,
    pub traces: Vec<StepTrace>,
    /// Set when a step hit a non-finite loss; `adapter` is the last good state.
    pub aborted: Option<String>,
}

/// Runs `cfg.steps` updates from `adapter`.
pub fn train(base: &BaseParams, adapter: &AdapterState, data: &UpdateData, cfg: &OptimizerConfig, probes: Option<&ProbeSet>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.n_new() == 0 {
        return Err(Error::Empty("D_new"));
    }
    if cfg.use_dpo && data.n_pairs() == 0 {
        return Err(Error::Empty("D_pairs"));
    }
    let mut sampler = BatchSampler::new(cfg.seed, data.n_new(), data.n_pairs(), cfg.batch_size);
    let mut current = adapter.clone();
    let mut traces = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        match corsa_step(base, &current, data, &batch, cfg, step) {
            Ok((next, mut trace)) => {
                if let Some(p) = probes {
                    trace.probe = Some(p.measure(base, &next)?);
                }
                current = next;
                traces.push(trace);
            }
            Err(e @ Error::NonFiniteLoss { .. }) => {
                return Ok(TrainOutcome { adapter: current, traces, aborted: Some(e.to_string()) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome { adapter: current, traces, aborted: None })
}
