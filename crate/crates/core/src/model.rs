//! Tiny autoregressive token scorer with a frozen base and low-rank adapters.
//!
//! Architecture: the last `context` tokens are embedded and concatenated,
//! passed through one tanh hidden layer and projected to vocabulary logits.
//! Both linear layers (`w1`, `w2`) carry an adapter pair `(A, B)`; the
//! effective weight is `W + (alpha / rank) · B · A`. The embedding is never
//! adapted.
//!
//! Token id [`STOP_TOKEN`] ends a decoded answer and [`PAD_TOKEN`] left-pads
//! short contexts.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, TensorError};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamLayout, ParamSlot, ParamVector, Tensor};

pub const STOP_TOKEN: usize = 0;
pub const PAD_TOKEN: usize = 1;

pub const W1_A: &str = "w1.lora_a";
pub const W1_B: &str = "w1.lora_b";
pub const W2_A: &str = "w2.lora_a";
pub const W2_B: &str = "w2.lora_b";

type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub context: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { vocab: 64, embed: 16, context: 8, hidden: 32 }
    }
}

impl ModelDims {
    pub fn input_width(&self) -> usize {
        self.embed * self.context
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 || self.embed == 0 || self.context == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate model dims {self:?}")));
        }
        Ok(())
    }
}

/// Token id sequence (query `x` or target `y`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens before the first stop token.
    pub fn answer(&self) -> &[usize] {
        let end = self.0.iter().position(|&t| t == STOP_TOKEN).unwrap_or(self.0.len());
        &self.0[..end]
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(ids: Vec<usize>) -> Self {
        Self(ids)
    }
}

/// Frozen base parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    pub dims: ModelDims,
    pub embed: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BASE_BLOCKS: [&str; 5] = ["embed", "w1", "b1", "w2", "b2"];

impl BaseParams {
    pub fn random(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let mut normal = |shape: &[usize], std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let embed = normal(&[dims.vocab, dims.embed], 1.0);
        let w1 = normal(&[dims.hidden, dims.input_width()], 1.0 / (dims.input_width() as f64).sqrt());
        let w2 = normal(&[dims.vocab, dims.hidden], 1.0 / (dims.hidden as f64).sqrt());
        Ok(Self { dims, embed, w1, b1: Tensor::zeros(&[1, dims.hidden]), w2, b2: Tensor::zeros(&[1, dims.vocab]) })
    }

    fn blocks(&self) -> [(&'static str, &Tensor); 5] {
        [("embed", &self.embed), ("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn to_vector(&self) -> ParamVector {
        ParamVector::from_tensors(self.blocks()).expect("unique block names")
    }

    pub fn from_vector(dims: ModelDims, v: &ParamVector) -> Result<Self> {
        let get = |name: &str| v.tensor(name).ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")));
        let out = Self { dims, embed: get("embed")?, w1: get("w1")?, b1: get("b1")?, w2: get("w2")?, b2: get("b2")? };
        let expect = Self::random(dims, &mut rng::stream(0, "shape-probe"))?;
        for ((name, a), (_, b)) in out.blocks().iter().zip(expect.blocks().iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("block `{name}` has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(out)
    }

    /// Concatenated context embeddings, one row per context window.
    pub fn features(&self, contexts: &[usize]) -> Tensor {
        let d = self.dims.embed;
        let rows = contexts.len() / self.dims.context;
        let mut data = Vec::with_capacity(rows * self.dims.input_width());
        for &tok in contexts {
            data.extend_from_slice(&self.embed.data()[tok * d..(tok + 1) * d]);
        }
        Tensor::new(vec![rows, self.dims.input_width()], data).expect("feature shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

impl AdapterConfig {
    /// Rank 32 / alpha 64, the large-model setting; oversized for the toy scorer.
    pub fn large() -> Self {
        Self { rank: 32, alpha: 64.0 }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Trainable low-rank adapter φ, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub config: AdapterConfig,
    params: ParamVector,
}

impl AdapterState {
    pub fn layout(dims: ModelDims, config: AdapterConfig) -> Result<Arc<ParamLayout>> {
        if config.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let r = config.rank;
        Ok(Arc::new(ParamLayout::new([
            (W1_A, vec![r, dims.input_width()]),
            (W1_B, vec![dims.hidden, r]),
            (W2_A, vec![r, dims.hidden]),
            (W2_B, vec![dims.vocab, r]),
        ])?))
    }

    /// `A ~ N(0, 0.02²)`, `B = 0`: the effective delta starts at exactly zero.
    pub fn init(dims: ModelDims, config: AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        let layout = Self::layout(dims, config)?;
        let mut params = ParamVector::zeros(layout);
        let normal = Normal::new(0.0, 0.02).expect("positive std");
        for name in [W1_A, W2_A] {
            for v in params.block_mut(name).expect("adapter block") {
                *v = normal.sample(rng);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: AdapterConfig, params: ParamVector) -> Result<Self> {
        for name in [W1_A, W1_B, W2_A, W2_B] {
            if params.layout().slot(name).is_none() {
                return Err(Error::Checkpoint(format!("adapter vector lacks `{name}`")));
            }
        }
        let a_rows = params.layout().slot(W1_A).map(|s| s.shape[0]);
        if a_rows != Some(config.rank) {
            return Err(Error::Checkpoint(format!("adapter rank {:?} does not match config rank {}", a_rows, config.rank)));
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn flatten(&self) -> ParamVector {
        self.params.clone()
    }

    /// Same config, new values; layouts must match.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(TensorError::LayoutMismatch.into());
        }
        Ok(Self { config: self.config, params })
    }

    pub fn factor(&self, name: &str) -> Tensor {
        self.params.tensor(name).expect("adapter block")
    }

    /// Effective weight of layer `w1` or `w2` under this adapter.
    pub fn effective(&self, base: &BaseParams, layer: Layer) -> Result<Tensor> {
        let (w, a, b) = match layer {
            Layer::Hidden => (&base.w1, W1_A, W1_B),
            Layer::Output => (&base.w2, W2_A, W2_B),
        };
        effective_weight(w, &self.factor(a), &self.factor(b), self.config.alpha, self.config.rank)
    }

    /// Registers the four factors on `tape`, as differentiable params when
    /// `trainable`, otherwise as constants.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<AdapterVars<'t>> {
        let mk = |name: &str| -> Result<Var<'t>> {
            let t = self.factor(name);
            Ok(if trainable { tape.param(name, t)? } else { tape.constant(t) })
        };
        Ok(AdapterVars { w1_a: mk(W1_A)?, w1_b: mk(W1_B)?, w2_a: mk(W2_A)?, w2_b: mk(W2_B)?, scale: self.config.scale() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Hidden,
    Output,
}

/// `W + (alpha / rank) · B · A`; `W` is not modified.
pub fn effective_weight(w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, rank: usize) -> Result<Tensor> {
    if rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    let (out, inp) = w.dims2().ok_or_else(|| shape_err(format!("W {:?} is not a matrix", w.shape())))?;
    let (ar, ac) = a.dims2().ok_or_else(|| shape_err(format!("A {:?} is not a matrix", a.shape())))?;
    let (br, bc) = b.dims2().ok_or_else(|| shape_err(format!("B {:?} is not a matrix", b.shape())))?;
    if ac != inp || br != out || bc != ar {
        return Err(shape_err(format!("W {:?}, A {:?}, B {:?}", w.shape(), a.shape(), b.shape())));
    }
    let tape = Tape::new();
    let wv = tape.constant(w.clone());
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let ba = tape.matmul(bv, av)?;
    let delta = tape.scale(ba, alpha / rank as f64)?;
    Ok(tape.add(wv, delta)?.value())
}

fn shape_err(detail: String) -> Error {
    Error::Tensor(TensorError::ShapeMismatch { op: "effective_weight", detail })
}

/// Adapter factors living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars<'t> {
    pub w1_a: Var<'t>,
    pub w1_b: Var<'t>,
    pub w2_a: Var<'t>,
    pub w2_b: Var<'t>,
    pub scale: f64,
}

impl<'t> AdapterVars<'t> {
    /// Factors in layout order.
    pub fn params(&self) -> [Var<'t>; 4] {
        [self.w1_a, self.w1_b, self.w2_a, self.w2_b]
    }
}

/// Weights of the two linear layers as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> LinearVars<'t> {
    /// Frozen base weights, optionally composed with an adapter.
    pub fn compose(tape: &'t Tape, base: &BaseParams, adapter: Option<&AdapterVars<'t>>) -> Result<Self> {
        let mut w1 = tape.constant(base.w1.clone());
        let mut w2 = tape.constant(base.w2.clone());
        if let Some(ad) = adapter {
            let d1 = tape.matmul(ad.w1_b, ad.w1_a)?;
            let d1 = tape.scale(d1, ad.scale)?;
            w1 = tape.add(w1, d1)?;
            let d2 = tape.matmul(ad.w2_b, ad.w2_a)?;
            let d2 = tape.scale(d2, ad.scale)?;
            w2 = tape.add(w2, d2)?;
        }
        Ok(Self { w1, b1: tape.constant(base.b1.clone()), w2, b2: tape.constant(base.b2.clone()) })
    }

    /// `tanh(x·w1ᵀ + b1)·w2ᵀ + b2`
    pub fn logits(&self, tape: &'t Tape, features: Var<'t>) -> Result<Var<'t>> {
        let n = features.shape()[0];
        let h = tape.matmul_nt(features, self.w1)?;
        let b1 = tape.gather_rows(self.b1, vec![0; n])?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h)?;
        let z = tape.matmul_nt(h, self.w2)?;
        let b2 = tape.gather_rows(self.b2, vec![0; n])?;
        Ok(tape.add(z, b2)?)
    }
}

/// Teacher-forcing rows for a set of `(x, y)` sequences: one row per
/// target token, holding its left-padded context window.
#[derive(Debug, Clone)]
pub struct TeacherRows {
    pub context: usize,
    pub contexts: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_index: Vec<usize>,
    pub n_seqs: usize,
    /// Rows of sequence `i` are `seq_offsets[i]..seq_offsets[i + 1]`.
    pub seq_offsets: Vec<usize>,
}

/// Last `context` tokens of `prefix`, left-padded with [`PAD_TOKEN`].
pub fn context_window(context: usize, prefix: &[usize]) -> Vec<usize> {
    let take = prefix.len().min(context);
    let mut w = vec![PAD_TOKEN; context - take];
    w.extend_from_slice(&prefix[prefix.len() - take..]);
    w
}

impl TeacherRows {
    pub fn build(dims: ModelDims, seqs: &[(&TokenSeq, &TokenSeq)]) -> Result<Self> {
        let mut rows = Self { context: dims.context, contexts: vec![], targets: vec![], seq_index: vec![], n_seqs: seqs.len(), seq_offsets: vec![0] };
        for (i, (x, y)) in seqs.iter().enumerate() {
            x.check_vocab(dims.vocab)?;
            y.check_vocab(dims.vocab)?;
            if y.is_empty() {
                return Err(Error::Empty("target sequence"));
            }
            if x.len() + y.len() > dims.context {
                return Err(Error::SequenceTooLong { len: x.len() + y.len(), limit: dims.context });
            }
            let mut prefix = x.ids().to_vec();
            for &t in y.ids() {
                rows.contexts.extend(context_window(dims.context, &prefix));
                rows.targets.push(t);
                rows.seq_index.push(i);
                prefix.push(t);
            }
            rows.seq_offsets.push(rows.targets.len());
        }
        Ok(rows)
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    /// Row subset (in the given order) re-indexed to consecutive sequences.
    pub fn select(&self, seqs: &[usize]) -> Self {
        let c = self.context;
        let mut out = Self { context: c, contexts: vec![], targets: vec![], seq_index: vec![], n_seqs: seqs.len(), seq_offsets: vec![0] };
        for (new_i, &s) in seqs.iter().enumerate() {
            let (lo, hi) = (self.seq_offsets[s], self.seq_offsets[s + 1]);
            out.contexts.extend_from_slice(&self.contexts[lo * c..hi * c]);
            out.targets.extend_from_slice(&self.targets[lo..hi]);
            out.seq_index.extend(std::iter::repeat(new_i).take(hi - lo));
            out.seq_offsets.push(out.targets.len());
        }
        out
    }
}

/// Per-sequence summed log-probabilities (`n_seqs × 1`) from row logits.
pub fn sequence_log_probs<'t>(tape: &'t Tape, logits: Var<'t>, rows: &TeacherRows) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (n, v) = (shape[0], shape[1]);
    let lp = tape.log_softmax(logits)?;
    let mut onehot = Tensor::zeros(&[n, v]);
    for (r, &t) in rows.targets.iter().enumerate() {
        onehot.data_mut()[r * v + t] = 1.0;
    }
    let picked = tape.mul(lp, tape.constant(onehot))?;
    let per_row = tape.matmul(picked, tape.constant(Tensor::filled(&[v, 1], 1.0)))?;
    let mut seg = Tensor::zeros(&[rows.n_seqs, n]);
    for (r, &s) in rows.seq_index.iter().enumerate() {
        seg.data_mut()[s * n + r] = 1.0;
    }
    Ok(tape.matmul(tape.constant(seg), per_row)?)
}

/// Summed log-probabilities of each `(x, y)` under θ (+ φ), no gradients.
pub fn log_probs(base: &BaseParams, adapter: Option<&AdapterState>, seqs: &[(&TokenSeq, &TokenSeq)]) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Ok(vec![]);
    }
    let rows = TeacherRows::build(base.dims, seqs)?;
    let tape = Tape::new();
    let ad = adapter.map(|a| a.on_tape(&tape, false)).transpose()?;
    let lin = LinearVars::compose(&tape, base, ad.as_ref())?;
    let x = tape.constant(base.features(&rows.contexts));
    let logits = lin.logits(&tape, x)?;
    Ok(sequence_log_probs(&tape, logits, &rows)?.value().into_data())
}

/// `Σ_t log p(y_t | x, y_<t)` under teacher forcing.
pub fn log_prob(base: &BaseParams, adapter: Option<&AdapterState>, x: &TokenSeq, y: &TokenSeq) -> Result<f64> {
    Ok(log_probs(base, adapter, &[(x, y)])?[0])
}

/// Next-token logits for each context window (one row per context).
pub fn next_token_logits(base: &BaseParams, adapter: Option<&AdapterState>, contexts: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    let ad = adapter.map(|a| a.on_tape(&tape, false)).transpose()?;
    let lin = LinearVars::compose(&tape, base, ad.as_ref())?;
    let x = tape.constant(base.features(contexts));
    Ok(lin.logits(&tape, x)?.value())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a batch of queries; each output stops after the
/// first [`STOP_TOKEN`] or `max_len` tokens.
pub fn greedy_decode_batch(base: &BaseParams, adapter: Option<&AdapterState>, queries: &[&TokenSeq], max_len: usize) -> Result<Vec<TokenSeq>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    for q in queries {
        q.check_vocab(base.dims.vocab)?;
    }
    let ctx = base.dims.context;
    let mut prefixes: Vec<Vec<usize>> = queries.iter().map(|q| q.ids().to_vec()).collect();
    let mut outs: Vec<Vec<usize>> = vec![vec![]; queries.len()];
    let mut live: Vec<usize> = (0..queries.len()).collect();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let contexts: Vec<usize> = live.iter().flat_map(|&i| context_window(ctx, &prefixes[i])).collect();
        let logits = next_token_logits(base, adapter, &contexts)?;
        let mut still = Vec::with_capacity(live.len());
        for (k, &i) in live.iter().enumerate() {
            let tok = argmax_lowest(logits.row(k));
            outs[i].push(tok);
            prefixes[i].push(tok);
            if tok != STOP_TOKEN {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(outs.into_iter().map(TokenSeq).collect())
}

pub fn greedy_decode(base: &BaseParams, adapter: Option<&AdapterState>, x: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
    Ok(greedy_decode_batch(base, adapter, &[x], max_len)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training stops early once the mean epoch loss drops below this.
    pub target_loss: f64,
    /// Required fraction of facts reproduced by greedy decoding.
    pub min_fidelity: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { max_epochs: 300, learning_rate: 0.01, batch_size: 64, target_loss: 0.01, min_fidelity: 0.9 }
    }
}

/// Outcome of [`pretrain_base`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub base: BaseParams,
    pub epochs: usize,
    pub final_loss: f64,
    pub fidelity: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn pretrain_loss(rows: &TeacherRows, params: &ParamVector) -> Result<(f64, ParamVector)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> =
        BASE_BLOCKS.iter().map(|&name| tape.param(name, params.tensor(name).expect("base block"))).collect::<std::result::Result<_, _>>()?;
    let (embed, w1, b1, w2, b2) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
    let ctx = rows.context;
    let n = rows.n_rows();
    let mut cols = Vec::with_capacity(ctx);
    for j in 0..ctx {
        let ids: Vec<usize> = (0..n).map(|r| rows.contexts[r * ctx + j]).collect();
        cols.push(tape.gather_rows(embed, ids)?);
    }
    let x = tape.concat(&cols, 1)?;
    let lin = LinearVars { w1, b1, w2, b2 };
    let logits = lin.logits(&tape, x)?;
    let lp = sequence_log_probs(&tape, logits, rows)?;
    let nll = tape.neg(lp)?;
    let loss = tape.mean(nll)?;
    let value = loss.item().expect("scalar");
    Ok((value, tape.grad(loss, &vars)?))
}

/// Fraction of `facts` whose greedy answer equals the target answer.
pub fn fidelity(base: &BaseParams, adapter: Option<&AdapterState>, facts: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
    if facts.is_empty() {
        return Err(Error::Empty("fact set"));
    }
    let max_len = facts.iter().map(|(_, y)| y.len()).max().unwrap_or(1);
    let queries: Vec<&TokenSeq> = facts.iter().map(|(x, _)| x).collect();
    let outs = greedy_decode_batch(base, adapter, &queries, max_len)?;
    let hits = outs.iter().zip(facts).filter(|(o, (_, y))| o.answer() == y.answer()).count();
    Ok(hits as f64 / facts.len() as f64)
}

/// Plain NLL training of θ on `(x, y)` facts with Adam minibatches.
///
/// Fails with [`Error::PretrainingFailed`] when greedy decoding reproduces
/// fewer than `min_fidelity` of the facts at the end of training.
pub fn pretrain_base(facts: &[(TokenSeq, TokenSeq)], dims: ModelDims, cfg: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    if facts.is_empty() {
        return Err(Error::Empty("pretraining set"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("pretraining needs batch_size and max_epochs ≥ 1".into()));
    }
    let mut init_rng = rng::stream(seed, "base-init");
    let base0 = BaseParams::random(dims, &mut init_rng)?;
    let seqs: Vec<(&TokenSeq, &TokenSeq)> = facts.iter().map(|(x, y)| (x, y)).collect();
    let all_rows = TeacherRows::build(dims, &seqs)?;
    let mut params = base0.to_vector();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..facts.len()).collect();
    let mut batch_rng = rng::stream(seed, "base-batches");
    let mut epochs = 0;
    let mut final_loss = f64::INFINITY;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut batch_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows = all_rows.select(chunk);
            let (loss, grad) = pretrain_loss(&rows, &params)?;
            total += loss * chunk.len() as f64;
            adam.step(params.values_mut(), grad.values());
        }
        final_loss = total / facts.len() as f64;
        if final_loss < cfg.target_loss {
            break;
        }
    }
    let base = BaseParams::from_vector(dims, &params)?;
    let fid = fidelity(&base, None, facts)?;
    if fid < cfg.min_fidelity {
        return Err(Error::PretrainingFailed { fidelity: 100.0 * fid, required: 100.0 * cfg.min_fidelity, epochs });
    }
    Ok(Pretrained { base, epochs, final_loss, fidelity: fid })
}

const CHECKPOINT_FORMAT: &str = "corsa-checkpoint/1";

/// On-disk checkpoint: named arrays as an ordering list plus one flat
/// row-major data array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModelDims>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    pub ordering: Vec<ParamSlot>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    fn from_vector(kind: &str, dims: Option<ModelDims>, adapter: Option<AdapterConfig>, v: &ParamVector) -> Self {
        Self { format: CHECKPOINT_FORMAT.into(), kind: kind.into(), dims, adapter, ordering: v.layout().slots().to_vec(), data: v.values().to_vec() }
    }

    fn to_vector(&self) -> Result<ParamVector> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        let layout = ParamLayout::new(self.ordering.iter().map(|s| (s.name.clone(), s.shape.clone())))?;
        if layout.slots() != self.ordering.as_slice() {
            return Err(Error::Checkpoint("ordering offsets are not contiguous".into()));
        }
        Ok(ParamVector::from_values(Arc::new(layout), self.data.clone())?)
    }

    pub fn base(base: &BaseParams) -> Self {
        Self::from_vector("base", Some(base.dims), None, &base.to_vector())
    }

    pub fn adapter(adapter: &AdapterState) -> Self {
        Self::from_vector("adapter", None, Some(adapter.config), adapter.params())
    }

    pub fn into_base(self) -> Result<BaseParams> {
        let dims = self.dims.ok_or_else(|| Error::Checkpoint("base checkpoint lacks dims".into()))?;
        if self.kind != "base" {
            return Err(Error::Checkpoint(format!("expected base checkpoint, found `{}`", self.kind)));
        }
        BaseParams::from_vector(dims, &self.to_vector()?)
    }

    pub fn into_adapter(self) -> Result<AdapterState> {
        let cfg = self.adapter.ok_or_else(|| Error::Checkpoint("adapter checkpoint lacks config".into()))?;
        if self.kind != "adapter" {
            return Err(Error::Checkpoint(format!("expected adapter checkpoint, found `{}`", self.kind)));
        }
        AdapterState::from_params(cfg, self.to_vector()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims { vocab: 12, embed: 4, context: 4, hidden: 6 }
    }

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq(ids.to_vec())
    }

    #[test]
    fn zero_b_leaves_weight_untouched() {
        let mut r = rng::stream(1, "t");
        let base = BaseParams::random(tiny_dims(), &mut r).unwrap();
        let ad = AdapterState::init(tiny_dims(), AdapterConfig { rank: 2, alpha: 4.0 }, &mut r).unwrap();
        assert_eq!(ad.effective(&base, Layer::Hidden).unwrap(), base.w1);
        assert_eq!(ad.effective(&base, Layer::Output).unwrap(), base.w2);
    }

    #[test]
    fn identity_factors_add_padded_identity() {
        // W = 0 (3×4), A = [I2 | 0] (2×4), B = [I2; 0] (3×2), alpha = rank = 2
        let w = Tensor::zeros(&[3, 4]);
        let a = Tensor::matrix(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let e = effective_weight(&w, &a, &b, 2.0, 2).unwrap();
        let expect = Tensor::matrix(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(e, expect);
    }

    #[test]
    fn effective_weight_rejects_bad_shapes() {
        let w = Tensor::zeros(&[3, 4]);
        let a = Tensor::zeros(&[2, 5]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(effective_weight(&w, &a, &b, 1.0, 2).is_err());
        assert!(effective_weight(&w, &Tensor::zeros(&[2, 4]), &b, 1.0, 0).is_err());
    }

    #[test]
    fn argmax_ties_choose_lowest_id() {
        assert_eq!(argmax_lowest(&[0.5, 2.0, 2.0, 1.0]), 1);
        assert_eq!(argmax_lowest(&[3.0, 3.0]), 0);
    }

    #[test]
    fn decode_max_len_one_gives_one_token() {
        let mut r = rng::stream(2, "t");
        let base = BaseParams::random(tiny_dims(), &mut r).unwrap();
        let out = greedy_decode(&base, None, &seq(&[3, 4]), 1).unwrap();
        assert_eq!(out.len(), 1);
        assert!(greedy_decode(&base, None, &seq(&[3]), 0).is_err());
    }

    #[test]
    fn decode_tie_picks_lowest_id() {
        // all-zero output layer: every logit equal, so the stop token (id 0) wins
        let mut r = rng::stream(3, "t");
        let mut base = BaseParams::random(tiny_dims(), &mut r).unwrap();
        base.w2 = Tensor::zeros(base.w2.shape());
        let out = greedy_decode(&base, None, &seq(&[5]), 3).unwrap();
        assert_eq!(out.ids(), &[STOP_TOKEN]);
    }

    #[test]
    fn log_prob_validation() {
        let mut r = rng::stream(4, "t");
        let base = BaseParams::random(tiny_dims(), &mut r).unwrap();
        assert!(matches!(log_prob(&base, None, &seq(&[2]), &seq(&[])), Err(Error::Empty(_))));
        assert!(matches!(log_prob(&base, None, &seq(&[2]), &seq(&[99])), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(log_prob(&base, None, &seq(&[2, 3, 4]), &seq(&[5, 6])), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn two_token_target_decomposes() {
        let mut r = rng::stream(5, "t");
        let base = BaseParams::random(tiny_dims(), &mut r).unwrap();
        let x = seq(&[2, 3]);
        let both = log_prob(&base, None, &x, &seq(&[7, 8])).unwrap();
        let first = log_prob(&base, None, &x, &seq(&[7])).unwrap();
        let second = log_prob(&base, None, &seq(&[2, 3, 7]), &seq(&[8])).unwrap();
        assert_eq!(both, first + second);
        assert!(both <= 0.0);
    }

    #[test]
    fn left_padding_outside_window_is_invisible() {
        let mut r = rng::stream(6, "t");
        let base = BaseParams::random(tiny_dims(), &mut r).unwrap();
        let plain = log_prob(&base, None, &seq(&[4]), &seq(&[5, 6])).unwrap();
        let padded = log_prob(&base, None, &seq(&[PAD_TOKEN, 4]), &seq(&[5, 6])).unwrap();
        assert_eq!(plain, padded);
    }

    #[test]
    fn context_window_pads_left_and_slides() {
        assert_eq!(context_window(4, &[7, 8]), vec![PAD_TOKEN, PAD_TOKEN, 7, 8]);
        assert_eq!(context_window(2, &[5, 6, 7]), vec![6, 7]);
    }

    #[test]
    fn empty_pretraining_set_rejected() {
        assert!(matches!(pretrain_base(&[], tiny_dims(), &PretrainConfig::default(), 0), Err(Error::Empty(_))));
    }

    #[test]
    fn checkpoint_kind_is_checked() {
        let mut r = rng::stream(7, "t");
        let ad = AdapterState::init(tiny_dims(), AdapterConfig::default(), &mut r).unwrap();
        assert!(Checkpoint::adapter(&ad).into_base().is_err());
        let back = Checkpoint::adapter(&ad).into_adapter().unwrap();
        assert_eq!(back, ad);
    }
}
