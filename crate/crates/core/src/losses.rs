//! Margin, SFT, DPO and the composite update objective.
//!
//! All batch reductions are means. DPO reference log-probabilities are
//! computed once, without a tape, and enter the policy graph as constants;
//! gradients therefore only ever reach the adapter factors.

use serde::{Deserialize, Serialize};

use crate::data::EditPair;
use crate::error::Error;
use crate::model::{sequence_log_probs, AdapterState, AdapterVars, BaseParams, LinearVars, TeacherRows, TokenSeq};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamVector, Tensor};

type Result<T> = std::result::Result<T, Error>;

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Which model supplies `p_ref` in the DPO term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    /// Pretrained θ with no adapter, for the whole run.
    #[default]
    Base,
    /// θ plus the adapter as it stood at the start of the current phase.
    PreviousPhase,
}

/// Loss values at one point. `combined == sft + λ·dpo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub dpo: f64,
    pub combined: f64,
    pub margins: Vec<f64>,
}

/// Sequences with their frozen-embedding input features precomputed.
#[derive(Debug, Clone)]
pub struct Encoded {
    rows: TeacherRows,
    features: Tensor,
}

impl Encoded {
    pub fn new(base: &BaseParams, seqs: &[(&TokenSeq, &TokenSeq)]) -> Result<Self> {
        let rows = TeacherRows::build(base.dims, seqs)?;
        let features = base.features(&rows.contexts);
        Ok(Self { rows, features })
    }

    pub fn n_seqs(&self) -> usize {
        self.rows.n_seqs
    }

    /// Sequences `seqs` (in order), renumbered from zero.
    pub fn select(&self, seqs: &[usize]) -> Self {
        let rows = self.rows.select(seqs);
        let w = self.features.shape()[1];
        let mut data = Vec::with_capacity(rows.n_rows() * w);
        for &s in seqs {
            let (lo, hi) = (self.rows.seq_offsets[s], self.rows.seq_offsets[s + 1]);
            data.extend_from_slice(&self.features.data()[lo * w..hi * w]);
        }
        let features = Tensor::new(vec![rows.n_rows(), w], data).expect("feature rows");
        Self { rows, features }
    }

    /// Summed log-probabilities per sequence (`n_seqs × 1`) under θ + adapter.
    pub fn log_probs<'t>(&self, tape: &'t Tape, base: &BaseParams, adapter: Option<&AdapterVars<'t>>) -> Result<Var<'t>> {
        let lin = LinearVars::compose(tape, base, adapter)?;
        let x = tape.constant(self.features.clone());
        let logits = lin.logits(tape, x)?;
        sequence_log_probs(tape, logits, &self.rows)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must be positive, got {beta}")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must be non-negative, got {lambda}")))
    }
}

fn ensure_scalar(v: Var<'_>) -> f64 {
    v.item().expect("scalar loss")
}

/// Loss value and its gradient with respect to the adapter.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub loss: f64,
    pub grad: ParamVector,
    pub tape_id: u64,
}

/// DPO evaluation with per-pair policy diagnostics.
#[derive(Debug, Clone)]
pub struct DpoEvaluated {
    pub loss: f64,
    pub grad: ParamVector,
    pub tape_id: u64,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
}

impl DpoEvaluated {
    pub fn margins(&self) -> Vec<f64> {
        self.logp_new.iter().zip(&self.logp_old).map(|(a, b)| a - b).collect()
    }
}

/// D_new and D_pairs for one phase, encoded once, with reference
/// log-probabilities frozen at construction.
#[derive(Debug, Clone)]
pub struct UpdateData {
    new: Encoded,
    pairs: Encoded,
    ref_new: Vec<f64>,
    ref_old: Vec<f64>,
}

impl UpdateData {
    /// `reference = None` uses the bare base model as `p_ref`.
    pub fn new(base: &BaseParams, new_examples: &[EditPair], pairs: &[EditPair], reference: Option<&AdapterState>) -> Result<Self> {
        let new_seqs: Vec<(&TokenSeq, &TokenSeq)> = new_examples.iter().map(|p| (&p.x, &p.y_new)).collect();
        let pair_seqs: Vec<(&TokenSeq, &TokenSeq)> = pairs.iter().flat_map(|p| [(&p.x, &p.y_new), (&p.x, &p.y_old)]).collect();
        let new = Encoded::new(base, &new_seqs)?;
        let pairs_enc = Encoded::new(base, &pair_seqs)?;
        let ref_lp = {
            let tape = Tape::new();
            let ad = reference.map(|a| a.on_tape(&tape, false)).transpose()?;
            if pairs_enc.n_seqs() == 0 {
                vec![]
            } else {
                pairs_enc.log_probs(&tape, base, ad.as_ref())?.value().into_data()
            }
        };
        let ref_new = ref_lp.iter().step_by(2).copied().collect();
        let ref_old = ref_lp.iter().skip(1).step_by(2).copied().collect();
        Ok(Self { new, pairs: pairs_enc, ref_new, ref_old })
    }

    pub fn n_new(&self) -> usize {
        self.new.n_seqs()
    }

    pub fn n_pairs(&self) -> usize {
        self.ref_new.len()
    }

    /// Reference margin `log p_ref(y⁺|x) − log p_ref(y⁻|x)` per pair.
    pub fn reference_margins(&self) -> Vec<f64> {
        self.ref_new.iter().zip(&self.ref_old).map(|(a, b)| a - b).collect()
    }

    fn sft_graph<'t>(&self, tape: &'t Tape, base: &BaseParams, ad: &AdapterVars<'t>, idx: &[usize]) -> Result<Var<'t>> {
        if idx.is_empty() {
            return Err(Error::Empty("SFT batch"));
        }
        let enc = self.new.select(idx);
        let lp = enc.log_probs(tape, base, Some(ad))?;
        let nll = tape.neg(lp)?;
        Ok(tape.mean(nll)?)
    }

    /// Returns `(loss, policy log-probs n×1 [y⁺, y⁻ interleaved])`.
    fn dpo_graph<'t>(&self, tape: &'t Tape, base: &BaseParams, ad: &AdapterVars<'t>, idx: &[usize], beta: f64) -> Result<(Var<'t>, Var<'t>)> {
        check_beta(beta)?;
        if idx.is_empty() {
            return Err(Error::Empty("DPO batch"));
        }
        let seqs: Vec<usize> = idx.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
        let enc = self.pairs.select(&seqs);
        let lp = enc.log_probs(tape, base, Some(ad))?;
        let b = idx.len();
        let mut diff = Tensor::zeros(&[b, 2 * b]);
        let mut ref_term = Tensor::zeros(&[b, 1]);
        for (k, &i) in idx.iter().enumerate() {
            diff.data_mut()[k * 2 * b + 2 * k] = 1.0;
            diff.data_mut()[k * 2 * b + 2 * k + 1] = -1.0;
            ref_term.data_mut()[k] = -beta * (self.ref_new[i] - self.ref_old[i]);
        }
        let policy_margin = tape.matmul(tape.constant(diff), lp)?;
        let scaled = tape.scale(policy_margin, beta)?;
        let z = tape.add(scaled, tape.constant(ref_term))?;
        let ls = tape.log_sigmoid(z)?;
        let neg = tape.neg(ls)?;
        Ok((tape.mean(neg)?, lp))
    }

    pub fn sft(&self, base: &BaseParams, adapter: &AdapterState, idx: &[usize]) -> Result<Evaluated> {
        let tape = Tape::new();
        let ad = adapter.on_tape(&tape, true)?;
        let loss = self.sft_graph(&tape, base, &ad, idx)?;
        let value = ensure_scalar(loss);
        Ok(Evaluated { loss: value, grad: tape.grad(loss, &ad.params())?, tape_id: tape.id() })
    }

    pub fn dpo(&self, base: &BaseParams, adapter: &AdapterState, idx: &[usize], beta: f64) -> Result<DpoEvaluated> {
        let tape = Tape::new();
        let ad = adapter.on_tape(&tape, true)?;
        let (loss, lp) = self.dpo_graph(&tape, base, &ad, idx, beta)?;
        let value = ensure_scalar(loss);
        let lp = lp.value().into_data();
        Ok(DpoEvaluated {
            loss: value,
            grad: tape.grad(loss, &ad.params())?,
            tape_id: tape.id(),
            logp_new: lp.iter().step_by(2).copied().collect(),
            logp_old: lp.iter().skip(1).step_by(2).copied().collect(),
        })
    }

    pub fn sft_value(&self, base: &BaseParams, adapter: &AdapterState, idx: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let ad = adapter.on_tape(&tape, false)?;
        Ok(ensure_scalar(self.sft_graph(&tape, base, &ad, idx)?))
    }

    pub fn dpo_value(&self, base: &BaseParams, adapter: &AdapterState, idx: &[usize], beta: f64) -> Result<f64> {
        let tape = Tape::new();
        let ad = adapter.on_tape(&tape, false)?;
        Ok(ensure_scalar(self.dpo_graph(&tape, base, &ad, idx, beta)?.0))
    }

    /// `L_SFT + λ·L_DPO` on one tape, with its gradient.
    pub fn update(
        &self,
        base: &BaseParams,
        adapter: &AdapterState,
        new_idx: &[usize],
        pair_idx: &[usize],
        lambda: f64,
        beta: f64,
    ) -> Result<(LossBreakdown, ParamVector)> {
        check_lambda(lambda)?;
        let tape = Tape::new();
        let ad = adapter.on_tape(&tape, true)?;
        let sft = self.sft_graph(&tape, base, &ad, new_idx)?;
        let (dpo, lp) = self.dpo_graph(&tape, base, &ad, pair_idx, beta)?;
        let weighted = tape.scale(dpo, lambda)?;
        let combined = tape.add(sft, weighted)?;
        let lp = lp.value().into_data();
        let breakdown = LossBreakdown {
            sft: ensure_scalar(sft),
            dpo: ensure_scalar(dpo),
            combined: ensure_scalar(combined),
            margins: lp.chunks(2).map(|c| c[0] - c[1]).collect(),
        };
        let grad = tape.grad(combined, &ad.params())?;
        Ok((breakdown, grad))
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `log p(y⁺|x) − log p(y⁻|x)` under θ + φ.
pub fn margin(base: &BaseParams, adapter: Option<&AdapterState>, pair: &EditPair) -> Result<f64> {
    let lp = crate::model::log_probs(base, adapter, &[(&pair.x, &pair.y_new), (&pair.x, &pair.y_old)])?;
    Ok(lp[0] - lp[1])
}

/// Margin and its gradient with respect to the adapter.
pub fn margin_with_grad(base: &BaseParams, adapter: &AdapterState, pair: &EditPair) -> Result<Evaluated> {
    let enc = Encoded::new(base, &[(&pair.x, &pair.y_new), (&pair.x, &pair.y_old)])?;
    let tape = Tape::new();
    let ad = adapter.on_tape(&tape, true)?;
    let lp = enc.log_probs(&tape, base, Some(&ad))?;
    let d = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0])?);
    let m = tape.matmul(d, lp)?;
    let value = ensure_scalar(m);
    Ok(Evaluated { loss: value, grad: tape.grad(m, &ad.params())?, tape_id: tape.id() })
}

/// Mean of `−log p(y⁺|x)` over the batch.
pub fn sft_loss(base: &BaseParams, adapter: &AdapterState, batch: &[EditPair]) -> Result<f64> {
    let data = UpdateData::new(base, batch, &[], None)?;
    data.sft_value(base, adapter, &all(batch.len()))
}

/// Mean DPO loss against the bare base model as reference.
pub fn dpo_loss(base: &BaseParams, adapter: &AdapterState, batch: &[EditPair], beta: f64) -> Result<f64> {
    dpo_loss_with_reference(base, adapter, None, batch, beta)
}

pub fn dpo_loss_with_reference(base: &BaseParams, adapter: &AdapterState, reference: Option<&AdapterState>, batch: &[EditPair], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let data = UpdateData::new(base, &[], batch, reference)?;
    data.dpo_value(base, adapter, &all(batch.len()), beta)
}

/// `L_SFT + λ·L_DPO` with the breakdown of both terms and per-pair margins.
pub fn update_loss(
    base: &BaseParams,
    adapter: &AdapterState,
    new_batch: &[EditPair],
    pair_batch: &[EditPair],
    lambda: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let data = UpdateData::new(base, new_batch, pair_batch, None)?;
    Ok(data.update(base, adapter, &all(new_batch.len()), &all(pair_batch.len()), lambda, beta)?.0)
}

/// `−log σ(z)`, evaluated stably.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    -(z.min(0.0) - (-z.abs()).exp().ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, ModelDims};
    use crate::rng;

    fn dims() -> ModelDims {
        ModelDims { vocab: 16, embed: 4, context: 6, hidden: 8 }
    }

    fn setup(seed: u64) -> (BaseParams, AdapterState) {
        let mut r = rng::stream(seed, "losses");
        let base = BaseParams::random(dims(), &mut r).unwrap();
        let ad = AdapterState::init(dims(), AdapterConfig { rank: 2, alpha: 4.0 }, &mut r).unwrap();
        (base, ad)
    }

    fn pair(x: &[usize], old: &[usize], new: &[usize]) -> EditPair {
        EditPair::new(TokenSeq(x.to_vec()), TokenSeq(old.to_vec()), TokenSeq(new.to_vec()))
    }

    #[test]
    fn equal_targets_have_zero_margin() {
        let (base, ad) = setup(1);
        let p = pair(&[3, 4], &[9, 0], &[9, 0]);
        assert_eq!(margin(&base, Some(&ad), &p).unwrap(), 0.0);
    }

    #[test]
    fn fresh_adapter_dpo_is_log_two() {
        let (base, ad) = setup(2);
        let batch = vec![pair(&[3, 4], &[9, 0], &[10, 0]), pair(&[5], &[11], &[12])];
        let v = dpo_loss(&base, &ad, &batch, 0.1).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn invalid_arguments() {
        let (base, ad) = setup(3);
        let batch = vec![pair(&[3], &[9], &[10])];
        assert!(dpo_loss(&base, &ad, &batch, 0.0).is_err());
        assert!(dpo_loss(&base, &ad, &batch, -1.0).is_err());
        assert!(matches!(dpo_loss(&base, &ad, &[], 0.1), Err(Error::Empty(_))));
        assert!(matches!(sft_loss(&base, &ad, &[]), Err(Error::Empty(_))));
        assert!(update_loss(&base, &ad, &batch, &batch, -0.5, 0.1).is_err());
    }

    #[test]
    fn lambda_zero_is_pure_sft() {
        let (base, ad) = setup(4);
        let batch = vec![pair(&[3, 4], &[9, 0], &[10, 0])];
        let b = update_loss(&base, &ad, &batch, &batch, 0.0, 0.1).unwrap();
        assert_eq!(b.combined, b.sft);
    }

    #[test]
    fn lambda_one_at_init_adds_log_two() {
        let (base, ad) = setup(5);
        let batch = vec![pair(&[3, 4], &[9, 0], &[10, 0]), pair(&[6, 2], &[11, 0], &[13, 0])];
        let b = update_loss(&base, &ad, &batch, &batch, 1.0, 0.1).unwrap();
        assert!((b.combined - (b.sft + 0.693147)).abs() < 1e-6);
        assert!((b.combined - b.sft - b.dpo).abs() < 1e-12);
    }

    #[test]
    fn neg_log_sigmoid_matches_naive_form() {
        for z in [-5.0, -0.3, 0.0, 0.7, 4.0] {
            let naive = -(1.0 / (1.0 + f64::exp(-z))).ln();
            assert!((neg_log_sigmoid(z) - naive).abs() < 1e-12);
        }
        assert!(neg_log_sigmoid(-2000.0).is_finite());
    }
}
