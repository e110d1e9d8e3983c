//! Hessian-vector products by central differences of gradients, dominant
//! eigenvalue estimation, margin curvature and the no-fallback condition.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::EditPair;
use crate::error::{Error, TensorError};
use crate::losses::{Encoded, UpdateData};
use crate::model::{AdapterState, BaseParams};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{GradientVector, ParamVector, Tensor};

type Result<T> = std::result::Result<T, Error>;

/// `h = 1e-4 · (1 + ‖φ‖)`.
pub fn default_step(phi: &ParamVector) -> f64 {
    1e-4 * (1.0 + phi.norm())
}

/// `H·v ≈ [∇f(φ + h·v̂) − ∇f(φ − h·v̂)] / 2h · ‖v‖`.
pub fn hvp<G>(mut grad: G, phi: &ParamVector, v: &ParamVector, h: f64) -> Result<GradientVector>
where
    G: FnMut(&ParamVector) -> Result<GradientVector>,
{
    let vn = v.norm();
    if !(vn > 0.0) || !vn.is_finite() {
        return Err(Error::Config(format!("hvp direction must have positive norm, got {vn}")));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("hvp step must be positive, got {h}")));
    }
    let unit = v.scaled(1.0 / vn);
    let up = grad(&phi.add_scaled(&unit, h)?)?;
    let down = grad(&phi.add_scaled(&unit, -h)?)?;
    if !up.is_finite() || !down.is_finite() {
        return Err(TensorError::NonFinite { op: "hvp" }.into());
    }
    Ok(up.sub(&down)?.scaled(vn / (2.0 * h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Finite-difference step; `None` uses [`default_step`].
    pub step: Option<f64>,
    /// Largest `‖Δ‖` accepted by [`fallback_check`].
    pub trust_radius: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { iters: 50, tol: 1e-3, seed: 0, step: None, trust_radius: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureTarget {
    UpdateLoss,
    SftLoss,
    DpoLoss,
    Margin,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub target: CurvatureTarget,
    pub lambda_max: f64,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub probe_seed: u64,
    pub snapshot_id: String,
}

/// FNV-1a over the bit patterns of `values`.
pub fn snapshot_id(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Power iteration for the dominant `|eigenvalue|` of the Hessian of `f`.
///
/// Converged when `‖Hv − λv‖ ≤ tol · max(1, |λ|)` for unit `v`; otherwise the
/// last estimate is returned with `converged = false`.
pub fn lambda_max<G>(mut grad: G, phi: &ParamVector, cfg: &PowerConfig, target: CurvatureTarget) -> Result<CurvatureReport>
where
    G: FnMut(&ParamVector) -> Result<GradientVector>,
{
    if cfg.iters == 0 {
        return Err(Error::Config("power iteration needs at least one iteration".into()));
    }
    let h = cfg.step.unwrap_or_else(|| default_step(phi));
    let mut r = rng::stream(cfg.seed, "probes");
    let mut v = ParamVector::zeros(phi.layout().clone());
    for x in v.values_mut() {
        *x = StandardNormal.sample(&mut r);
    }
    v = v.scaled(1.0 / v.norm());
    let mut report = CurvatureReport {
        target,
        lambda_max: 0.0,
        residual: f64::INFINITY,
        converged: false,
        iterations: 0,
        probe_seed: cfg.seed,
        snapshot_id: snapshot_id(phi.values()),
    };
    for it in 1..=cfg.iters {
        let hv = hvp(&mut grad, phi, &v, h)?;
        let rayleigh = v.dot(&hv)?;
        report.residual = hv.add_scaled(&v, -rayleigh)?.norm();
        report.lambda_max = rayleigh.abs();
        report.iterations = it;
        if report.residual <= cfg.tol * rayleigh.abs().max(1.0) {
            report.converged = true;
            break;
        }
        let n = hv.norm();
        if n == 0.0 {
            report.converged = true;
            break;
        }
        v = hv.scaled(1.0 / n);
    }
    Ok(report)
}

/// The margin of one pair as a function of the flat adapter vector.
#[derive(Debug, Clone)]
pub struct MarginFn<'a> {
    base: &'a BaseParams,
    template: &'a AdapterState,
    enc: Encoded,
}

impl<'a> MarginFn<'a> {
    pub fn new(base: &'a BaseParams, template: &'a AdapterState, pair: &EditPair) -> Result<Self> {
        let enc = Encoded::new(base, &[(&pair.x, &pair.y_new), (&pair.x, &pair.y_old)])?;
        Ok(Self { base, template, enc })
    }

    fn run(&self, phi: &ParamVector, trainable: bool) -> Result<(f64, Option<GradientVector>)> {
        let adapter = self.template.with_params(phi.clone())?;
        let tape = Tape::new();
        let ad = adapter.on_tape(&tape, trainable)?;
        let lp = self.enc.log_probs(&tape, self.base, Some(&ad))?;
        let d = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0])?);
        let m = tape.matmul(d, lp)?;
        let value = m.item().expect("scalar margin");
        let grad = if trainable { Some(tape.grad(m, &ad.params())?) } else { None };
        Ok((value, grad))
    }

    pub fn value(&self, phi: &ParamVector) -> Result<f64> {
        Ok(self.run(phi, false)?.0)
    }

    pub fn grad(&self, phi: &ParamVector) -> Result<GradientVector> {
        Ok(self.run(phi, true)?.1.expect("trainable run"))
    }
}

/// Gradient of one of the training objectives over all of `data`.
pub fn objective_gradient<'a>(
    base: &'a BaseParams,
    template: &'a AdapterState,
    data: &'a UpdateData,
    target: CurvatureTarget,
    lambda: f64,
    beta: f64,
) -> impl FnMut(&ParamVector) -> Result<GradientVector> + 'a {
    let new_idx: Vec<usize> = (0..data.n_new()).collect();
    let pair_idx: Vec<usize> = (0..data.n_pairs()).collect();
    move |phi: &ParamVector| {
        let adapter = template.with_params(phi.clone())?;
        match target {
            CurvatureTarget::SftLoss => Ok(data.sft(base, &adapter, &new_idx)?.grad),
            CurvatureTarget::DpoLoss => Ok(data.dpo(base, &adapter, &pair_idx, beta)?.grad),
            CurvatureTarget::UpdateLoss => Ok(data.update(base, &adapter, &new_idx, &pair_idx, lambda, beta)?.1),
            other => Err(Error::Config(format!("{other:?} is not a training objective"))),
        }
    }
}

/// κ̂: dominant `|eigenvalue|` of the margin Hessian for one pair.
pub fn margin_curvature(base: &BaseParams, adapter: &AdapterState, pair: &EditPair, cfg: &PowerConfig) -> Result<CurvatureReport> {
    let f = MarginFn::new(base, adapter, pair)?;
    lambda_max(|p: &ParamVector| f.grad(p), adapter.params(), cfg, CurvatureTarget::Margin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackCheck {
    pub gamma: f64,
    pub delta_norm: f64,
    pub grad_dot_delta: f64,
    pub kappa: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub realized: f64,
    pub fell_back: bool,
}

/// `rhs = −⟨∇m, Δ⟩ + κ/2·‖Δ‖²`; the condition holds iff `γ > rhs`.
pub fn fallback_condition(gamma: f64, grad_dot_delta: f64, kappa: f64, delta_norm: f64) -> (f64, bool) {
    let rhs = -grad_dot_delta + 0.5 * kappa * delta_norm * delta_norm;
    (rhs, gamma > rhs)
}

/// Evaluates the sufficient no-fallback condition at `adapter` for a
/// perturbation `delta`, with κ̂ estimated at the current point, and the
/// realized margin after applying `delta`.
pub fn fallback_check(base: &BaseParams, adapter: &AdapterState, pair: &EditPair, delta: &ParamVector, cfg: &PowerConfig) -> Result<FallbackCheck> {
    let delta_norm = delta.norm();
    if delta_norm > cfg.trust_radius {
        return Err(Error::Config(format!("‖Δ‖ = {delta_norm} exceeds trust radius {}", cfg.trust_radius)));
    }
    let f = MarginFn::new(base, adapter, pair)?;
    let phi = adapter.params();
    let gamma = f.value(phi)?;
    let grad_dot_delta = f.grad(phi)?.dot(delta)?;
    let kappa = lambda_max(|p: &ParamVector| f.grad(p), phi, cfg, CurvatureTarget::Margin)?.lambda_max;
    let realized = f.value(&phi.add(delta)?)?;
    let (rhs, satisfied) = fallback_condition(gamma, grad_dot_delta, kappa, delta_norm);
    Ok(FallbackCheck { gamma, delta_norm, grad_dot_delta, kappa, rhs, satisfied, realized, fell_back: realized <= 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleCheck {
    pub dpo: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `‖H_dpo‖ ≤ (‖H_update‖ + ‖H_sft‖)/λ + tol`, from `H_update = H_sft + λ·H_dpo`.
pub fn triangle_check(dpo: f64, update: f64, sft: f64, lambda: f64, tol: f64) -> TriangleCheck {
    let bound = (update + sft) / lambda;
    TriangleCheck { dpo, bound, holds: dpo <= bound + tol }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamLayout;
    use std::sync::Arc;

    fn point(x: &[f64]) -> ParamVector {
        let layout = Arc::new(ParamLayout::new([("p", vec![x.len()])]).unwrap());
        ParamVector::from_values(layout, x.to_vec()).unwrap()
    }

    fn diag_grad(d: Vec<f64>) -> impl FnMut(&ParamVector) -> Result<ParamVector> {
        move |p: &ParamVector| {
            let vals = p.values().iter().zip(&d).map(|(x, a)| a * x).collect();
            Ok(ParamVector::from_values(p.layout().clone(), vals)?)
        }
    }

    #[test]
    fn diagonal_quadratic_hvp_and_spectrum() {
        let phi = point(&[0.3, -0.2]);
        let hv = hvp(diag_grad(vec![2.0, 5.0]), &phi, &point(&[1.0, 0.0]), 1e-4).unwrap();
        assert!((hv.values()[0] - 2.0).abs() < 1e-6 && hv.values()[1].abs() < 1e-6);
        let r = lambda_max(diag_grad(vec![2.0, 5.0]), &phi, &PowerConfig::default(), CurvatureTarget::Custom).unwrap();
        assert!((r.lambda_max - 5.0).abs() < 1e-3, "{r:?}");
        assert!(r.converged);
    }

    #[test]
    fn linear_and_constant_functions_have_no_curvature() {
        let phi = point(&[1.0, 2.0, 3.0]);
        let lin = |p: &ParamVector| Ok(ParamVector::from_values(p.layout().clone(), vec![1.0, -2.0, 0.5])?);
        let hv = hvp(lin, &phi, &point(&[0.2, 0.1, -1.0]), 1e-4).unwrap();
        assert!(hv.norm() < 1e-8);
        let r = lambda_max(lin, &phi, &PowerConfig::default(), CurvatureTarget::Custom).unwrap();
        assert!(r.lambda_max < 1e-8);
    }

    #[test]
    fn errors() {
        let phi = point(&[1.0]);
        assert!(hvp(diag_grad(vec![1.0]), &phi, &point(&[0.0]), 1e-4).is_err());
        assert!(hvp(diag_grad(vec![1.0]), &phi, &point(&[1.0]), 0.0).is_err());
        let cfg = PowerConfig { iters: 0, ..Default::default() };
        assert!(lambda_max(diag_grad(vec![1.0]), &phi, &cfg, CurvatureTarget::Custom).is_err());
    }

    #[test]
    fn negative_dominant_eigenvalue_reported_as_magnitude() {
        let r = lambda_max(diag_grad(vec![1.0, -4.0]), &point(&[0.0, 0.0]), &PowerConfig::default(), CurvatureTarget::Custom).unwrap();
        assert!((r.lambda_max - 4.0).abs() < 1e-3);
    }

    #[test]
    fn zero_perturbation_condition() {
        assert_eq!(fallback_condition(0.5, 0.0, 3.0, 0.0), (0.0, true));
        assert_eq!(fallback_condition(-0.1, 0.0, 3.0, 0.0), (0.0, false));
    }

    #[test]
    fn triangle_bound() {
        assert!(triangle_check(1.0, 1.5, 0.6, 1.0, 1e-6).holds);
        assert!(!triangle_check(3.0, 1.0, 1.0, 1.0, 1e-6).holds);
    }
}
