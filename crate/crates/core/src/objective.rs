//! Training objectives and the smoothness metric.
//!
//! Every objective here is maximized. Perturbations are treated as fixed
//! inputs: gradients flow through the clean branch `x` and the perturbed
//! branch `x + ε`, never through the construction of `ε`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{categorical_kl_from_logs, GmmState, MklMode};
use crate::net::{ForwardTrace, NetworkParams, ParamGrads, Upstream};
use crate::perturb::{adversarial_perturbation_at, PerturbationSpec};

/// Offset inside the logarithm when `log_smooth` is on.
pub const LOG_SMOOTH_OFFSET: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    Baseline,
    AtSup,
    Vat,
    Mat,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 4] = [Self::Baseline, Self::AtSup, Self::Vat, Self::Mat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::AtSup => "at-sup",
            Self::Vat => "vat",
            Self::Mat => "mat",
        }
    }

    /// Smoothness function whose adversarial direction this mode trains on.
    pub fn smoothness(self) -> Option<SmoothnessObjective> {
        match self {
            Self::Vat => Some(SmoothnessObjective::OutputKl),
            Self::Mat => Some(SmoothnessObjective::Combined),
            Self::Baseline | Self::AtSup => None,
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, Self::Vat | Self::Mat)
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown training mode {s:?}")))
    }
}

/// Which divergence a smoothness term measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothnessObjective {
    /// `L_KL`: KL between output distributions.
    OutputKl,
    /// `M_KL`: latent divergence under the mixture.
    ManifoldKl,
    /// `S_KL = L_KL + M_KL`.
    Combined,
}

impl SmoothnessObjective {
    pub fn uses_output(self) -> bool {
        matches!(self, Self::OutputKl | Self::Combined)
    }

    pub fn uses_latent(self) -> bool {
        matches!(self, Self::ManifoldKl | Self::Combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mode: TrainingMode,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Penalize `log(S + 1e-8)` instead of `S`.
    pub log_smooth: bool,
    pub mkl_mode: MklMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Mat,
            lambda1: 1.0,
            lambda2: 0.0,
            log_smooth: false,
            mkl_mode: MklMode::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// `KL(p(·|x) ‖ p(·|x+ε))` from two forward passes.
pub fn output_kl(anchor: &ForwardTrace, pert: &ForwardTrace) -> f64 {
    categorical_kl_from_logs(&anchor.log_probs, &pert.log_probs)
}

/// Gradients of [`output_kl`] with respect to the clean and perturbed logits.
pub fn output_kl_grads(anchor: &ForwardTrace, pert: &ForwardTrace) -> (Vec<f64>, Vec<f64>) {
    let kl: f64 = anchor
        .probs
        .iter()
        .zip(&anchor.log_probs)
        .zip(&pert.log_probs)
        .map(|((p, lp), lq)| p * (lp - lq))
        .sum();
    let g_anchor = anchor
        .probs
        .iter()
        .zip(&anchor.log_probs)
        .zip(&pert.log_probs)
        .map(|((p, lp), lq)| p * (lp - lq) - p * kl)
        .collect();
    let g_pert = pert
        .probs
        .iter()
        .zip(&anchor.probs)
        .map(|(q, p)| q - p)
        .collect();
    (g_anchor, g_pert)
}

fn shifted(x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if x.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!(
            "perturbation of length {} for input of length {}",
            eps.len(),
            x.len()
        )));
    }
    Ok(x.iter().zip(eps).map(|(a, b)| a + b).collect())
}

/// `L_KL(x, ε)`.
pub fn l_kl(params: &NetworkParams, x: &[f64], eps: &[f64]) -> Result<f64> {
    let anchor = params.forward(x)?;
    let pert = params.forward(&shifted(x, eps)?)?;
    Ok(output_kl(&anchor, &pert))
}

/// `M_KL(x, ε)`.
pub fn m_kl(
    params: &NetworkParams,
    gmm: &GmmState,
    x: &[f64],
    eps: &[f64],
    mode: MklMode,
) -> Result<f64> {
    let anchor = params.forward(x)?;
    let pert = params.forward(&shifted(x, eps)?)?;
    gmm.m_kl(anchor.latent(), pert.latent(), mode)
}

/// `S_KL(x, ε) = L_KL + M_KL`.
pub fn s_kl(
    params: &NetworkParams,
    gmm: &GmmState,
    x: &[f64],
    eps: &[f64],
    mode: MklMode,
) -> Result<f64> {
    let anchor = params.forward(x)?;
    let pert = params.forward(&shifted(x, eps)?)?;
    Ok(output_kl(&anchor, &pert) + gmm.m_kl(anchor.latent(), pert.latent(), mode)?)
}

/// A labeled sample with its training perturbation.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSample<'a> {
    pub x: &'a [f64],
    pub label: usize,
    pub eps: &'a [f64],
}

/// An unlabeled sample with its training perturbation.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledSample<'a> {
    pub x: &'a [f64],
    pub eps: &'a [f64],
}

/// Objective value with optional gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grads: Option<ParamGrads>,
    /// `∂J/∂x` per labeled sample, then per unlabeled sample.
    pub input_grads: Option<Vec<Vec<f64>>>,
}

/// Objective of one training batch.
///
/// * `baseline`: `(1/N_l) Σ log p(y|x)`.
/// * `at-sup`: `½ (1/N_l) Σ log p(y|x) + ½ (1/N_l) Σ log p(y|x+ε)`.
/// * `vat`: `(1/N_l) Σ log p(y|x) − λ1 (1/N) Σ L_KL(x, ε)` over all `N`
///   labeled and unlabeled samples.
/// * `mat`: `(1/N_l) Σ log p(y|x) − λ1 (1/N) Σ S_KL(x, ε) + λ2 I_θ`, with
///   `I_θ = Σ_labeled log N(f(x) | μ_y, Σ_y)`.
///
/// With `log_smooth`, the smoothness term is `log(S + 1e-8)` per sample.
pub fn total_objective(
    params: &NetworkParams,
    gmm: &GmmState,
    labeled: &[LabeledSample<'_>],
    unlabeled: &[UnlabeledSample<'_>],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    Ok(evaluate_objective(params, gmm, labeled, unlabeled, None, cfg, false, false)?.value)
}

/// [`total_objective`] and its gradient with respect to the parameters.
pub fn total_objective_grad(
    params: &NetworkParams,
    gmm: &GmmState,
    labeled: &[LabeledSample<'_>],
    unlabeled: &[UnlabeledSample<'_>],
    cfg: &ObjectiveConfig,
) -> Result<(f64, ParamGrads)> {
    let e = evaluate_objective(params, gmm, labeled, unlabeled, None, cfg, true, false)?;
    Ok((e.value, e.grads.expect("requested")))
}

/// Full evaluation. `anchors`, when given, holds the clean forward passes of
/// the labeled samples followed by the unlabeled ones.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    params: &NetworkParams,
    gmm: &GmmState,
    labeled: &[LabeledSample<'_>],
    unlabeled: &[UnlabeledSample<'_>],
    anchors: Option<&[ForwardTrace]>,
    cfg: &ObjectiveConfig,
    want_grads: bool,
    want_inputs: bool,
) -> Result<ObjectiveEval> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidConfig(
            "objective needs at least one labeled sample".into(),
        ));
    }
    if let Some(a) = anchors {
        if a.len() != labeled.len() + unlabeled.len() {
            return Err(Error::ShapeMismatch(
                "anchor count does not match the batch".into(),
            ));
        }
    }
    if params.latent_dim() != gmm.dim() || params.output_dim() != gmm.num_components() {
        return Err(Error::ShapeMismatch(
            "mixture does not match the network's latent or output size".into(),
        ));
    }
    let mode = cfg.mode;
    let n_l = labeled.len() as f64;
    let smooth = mode.smoothness();
    let n_smooth = if mode.uses_unlabeled() {
        labeled.len() + unlabeled.len()
    } else {
        0
    };
    let w_smooth = if n_smooth > 0 {
        cfg.lambda1 / n_smooth as f64
    } else {
        0.0
    };
    let (w_ll, w_ll_adv) = match mode {
        TrainingMode::AtSup => (0.5 / n_l, 0.5 / n_l),
        _ => (1.0 / n_l, 0.0),
    };
    let w_info = if mode == TrainingMode::Mat {
        cfg.lambda2
    } else {
        0.0
    };

    let mut grads = want_grads.then(|| ParamGrads::zeros_like(params));
    let mut input_grads = want_inputs.then(Vec::new);
    let mut value = 0.0;

    let samples = labeled
        .iter()
        .map(|s| (s.x, Some(s.label), s.eps))
        .chain(unlabeled.iter().map(|s| (s.x, None, s.eps)));
    for (i, (x, label, eps)) in samples.enumerate() {
        let owned;
        let anchor = match anchors {
            Some(a) => &a[i],
            None => {
                owned = params.forward(x)?;
                &owned
            }
        };
        let out_dim = params.output_dim();
        let mut g_logits_a = vec![0.0; out_dim];
        let mut g_lat_a: Option<Vec<f64>> = None;
        let mut branch_b: Option<(ForwardTrace, Vec<f64>, Option<Vec<f64>>)> = None;

        if let Some(y) = label {
            if y >= out_dim {
                return Err(Error::InvalidConfig(format!("label {y} out of range")));
            }
            value += w_ll * anchor.log_probs[y];
            for (k, g) in g_logits_a.iter_mut().enumerate() {
                *g += w_ll * (f64::from(k == y) - anchor.probs[k]);
            }
            if w_ll_adv != 0.0 {
                let pert = params.forward(&shifted(x, eps)?)?;
                value += w_ll_adv * pert.log_probs[y];
                let g: Vec<f64> = (0..out_dim)
                    .map(|k| w_ll_adv * (f64::from(k == y) - pert.probs[k]))
                    .collect();
                branch_b = Some((pert, g, None));
            }
            if w_info != 0.0 {
                value += w_info * gmm.component_log_density(anchor.latent(), y)?;
                let g = gmm.log_density_grad(anchor.latent(), y)?;
                g_lat_a = Some(g.into_iter().map(|v| w_info * v).collect());
            }
        }

        if let (Some(obj), true) = (smooth, w_smooth != 0.0) {
            let pert = params.forward(&shifted(x, eps)?)?;
            let mut s = 0.0;
            let (mut ga, mut gb) = (vec![0.0; out_dim], vec![0.0; out_dim]);
            let (mut lza, mut lzb) = (None, None);
            if obj.uses_output() {
                s += output_kl(anchor, &pert);
                (ga, gb) = output_kl_grads(anchor, &pert);
            }
            if obj.uses_latent() {
                s += gmm.m_kl(anchor.latent(), pert.latent(), cfg.mkl_mode)?;
                let (za, zb) = gmm.m_kl_grads(anchor.latent(), pert.latent(), cfg.mkl_mode)?;
                lza = Some(za);
                lzb = Some(zb);
            }
            let (term, dterm) = if cfg.log_smooth {
                ((s + LOG_SMOOTH_OFFSET).ln(), 1.0 / (s + LOG_SMOOTH_OFFSET))
            } else {
                (s, 1.0)
            };
            value -= w_smooth * term;
            let c = -w_smooth * dterm;
            g_logits_a
                .iter_mut()
                .zip(&ga)
                .for_each(|(a, b)| *a += c * b);
            if let Some(za) = lza {
                let acc = g_lat_a.get_or_insert_with(|| vec![0.0; za.len()]);
                acc.iter_mut().zip(&za).for_each(|(a, b)| *a += c * b);
            }
            let gb: Vec<f64> = gb.iter().map(|v| c * v).collect();
            let lzb = lzb.map(|z| z.into_iter().map(|v| c * v).collect::<Vec<_>>());
            branch_b = Some((pert, gb, lzb));
        }

        let want_backprop = grads.is_some() || input_grads.is_some();
        if !want_backprop {
            continue;
        }
        let mut gx = params.backprop(
            anchor,
            Upstream {
                logits: &g_logits_a,
                latent: g_lat_a.as_deref(),
            },
            grads.as_mut(),
            want_inputs,
        )?;
        if let Some((pert, gl, gz)) = &branch_b {
            let gxb = params.backprop(
                pert,
                Upstream {
                    logits: gl,
                    latent: gz.as_deref(),
                },
                grads.as_mut(),
                want_inputs,
            )?;
            if let (Some(a), Some(b)) = (gx.as_mut(), gxb) {
                a.iter_mut().zip(&b).for_each(|(p, q)| *p += q);
            }
        }
        if let (Some(all), Some(g)) = (input_grads.as_mut(), gx) {
            all.push(g);
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("objective value"));
    }
    Ok(ObjectiveEval {
        value,
        grads,
        input_grads,
    })
}

/// Smoothness metric `R = (1/2N) Σ [L_KL(x, d̂) + M_KL(x, d̂)]`, where `d̂` is
/// the unit power-method direction of `S_KL` at each sample.
///
/// Samples whose direction is degenerate contribute zero.
pub fn r_smooth(
    params: &NetworkParams,
    gmm: &GmmState,
    inputs: &[&[f64]],
    spec: &PerturbationSpec,
    mkl_mode: MklMode,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::InvalidConfig(
            "smoothness metric needs at least one sample".into(),
        ));
    }
    let unit = PerturbationSpec {
        sigma: 1.0,
        strict_xi_budget: false,
        ..*spec
    };
    let mut total = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let anchor = params.forward(x)?;
        let d = match adversarial_perturbation_at(
            params,
            Some(gmm),
            &anchor,
            SmoothnessObjective::Combined,
            mkl_mode,
            &unit,
            i as u64,
        ) {
            Ok(d) => d,
            Err(Error::DegenerateDirection) => continue,
            Err(e) => return Err(e),
        };
        let pert = params.forward(&shifted(x, &d)?)?;
        total += output_kl(&anchor, &pert) + gmm.m_kl(anchor.latent(), pert.latent(), mkl_mode)?;
    }
    Ok(total / (2.0 * inputs.len() as f64))
}
