//! Training loop, evaluation and white-box attack sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::gmm::{EmaConfig, GmmState};
use crate::net::{nll_grad_logits, NetworkParams, ParamGrads, Upstream};
use crate::objective::{
    evaluate_objective, r_smooth, LabeledSample, ObjectiveConfig, TrainingMode, UnlabeledSample,
};
use crate::perturb::{adversarial_perturbation_at, lp_worst, LpNorm, PerturbationSpec};

/// `ξ` relative to the batch's mean per-feature standard deviation.
pub const AUTO_XI_FACTOR: f64 = 1e-6;

/// Adversary settings shared by every mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Budget `σ` in feature units.
    pub sigma: f64,
    /// Power-method probe scale; `None` picks it from the batch.
    pub xi: Option<f64>,
    pub n_iters: usize,
    /// Norm of the supervised attack used by `at-sup`.
    pub p: LpNorm,
    pub strict_xi_budget: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            xi: None,
            n_iters: 1,
            p: LpNorm::Infinity,
            strict_xi_budget: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by this every `lr_decay_every` epochs.
    pub lr_decay: f64,
    /// 0 disables the decay.
    pub lr_decay_every: usize,
    pub objective: ObjectiveConfig,
    pub perturbation: PerturbationConfig,
    pub ema: EmaConfig,
    pub seed: u64,
    /// Initialize the mixture from the labeled latents of the initial network.
    pub gmm_warm_start: bool,
    /// Samples of the evaluation set used for the per-epoch smoothness metric;
    /// 0 skips it.
    pub r_smooth_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_labeled: 32,
            batch_unlabeled: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 1.0,
            lr_decay_every: 0,
            objective: ObjectiveConfig::default(),
            perturbation: PerturbationConfig::default(),
            ema: EmaConfig::default(),
            seed: 0,
            gmm_warm_start: true,
            r_smooth_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig("lr_decay must lie in (0, 1]".into()));
        }
        let p = &self.perturbation;
        if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
            return Err(Error::InvalidConfig("sigma must be finite and >= 0".into()));
        }
        if let Some(xi) = p.xi {
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(Error::InvalidConfig("xi must be > 0".into()));
            }
        }
        if p.n_iters == 0 {
            return Err(Error::InvalidConfig("n_iters must be >= 1".into()));
        }
        p.p.validate()?;
        self.objective.validate()?;
        self.ema.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Mean batch objective over the epoch.
    pub objective: f64,
    pub r_smooth: Option<f64>,
    /// Samples whose adversarial direction degenerated to zero.
    pub degenerate_directions: usize,
    /// Kept out of the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::InvalidConfig(format!("report: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    pub degenerate_directions: usize,
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    cfg: TrainConfig,
    labeled: &'a Dataset,
    unlabeled: &'a Dataset,
    params: NetworkParams,
    gmm: GmmState,
    velocity: ParamGrads,
    iteration: u64,
}

fn check_shapes(params: &NetworkParams, gmm: &GmmState, d: &Dataset, what: &str) -> Result<()> {
    if d.is_empty() {
        return Ok(());
    }
    if d.dim() != params.input_dim() {
        return Err(Error::ConfigMismatch(format!(
            "{what} inputs have dimension {} but the network expects {}",
            d.dim(),
            params.input_dim()
        )));
    }
    if d.labels().is_some() && d.class_count() > gmm.num_components() {
        return Err(Error::ConfigMismatch(format!(
            "{what} set has {} classes but the mixture has {} components",
            d.class_count(),
            gmm.num_components()
        )));
    }
    Ok(())
}

/// Mean over features of the per-feature standard deviation.
fn mean_feature_std(xs: &[&[f64]]) -> f64 {
    let n = xs.len() as f64;
    let dim = xs.first().map_or(0, |x| x.len());
    if xs.len() < 2 || dim == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..dim {
        let mean = xs.iter().map(|x| x[k]).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / dim as f64
}

/// `ξ` for a batch: the configured value, or `1e-6` times the batch's mean
/// per-feature standard deviation (`1e-6` when that is zero).
pub fn resolve_xi(configured: Option<f64>, batch: &[&[f64]]) -> f64 {
    configured.unwrap_or_else(|| {
        let s = mean_feature_std(batch);
        AUTO_XI_FACTOR * if s > 0.0 { s } else { 1.0 }
    })
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    master ^ stream.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: NetworkParams,
        gmm: GmmState,
        labeled: &'a Dataset,
        unlabeled: &'a Dataset,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let labels = labeled.require_labels()?;
        if labels.is_empty() {
            return Err(Error::ConfigMismatch("labeled set is empty".into()));
        }
        if params.output_dim() != gmm.num_components() {
            return Err(Error::ConfigMismatch(format!(
                "network has {} outputs but the mixture has {} components",
                params.output_dim(),
                gmm.num_components()
            )));
        }
        if params.latent_dim() != gmm.dim() {
            return Err(Error::ConfigMismatch(format!(
                "latent dimension {} does not match mixture dimension {}",
                params.latent_dim(),
                gmm.dim()
            )));
        }
        check_shapes(&params, &gmm, labeled, "labeled")?;
        check_shapes(&params, &gmm, unlabeled, "unlabeled")?;
        let velocity = ParamGrads::zeros_like(&params);
        let mut t = Self {
            cfg,
            labeled,
            unlabeled,
            params,
            gmm,
            velocity,
            iteration: 0,
        };
        if cfg.gmm_warm_start {
            t.warm_start_gmm()?;
        }
        Ok(t)
    }

    fn warm_start_gmm(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.labeled.len()).collect();
        let cfg = EmaConfig {
            alpha: 0.0,
            beta: 0.0,
            ..self.cfg.ema
        };
        self.gmm = self.updated_gmm(&all, &cfg)?;
        Ok(())
    }

    fn updated_gmm(&self, indices: &[usize], cfg: &EmaConfig) -> Result<GmmState> {
        let labels = self.labeled.require_labels()?;
        let traces = indices
            .iter()
            .map(|&i| self.params.forward(self.labeled.input(i)))
            .collect::<Result<Vec<_>>>()?;
        self.gmm.ema_update(
            traces
                .iter()
                .zip(indices)
                .map(|(t, &i)| (t.latent(), labels[i])),
            cfg,
        )
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn gmm(&self) -> &GmmState {
        &self.gmm
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (NetworkParams, GmmState) {
        (self.params, self.gmm)
    }

    /// One iteration: adversarial directions, a momentum step on the batch
    /// objective, then the mixture update from the post-step latents of the
    /// labeled batch.
    pub fn step(
        &mut self,
        labeled_idx: &[usize],
        unlabeled_idx: &[usize],
        lr: f64,
    ) -> Result<StepStats> {
        if labeled_idx.is_empty() {
            return Err(Error::InvalidConfig("empty labeled batch".into()));
        }
        let cfg = self.cfg;
        let mode = cfg.objective.mode;
        let labels = self.labeled.require_labels()?;
        let unlabeled_idx: &[usize] = if mode.uses_unlabeled() {
            unlabeled_idx
        } else {
            &[]
        };
        let xs: Vec<&[f64]> = labeled_idx
            .iter()
            .map(|&i| self.labeled.input(i))
            .chain(unlabeled_idx.iter().map(|&i| self.unlabeled.input(i)))
            .collect();
        let n_l = labeled_idx.len();
        let anchors = xs
            .iter()
            .map(|x| self.params.forward(x))
            .collect::<Result<Vec<_>>>()?;

        let pc = cfg.perturbation;
        let spec = PerturbationSpec {
            family: crate::perturb::PerturbationFamily::PowerSmoothness,
            p: LpNorm::Finite(2.0),
            sigma: pc.sigma,
            xi: resolve_xi(pc.xi, &xs),
            n_iters: pc.n_iters,
            seed: derive_seed(cfg.seed, self.iteration),
            strict_xi_budget: pc.strict_xi_budget,
        };
        let mut degenerate = 0;
        let eps: Vec<Vec<f64>> = match mode {
            TrainingMode::Baseline => xs.iter().map(|x| vec![0.0; x.len()]).collect(),
            TrainingMode::AtSup => anchors
                .iter()
                .zip(labeled_idx)
                .map(|(a, &i)| {
                    let g = self.params.backprop(
                        a,
                        Upstream {
                            logits: &nll_grad_logits(a, labels[i]),
                            latent: None,
                        },
                        None,
                        true,
                    )?;
                    Ok(lp_worst(&g.expect("requested"), pc.sigma, pc.p))
                })
                .collect::<Result<_>>()?,
            TrainingMode::Vat | TrainingMode::Mat => {
                let obj = mode.smoothness().expect("smoothness mode");
                let mut out = Vec::with_capacity(xs.len());
                for (k, a) in anchors.iter().enumerate() {
                    match adversarial_perturbation_at(
                        &self.params,
                        Some(&self.gmm),
                        a,
                        obj,
                        cfg.objective.mkl_mode,
                        &spec,
                        k as u64,
                    ) {
                        Ok(e) => out.push(e),
                        Err(Error::DegenerateDirection) => {
                            degenerate += 1;
                            out.push(vec![0.0; a.input.len()]);
                        }
                        Err(e) => return Err(e),
                    }
                }
                out
            }
        };
        let labeled: Vec<LabeledSample<'_>> = labeled_idx
            .iter()
            .enumerate()
            .map(|(k, &i)| LabeledSample {
                x: xs[k],
                label: labels[i],
                eps: &eps[k],
            })
            .collect();
        let unlabeled: Vec<UnlabeledSample<'_>> = (n_l..xs.len())
            .map(|k| UnlabeledSample {
                x: xs[k],
                eps: &eps[k],
            })
            .collect();
        let eval = evaluate_objective(
            &self.params,
            &self.gmm,
            &labeled,
            &unlabeled,
            Some(&anchors),
            &cfg.objective,
            true,
            false,
        )?;
        let grads = eval.grads.expect("requested");
        self.velocity.scale(cfg.momentum);
        self.velocity.add_scaled(1.0, &grads);
        self.params.add_scaled(lr, &self.velocity)?;
        self.gmm = self.updated_gmm(labeled_idx, &cfg.ema)?;
        self.iteration += 1;
        Ok(StepStats {
            objective: eval.value,
            degenerate_directions: degenerate,
        })
    }
}

/// Trained network, mixture and per-epoch report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub gmm: GmmState,
    pub report: TrainReport,
}

/// Runs `cfg.epochs` epochs. An epoch is one pass over the labeled set; the
/// unlabeled set cycles independently. `eval`, when given, supplies the test
/// accuracy and the smoothness metric of each record.
pub fn train(
    params: NetworkParams,
    gmm: GmmState,
    labeled: &Dataset,
    unlabeled: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(params, gmm, labeled, unlabeled, *cfg)?;
    if let Some(e) = eval {
        check_shapes(trainer.params(), trainer.gmm(), e, "evaluation")?;
        e.require_labels()?;
    }
    let mut sampler = BatchSampler::new(
        labeled.len(),
        unlabeled.len(),
        cfg.batch_labeled,
        cfg.batch_unlabeled,
        derive_seed(cfg.seed, u64::MAX),
    )?;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let mut total = 0.0;
        let mut degenerate = 0;
        let batches = sampler.epoch();
        for b in &batches {
            let s = trainer.step(&b.labeled, &b.unlabeled, lr)?;
            total += s.objective;
            degenerate += s.degenerate_directions;
        }
        let train_accuracy = evaluate(trainer.params(), labeled)?.accuracy;
        let test_accuracy = eval
            .map(|e| evaluate(trainer.params(), e))
            .transpose()?
            .map(|e| e.accuracy);
        let r_smooth = if cfg.r_smooth_samples > 0 {
            let src = eval.unwrap_or(labeled);
            let n = cfg.r_smooth_samples.min(src.len());
            Some(smoothness_metric(
                trainer.params(),
                trainer.gmm(),
                &src.inputs()[..n],
                cfg,
            )?)
        } else {
            None
        };
        report.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_accuracy,
            test_accuracy,
            objective: total / batches.len() as f64,
            r_smooth,
            degenerate_directions: degenerate,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
    }
    let (params, gmm) = trainer.into_parts();
    Ok(TrainOutcome {
        params,
        gmm,
        report,
    })
}

/// Smoothness metric with the perturbation settings of `cfg`; the probe scale
/// is resolved from the whole evaluation slice when not configured.
pub fn smoothness_metric(
    params: &NetworkParams,
    gmm: &GmmState,
    inputs: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let spec = PerturbationSpec::power(
        1.0,
        resolve_xi(cfg.perturbation.xi, &refs),
        cfg.perturbation.n_iters,
        derive_seed(cfg.seed, u64::MAX - 1),
    );
    r_smooth(params, gmm, &refs, &spec, cfg.objective.mkl_mode)
}

/// Classification quality on a labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub error_rate: f64,
    pub accuracy: f64,
    pub mean_nll: f64,
}

/// Argmax error rate (ties to the lowest class index) and mean NLL.
pub fn evaluate(params: &NetworkParams, dataset: &Dataset) -> Result<Evaluation> {
    let labels = dataset.require_labels()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot evaluate on an empty set".into(),
        ));
    }
    let mut correct = 0usize;
    let mut nll = 0.0;
    for (x, &y) in dataset.inputs().iter().zip(labels) {
        let t = params.forward(x)?;
        if y >= t.log_probs.len() {
            return Err(Error::ConfigMismatch(format!(
                "label {y} exceeds the network outputs"
            )));
        }
        correct += usize::from(t.predicted() == y);
        nll -= t.log_probs[y];
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        error_rate: (dataset.len() - correct) as f64 / n,
        accuracy: correct as f64 / n,
        mean_nll: nll / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    Fgsm,
    L2,
}

impl AttackFamily {
    pub fn norm(self) -> LpNorm {
        match self {
            Self::Fgsm => LpNorm::Infinity,
            Self::L2 => LpNorm::Finite(2.0),
        }
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Self::Fgsm),
            "l2" | "2-norm" => Ok(Self::L2),
            other => Err(Error::InvalidConfig(format!(
                "unknown attack family {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub accuracy: f64,
}

/// White-box sweep: each sample is perturbed by the closed-form worst case of
/// `family` against this network's supervised loss, for each `σ`. Budgets are
/// in raw input units (pixel levels for IDX data), so the feature-space
/// perturbation has size `σ · feature_scale`. No clipping. The `σ = 0` row is
/// the clean accuracy.
pub fn attack_sweep(
    params: &NetworkParams,
    dataset: &Dataset,
    family: AttackFamily,
    sigmas: &[f64],
) -> Result<Vec<SweepRow>> {
    let labels = dataset.require_labels()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("cannot attack an empty set".into()));
    }
    if sigmas.first() != Some(&0.0) {
        return Err(Error::InvalidConfig("sigmas must start at 0".into()));
    }
    if sigmas.windows(2).any(|w| !(w[0] < w[1])) || sigmas.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig(
            "sigmas must be finite and strictly ascending".into(),
        ));
    }
    let scale = dataset.feature_scale();
    let mut correct = vec![0usize; sigmas.len()];
    for (x, &y) in dataset.inputs().iter().zip(labels) {
        let clean = params.forward(x)?;
        let (_, g) = params.backward(&clean, &nll_grad_logits(&clean, y))?;
        for (c, &sigma) in correct.iter_mut().zip(sigmas) {
            let pred = if sigma == 0.0 {
                clean.predicted()
            } else {
                let e = lp_worst(&g, sigma * scale, family.norm());
                let xa: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
                params.predict(&xa)?
            };
            *c += usize::from(pred == y);
        }
    }
    let n = dataset.len() as f64;
    Ok(sigmas
        .iter()
        .zip(correct)
        .map(|(&sigma, c)| SweepRow {
            sigma,
            accuracy: c as f64 / n,
        })
        .collect())
}

/// `sigma,accuracy` CSV.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("sigma,accuracy\n");
    for r in rows {
        writeln!(s, "{},{}", r.sigma, r.accuracy).expect("string write");
    }
    s
}
