//! Gaussian mixture over the latent layer.
//!
//! One component per class with uniform weights `1/M`. Means and
//! covariances are not trained by gradient; they track the labeled latents
//! through exponential moving averages ([`GmmState::ema_update`]).

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_factor, cholesky_jittered, dot, CholeskyFactor, Matrix, SPD_JITTER};
use crate::net::log_softmax;

/// Latent dimension above which [`CovarianceMode::auto`] picks diagonal.
pub const DIAGONAL_ABOVE_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Full,
    Diagonal,
}

impl CovarianceMode {
    pub fn auto(dim: usize) -> Self {
        if dim > DIAGONAL_ABOVE_DIM {
            CovarianceMode::Diagonal
        } else {
            CovarianceMode::Full
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CovarianceMode::Full => "full",
            CovarianceMode::Diagonal => "diagonal",
        }
    }
}

/// How the latent (manifold) smoothness compares two latent points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MklMode {
    /// Mixture-to-mixture KL bounded by pairing component `j` of one mixture
    /// with component `j` of the other; both mixtures share `Σ_j` and are
    /// centered on the two latent points.
    #[default]
    MatchedGaussian,
    /// Categorical KL between the two posterior class distributions.
    ResponsibilityKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    /// Covariance memory.
    pub alpha: f64,
    /// Mean memory.
    pub beta: f64,
    pub ridge: f64,
    /// Center the batch covariance at the updated mean. When false the raw
    /// second moment `XᵀX / N` is used instead.
    pub centered: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.9,
            ridge: 1e-6,
            centered: true,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        if !rate(self.alpha) || !rate(self.beta) {
            return Err(Error::InvalidConfig(format!(
                "EMA rates must lie in [0, 1] (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge {} must be >= 0",
                self.ridge
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Covariance {
    Full {
        matrix: Matrix,
        factor: CholeskyFactor,
    },
    Diagonal {
        var: Vec<f64>,
        effective: Vec<f64>,
    },
}

impl Covariance {
    fn full(matrix: Matrix) -> Result<Self> {
        let matrix = matrix.symmetrized()?;
        let factor = cholesky_jittered(&matrix, SPD_JITTER)?;
        Ok(Covariance::Full { matrix, factor })
    }

    fn diagonal(var: Vec<f64>) -> Result<Self> {
        if var.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        let max = var.iter().copied().fold(0.0f64, f64::max);
        let floor = 1e-12 * max;
        let effective = var
            .iter()
            .map(|&v| {
                if v > floor && v > 0.0 {
                    v
                } else {
                    v.max(0.0) + SPD_JITTER
                }
            })
            .collect();
        Ok(Covariance::Diagonal { var, effective })
    }

    fn logdet(&self) -> f64 {
        match self {
            Covariance::Full { factor, .. } => factor.logdet(),
            Covariance::Diagonal { effective, .. } => effective.iter().map(|v| v.ln()).sum(),
        }
    }

    /// `Σ⁻¹ v`.
    fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Covariance::Full { factor, .. } => factor.solve(v).expect("dimension checked"),
            Covariance::Diagonal { effective, .. } => {
                v.iter().zip(effective).map(|(x, s)| x / s).collect()
            }
        }
    }

    /// Stored values: the full matrix row-major, or the diagonal.
    fn values(&self) -> Vec<f64> {
        match self {
            Covariance::Full { matrix, .. } => matrix.as_slice().to_vec(),
            Covariance::Diagonal { var, .. } => var.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    cov: Covariance,
    logdet: f64,
}

/// Mixture state: `M` components over a `D`-dimensional latent space.
///
/// Immutable; [`ema_update`](Self::ema_update) returns a new state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "GmmSnapshot", try_from = "GmmSnapshot")]
pub struct GmmState {
    dim: usize,
    mode: CovarianceMode,
    components: Vec<Component>,
    /// `(1/M) Σ_j Σ_j⁻¹`, full (row-major) or diagonal.
    mean_precision: Vec<f64>,
}

impl PartialEq for GmmState {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.mode == other.mode
            && self.components.len() == other.components.len()
            && self
                .components
                .iter()
                .zip(&other.components)
                .all(|(a, b)| a.mean == b.mean && a.cov.values() == b.cov.values())
    }
}

/// Plain serializable form of a [`GmmState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSnapshot {
    pub dim: usize,
    pub mode: CovarianceMode,
    pub means: Vec<Vec<f64>>,
    /// Row-major `D×D` in full mode, length-`D` diagonals otherwise.
    pub covariances: Vec<Vec<f64>>,
}

impl From<GmmState> for GmmSnapshot {
    fn from(g: GmmState) -> Self {
        GmmSnapshot {
            dim: g.dim,
            mode: g.mode,
            means: g.components.iter().map(|c| c.mean.clone()).collect(),
            covariances: g.components.iter().map(|c| c.cov.values()).collect(),
        }
    }
}

impl TryFrom<GmmSnapshot> for GmmState {
    type Error = Error;

    fn try_from(s: GmmSnapshot) -> Result<Self> {
        match s.mode {
            CovarianceMode::Diagonal => GmmState::diagonal(s.means, s.covariances),
            CovarianceMode::Full => {
                let covs = s
                    .covariances
                    .into_iter()
                    .map(|c| Matrix::new(s.dim, s.dim, c))
                    .collect::<Result<Vec<_>>>()?;
                GmmState::full(s.means, covs)
            }
        }
    }
}

impl GmmState {
    pub fn full(means: Vec<Vec<f64>>, covs: Vec<Matrix>) -> Result<Self> {
        let dim = Self::check_means(&means, covs.len())?;
        let mut cov_list = Vec::with_capacity(covs.len());
        for c in covs {
            if c.rows() != dim || c.cols() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "covariance {}x{} for latent dimension {dim}",
                    c.rows(),
                    c.cols()
                )));
            }
            cov_list.push(Covariance::full(c)?);
        }
        Ok(Self::assemble(dim, CovarianceMode::Full, means, cov_list))
    }

    pub fn diagonal(means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let dim = Self::check_means(&means, vars.len())?;
        let mut cov_list = Vec::with_capacity(vars.len());
        for v in vars {
            if v.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "diagonal of length {} for latent dimension {dim}",
                    v.len()
                )));
            }
            cov_list.push(Covariance::diagonal(v)?);
        }
        Ok(Self::assemble(
            dim,
            CovarianceMode::Diagonal,
            means,
            cov_list,
        ))
    }

    /// Zero means and identity covariances.
    pub fn standard(components: usize, dim: usize, mode: CovarianceMode) -> Self {
        let means = vec![vec![0.0; dim]; components];
        match mode {
            CovarianceMode::Full => Self::full(means, vec![Matrix::identity(dim); components]),
            CovarianceMode::Diagonal => Self::diagonal(means, vec![vec![1.0; dim]; components]),
        }
        .expect("identity covariances are SPD")
    }

    fn check_means(means: &[Vec<f64>], n_covs: usize) -> Result<usize> {
        if means.is_empty() {
            return Err(Error::InvalidConfig(
                "mixture needs at least one component".into(),
            ));
        }
        if means.len() != n_covs {
            return Err(Error::ShapeMismatch(format!(
                "{} means but {n_covs} covariances",
                means.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::ShapeMismatch(
                "means must share a non-zero dimension".into(),
            ));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        Ok(dim)
    }

    fn assemble(
        dim: usize,
        mode: CovarianceMode,
        means: Vec<Vec<f64>>,
        covs: Vec<Covariance>,
    ) -> Self {
        let m = covs.len() as f64;
        let mean_precision = match mode {
            CovarianceMode::Full => {
                let mut acc = vec![0.0; dim * dim];
                for c in &covs {
                    if let Covariance::Full { factor, .. } = c {
                        let inv = factor.inverse().expect("factor is valid");
                        for (a, b) in acc.iter_mut().zip(inv.as_slice()) {
                            *a += b / m;
                        }
                    }
                }
                acc
            }
            CovarianceMode::Diagonal => {
                let mut acc = vec![0.0; dim];
                for c in &covs {
                    if let Covariance::Diagonal { effective, .. } = c {
                        for (a, s) in acc.iter_mut().zip(effective) {
                            *a += 1.0 / (s * m);
                        }
                    }
                }
                acc
            }
        };
        let components = means
            .into_iter()
            .zip(covs)
            .map(|(mean, cov)| Component {
                logdet: cov.logdet(),
                mean,
                cov,
            })
            .collect();
        Self {
            dim,
            mode,
            components,
            mean_precision,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        &self.components[j].mean
    }

    /// Stored covariance of component `j` as a dense matrix.
    pub fn covariance(&self, j: usize) -> Matrix {
        match &self.components[j].cov {
            Covariance::Full { matrix, .. } => matrix.clone(),
            Covariance::Diagonal { var, .. } => Matrix::from_diag(var),
        }
    }

    pub fn snapshot(&self) -> GmmSnapshot {
        self.clone().into()
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "latent of length {} for a mixture of dimension {}",
                z.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn check_class(&self, j: usize) -> Result<()> {
        if j >= self.components.len() {
            return Err(Error::ShapeMismatch(format!(
                "class {j} out of range for {} components",
                self.components.len()
            )));
        }
        Ok(())
    }

    /// `log N(z | μ_j, Σ_j)`.
    pub fn component_log_density(&self, z: &[f64], j: usize) -> Result<f64> {
        self.check_point(z)?;
        self.check_class(j)?;
        Ok(self.log_density_unchecked(z, j))
    }

    fn log_density_unchecked(&self, z: &[f64], j: usize) -> f64 {
        let c = &self.components[j];
        let diff: Vec<f64> = z.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
        let mahal = dot(&diff, &c.cov.solve(&diff));
        -0.5 * (self.dim as f64) * (2.0 * PI).ln() - 0.5 * c.logdet - 0.5 * mahal
    }

    /// `∇_z log N(z | μ_j, Σ_j) = −Σ_j⁻¹ (z − μ_j)`.
    pub fn log_density_grad(&self, z: &[f64], j: usize) -> Result<Vec<f64>> {
        self.check_point(z)?;
        self.check_class(j)?;
        Ok(self.log_density_grad_unchecked(z, j))
    }

    fn log_density_grad_unchecked(&self, z: &[f64], j: usize) -> Vec<f64> {
        let c = &self.components[j];
        let diff: Vec<f64> = z.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
        c.cov.solve(&diff).into_iter().map(|v| -v).collect()
    }

    fn log_responsibilities(&self, z: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.components.len())
            .map(|j| self.log_density_unchecked(z, j))
            .collect();
        log_softmax(&logs)
    }

    /// Posterior class probabilities `P(c_j | z)` under uniform priors.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_point(z)?;
        Ok(self
            .log_responsibilities(z)
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Information regularizer: `Σ_i log N(z_i | μ_{y_i}, Σ_{y_i})`.
    pub fn mutual_info_reg<'a>(
        &self,
        latents: impl IntoIterator<Item = (&'a [f64], usize)>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (z, label) in latents {
            total += self.component_log_density(z, label)?;
        }
        Ok(total)
    }

    /// Latent smoothness between `z` and its perturbed counterpart `z_pert`.
    /// Zero when the two coincide, non-negative otherwise.
    pub fn m_kl(&self, z: &[f64], z_pert: &[f64], mode: MklMode) -> Result<f64> {
        self.check_point(z)?;
        self.check_point(z_pert)?;
        Ok(match mode {
            MklMode::MatchedGaussian => {
                let delta: Vec<f64> = z_pert.iter().zip(z).map(|(a, b)| a - b).collect();
                0.5 * dot(&delta, &self.apply_mean_precision(&delta))
            }
            MklMode::ResponsibilityKl => {
                let lr = self.log_responsibilities(z);
                let lq = self.log_responsibilities(z_pert);
                categorical_kl_from_logs(&lr, &lq)
            }
        })
    }

    /// Gradients of [`m_kl`](Self::m_kl) with respect to `z` and `z_pert`.
    pub fn m_kl_grads(
        &self,
        z: &[f64],
        z_pert: &[f64],
        mode: MklMode,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_point(z)?;
        self.check_point(z_pert)?;
        Ok(match mode {
            MklMode::MatchedGaussian => {
                let delta: Vec<f64> = z_pert.iter().zip(z).map(|(a, b)| a - b).collect();
                let g = self.apply_mean_precision(&delta);
                (g.iter().map(|v| -v).collect(), g)
            }
            MklMode::ResponsibilityKl => {
                let m = self.components.len();
                let lr = self.log_responsibilities(z);
                let lq = self.log_responsibilities(z_pert);
                let kl: f64 = lr.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
                let mut g_z = vec![0.0; self.dim];
                let mut g_pert = vec![0.0; self.dim];
                for j in 0..m {
                    let r = lr[j].exp();
                    let q = lq[j].exp();
                    // ∇_z: Σ_j r_j (log r_j − log q_j − KL) ∇log u_j(z)
                    let w = r * (lr[j] - lq[j] - kl);
                    if w != 0.0 {
                        let gj = self.log_density_grad_unchecked(z, j);
                        g_z.iter_mut().zip(&gj).for_each(|(a, b)| *a += w * b);
                    }
                    // ∇_{z'}: Σ_j (q_j − r_j) ∇log u_j(z')
                    let w = q - r;
                    if w != 0.0 {
                        let gj = self.log_density_grad_unchecked(z_pert, j);
                        g_pert.iter_mut().zip(&gj).for_each(|(a, b)| *a += w * b);
                    }
                }
                (g_z, g_pert)
            }
        })
    }

    fn apply_mean_precision(&self, v: &[f64]) -> Vec<f64> {
        match self.mode {
            CovarianceMode::Diagonal => v
                .iter()
                .zip(&self.mean_precision)
                .map(|(a, p)| a * p)
                .collect(),
            CovarianceMode::Full => self
                .mean_precision
                .chunks(self.dim)
                .map(|row| dot(row, v))
                .collect(),
        }
    }

    /// Moving-average update from a batch of labeled latents.
    ///
    /// For each class `i` with at least one sample:
    /// `μ_i ← β μ_i + (1−β) mean(X_i)` and
    /// `Σ_i ← α Σ_i + (1−α) (Cov(X_i) + ridge·I)`, where `Cov` is centered at
    /// the updated mean (or is the raw second moment when
    /// `cfg.centered == false`). Classes without samples are left unchanged.
    pub fn ema_update<'a>(
        &self,
        latents: impl IntoIterator<Item = (&'a [f64], usize)>,
        cfg: &EmaConfig,
    ) -> Result<GmmState> {
        cfg.validate()?;
        let m = self.components.len();
        let d = self.dim;
        let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); m];
        for (z, label) in latents {
            self.check_point(z)?;
            self.check_class(label)?;
            groups[label].push(z);
        }

        let mut means = Vec::with_capacity(m);
        let mut covs: Vec<Vec<f64>> = Vec::with_capacity(m);
        for (comp, group) in self.components.iter().zip(&groups) {
            if group.is_empty() {
                means.push(comp.mean.clone());
                covs.push(comp.cov.values());
                continue;
            }
            let n = group.len() as f64;
            let mut batch_mean = vec![0.0; d];
            for z in group {
                batch_mean.iter_mut().zip(*z).for_each(|(a, b)| *a += b);
            }
            batch_mean.iter_mut().for_each(|a| *a /= n);
            let mean: Vec<f64> = comp
                .mean
                .iter()
                .zip(&batch_mean)
                .map(|(&old, &new)| blend(cfg.beta, old, new))
                .collect();

            let center: Vec<f64> = if cfg.centered {
                mean.clone()
            } else {
                vec![0.0; d]
            };
            let old_cov = comp.cov.values();
            let new_cov = match self.mode {
                CovarianceMode::Full => {
                    let mut s = vec![0.0; d * d];
                    for z in group {
                        let diff: Vec<f64> = z.iter().zip(&center).map(|(a, b)| a - b).collect();
                        for r in 0..d {
                            for c in 0..d {
                                s[r * d + c] += diff[r] * diff[c];
                            }
                        }
                    }
                    for r in 0..d {
                        for c in 0..d {
                            let mut v = s[r * d + c] / n;
                            if r == c {
                                v += cfg.ridge;
                            }
                            s[r * d + c] = v;
                        }
                    }
                    s
                }
                CovarianceMode::Diagonal => {
                    let mut s = vec![0.0; d];
                    for z in group {
                        for k in 0..d {
                            let diff = z[k] - center[k];
                            s[k] += diff * diff;
                        }
                    }
                    s.iter().map(|v| v / n + cfg.ridge).collect()
                }
            };
            means.push(mean);
            covs.push(
                old_cov
                    .iter()
                    .zip(&new_cov)
                    .map(|(&old, &new)| blend(cfg.alpha, old, new))
                    .collect(),
            );
        }
        GmmSnapshot {
            dim: d,
            mode: self.mode,
            means,
            covariances: covs,
        }
        .try_into()
    }

    /// CSV dump: a `#` header line naming D, M and the covariance mode, a
    /// column header, then one row per component.
    pub fn to_csv(&self) -> String {
        let d = self.dim;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# dim={d},components={},covariance={}",
            self.components.len(),
            self.mode.name()
        );
        s.push_str("class");
        for k in 0..d {
            let _ = write!(s, ",mu_{k}");
        }
        match self.mode {
            CovarianceMode::Full => {
                for r in 0..d {
                    for c in 0..d {
                        let _ = write!(s, ",sigma_{r}_{c}");
                    }
                }
            }
            CovarianceMode::Diagonal => {
                for k in 0..d {
                    let _ = write!(s, ",sigma_{k}");
                }
            }
        }
        s.push('\n');
        for (j, c) in self.components.iter().enumerate() {
            let _ = write!(s, "{j}");
            for v in c.mean.iter().chain(c.cov.values().iter()) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// `w·old + (1−w)·new`, returning the endpoints exactly at `w ∈ {0, 1}`.
fn blend(w: f64, old: f64, new: f64) -> f64 {
    if w == 1.0 {
        old
    } else if w == 0.0 {
        new
    } else {
        w * old + (1.0 - w) * new
    }
}

/// `KL(p ‖ q)` from log-probabilities, clamped at zero.
pub fn categorical_kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q)
        .map(|(a, b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum();
    kl.max(0.0)
}

/// Closed-form `KL(N(μ0, Σ0) ‖ N(μ1, Σ1))`.
pub fn kl_gaussian(mu0: &[f64], cov0: &Matrix, mu1: &[f64], cov1: &Matrix) -> Result<f64> {
    let d = mu0.len();
    if mu1.len() != d
        || cov0.rows() != d
        || cov1.rows() != d
        || !cov0.is_square()
        || !cov1.is_square()
    {
        return Err(Error::ShapeMismatch(
            "kl_gaussian: inconsistent dimensions".into(),
        ));
    }
    let f0 = cholesky_factor(cov0)?;
    let f1 = cholesky_factor(cov1)?;
    if mu0 == mu1 && cov0 == cov1 {
        return Ok(0.0);
    }
    let mut trace = 0.0;
    let mut e = vec![0.0; d];
    for j in 0..d {
        for (i, v) in e.iter_mut().enumerate() {
            *v = cov0[(i, j)];
        }
        trace += f1.solve(&e)?[j];
    }
    let diff: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
    let mahal = dot(&diff, &f1.solve(&diff)?);
    let kl = 0.5 * (trace + mahal - d as f64 + f1.logdet() - f0.logdet());
    Ok(kl.max(0.0))
}
