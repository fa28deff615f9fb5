//! Worst-case input perturbations.
//!
//! Two families: closed-form `l_p` attacks on the supervised loss, and the
//! power-iteration direction that maximizes a smoothness function whose
//! minimum sits at `ε = 0` (output KL, latent KL, or both).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GmmState, MklMode};
use crate::linalg::{norm2, normalized};
use crate::net::{ForwardTrace, NetworkParams, Upstream};
use crate::objective::{output_kl_grads, SmoothnessObjective};

/// Gradient norm below which the power method gives up.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

/// Norm exponent `p` of an `l_p` ball; `p > 1` or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LpNorm {
    Finite(f64),
    Infinity,
}

impl LpNorm {
    pub fn validate(self) -> Result<Self> {
        match self {
            LpNorm::Finite(p) if !(p > 1.0 && p.is_finite()) => Err(Error::InvalidConfig(format!(
                "norm exponent must exceed 1, got {p}"
            ))),
            other => Ok(other),
        }
    }

    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            LpNorm::Infinity => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
            LpNorm::Finite(p) => v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }
}

impl fmt::Display for LpNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LpNorm::Finite(p) => write!(f, "{p}"),
            LpNorm::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for LpNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "Inf" => Ok(LpNorm::Infinity),
            t => t
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad norm exponent {t:?}")))
                .and_then(|p| {
                    if p.is_infinite() {
                        Ok(LpNorm::Infinity)
                    } else {
                        LpNorm::Finite(p).validate()
                    }
                }),
        }
    }
}

impl TryFrom<String> for LpNorm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LpNorm> for String {
    fn from(p: LpNorm) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationFamily {
    LpLoss,
    Fgsm,
    PowerSmoothness,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub family: PerturbationFamily,
    pub p: LpNorm,
    /// Budget `σ`.
    pub sigma: f64,
    /// Finite-difference probe scale `ξ` of the power method.
    pub xi: f64,
    pub n_iters: usize,
    pub seed: u64,
    /// Scale the final direction by `ξ` instead of `σ`.
    #[serde(default)]
    pub strict_xi_budget: bool,
}

impl PerturbationSpec {
    pub fn power(sigma: f64, xi: f64, n_iters: usize, seed: u64) -> Self {
        Self {
            family: PerturbationFamily::PowerSmoothness,
            p: LpNorm::Finite(2.0),
            sigma,
            xi,
            n_iters,
            seed,
            strict_xi_budget: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.p.validate()?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma {} must be >= 0",
                self.sigma
            )));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::InvalidConfig(format!("xi {} must be > 0", self.xi)));
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidConfig(
                "power iteration needs n_iters >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form maximizer of `gᵀε` over `‖ε‖_p ≤ σ`:
/// `ε = σ·sign(g)·(|g| / ‖g‖_{p*})^{1/(p−1)}` with `1/p + 1/p* = 1`.
///
/// `p = ∞` gives `σ·sign(g)` and `p = 2` gives `σ·g/‖g‖₂`. A zero gradient
/// yields the zero vector.
pub fn lp_worst(grad: &[f64], sigma: f64, p: LpNorm) -> Vec<f64> {
    let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if max == 0.0 || !max.is_finite() {
        return vec![0.0; grad.len()];
    }
    match p {
        LpNorm::Infinity => grad
            .iter()
            .map(|&g| {
                if g > 0.0 {
                    sigma
                } else if g < 0.0 {
                    -sigma
                } else {
                    0.0
                }
            })
            .collect(),
        LpNorm::Finite(p) if p == 2.0 => {
            let n = norm2(grad);
            grad.iter().map(|g| sigma * g / n).collect()
        }
        LpNorm::Finite(p) => {
            let dual = p / (p - 1.0);
            // Work with |g|/max to keep the powers in range.
            let scaled: Vec<f64> = grad.iter().map(|g| g.abs() / max).collect();
            let dual_norm = scaled
                .iter()
                .map(|a| a.powf(dual))
                .sum::<f64>()
                .powf(1.0 / dual);
            let expo = 1.0 / (p - 1.0);
            grad.iter()
                .zip(&scaled)
                .map(|(&g, &a)| {
                    sigma * g.signum() * (a / dual_norm).powf(expo) * f64::from(g != 0.0)
                })
                .collect()
        }
    }
}

/// Gradient oracle for a smoothness function `S(x, ε)` at fixed `x`.
pub trait Smoothness {
    fn dim(&self) -> usize;

    /// `∇_ε S(x, ε)`.
    fn grad_at(&self, eps: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a closure returning `∇_ε S` into a [`Smoothness`].
pub struct FnSmoothness<F> {
    dim: usize,
    grad: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FnSmoothness<F> {
    pub fn new(dim: usize, grad: F) -> Self {
        Self { dim, grad }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> Smoothness for FnSmoothness<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grad_at(&self, eps: &[f64]) -> Result<Vec<f64>> {
        Ok((self.grad)(eps))
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded random unit vector; depends only on `(seed, index)`.
pub fn initial_direction(dim: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

/// Power method on the Hessian of `S` at `ε = 0` using gradient probes:
/// `d ← normalize(∇_ε S(x, ε)|_{ε = ξd})`, `n_iters` times, from a seeded
/// random unit vector.
///
/// Returns [`Error::DegenerateDirection`] when a probe gradient has norm
/// below `1e-12`.
pub fn power_direction(
    smooth: &impl Smoothness,
    spec: &PerturbationSpec,
    sample_index: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut d = initial_direction(smooth.dim(), spec.seed, sample_index);
    for _ in 0..spec.n_iters {
        let probe: Vec<f64> = d.iter().map(|v| spec.xi * v).collect();
        let g = smooth.grad_at(&probe)?;
        if g.len() != d.len() {
            return Err(Error::ShapeMismatch(
                "smoothness gradient has the wrong length".into(),
            ));
        }
        let n = norm2(&g);
        if !(n >= DEGENERATE_GRAD_NORM) || !n.is_finite() {
            return Err(Error::DegenerateDirection);
        }
        d = g.iter().map(|v| v / n).collect();
    }
    Ok(d)
}

/// Smoothness of a network around a fixed input.
pub struct NetworkSmoothness<'a> {
    pub params: &'a NetworkParams,
    pub gmm: Option<&'a GmmState>,
    pub anchor: &'a ForwardTrace,
    pub objective: SmoothnessObjective,
    pub mkl_mode: MklMode,
}

impl Smoothness for NetworkSmoothness<'_> {
    fn dim(&self) -> usize {
        self.anchor.input.len()
    }

    fn grad_at(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<f64> = self
            .anchor
            .input
            .iter()
            .zip(eps)
            .map(|(a, b)| a + b)
            .collect();
        let pert = self.params.forward(&x)?;
        let out_dim = self.params.output_dim();
        let g_logits = if self.objective.uses_output() {
            output_kl_grads(self.anchor, &pert).1
        } else {
            vec![0.0; out_dim]
        };
        let g_latent = if self.objective.uses_latent() {
            let gmm = self.gmm.ok_or_else(|| {
                Error::InvalidConfig("latent smoothness requires a mixture".into())
            })?;
            Some(
                gmm.m_kl_grads(self.anchor.latent(), pert.latent(), self.mkl_mode)?
                    .1,
            )
        } else {
            None
        };
        let g = self.params.backprop(
            &pert,
            Upstream {
                logits: &g_logits,
                latent: g_latent.as_deref(),
            },
            None,
            true,
        )?;
        Ok(g.expect("input gradient requested"))
    }
}

/// `σ·d̂` with `d̂` the power-method direction of the selected smoothness
/// function (or `ξ·d̂` when `spec.strict_xi_budget` is set).
pub fn adversarial_perturbation(
    params: &NetworkParams,
    gmm: Option<&GmmState>,
    x: &[f64],
    objective: SmoothnessObjective,
    mkl_mode: MklMode,
    spec: &PerturbationSpec,
    sample_index: u64,
) -> Result<Vec<f64>> {
    let anchor = params.forward(x)?;
    adversarial_perturbation_at(
        params,
        gmm,
        &anchor,
        objective,
        mkl_mode,
        spec,
        sample_index,
    )
}

/// As [`adversarial_perturbation`] with a precomputed clean forward pass.
pub fn adversarial_perturbation_at(
    params: &NetworkParams,
    gmm: Option<&GmmState>,
    anchor: &ForwardTrace,
    objective: SmoothnessObjective,
    mkl_mode: MklMode,
    spec: &PerturbationSpec,
    sample_index: u64,
) -> Result<Vec<f64>> {
    let scale = if spec.strict_xi_budget {
        spec.xi
    } else {
        spec.sigma
    };
    if scale == 0.0 {
        return Ok(vec![0.0; anchor.input.len()]);
    }
    let smooth = NetworkSmoothness {
        params,
        gmm,
        anchor,
        objective,
        mkl_mode,
    };
    let d = power_direction(&smooth, spec, sample_index)?;
    Ok(d.into_iter().map(|v| scale * v).collect())
}

/// Forward-difference Hessian-vector product `(∇F(x + a·r) − ∇F(x)) / a`.
pub fn hvp_fd_oracle(grad: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], r: &[f64], a: f64) -> Vec<f64> {
    assert!(a > 0.0, "step must be positive");
    let shifted: Vec<f64> = x.iter().zip(r).map(|(xi, ri)| xi + a * ri).collect();
    let g1 = grad(&shifted);
    let g0 = grad(x);
    g1.iter().zip(&g0).map(|(p, q)| (p - q) / a).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dominant_eig_oracle, dot, Matrix};
    use rand::{Rng, SeedableRng};

    fn quadratic(h: &Matrix) -> FnSmoothness<impl Fn(&[f64]) -> Vec<f64> + '_> {
        FnSmoothness::new(h.rows(), move |e: &[f64]| h.matvec(e).unwrap())
    }

    #[test]
    fn fgsm_is_sign() {
        let e = lp_worst(&[0.3, -2.0, 0.01], 1.0, LpNorm::Infinity);
        assert_eq!(e, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn l2_is_normalized_gradient() {
        let e = lp_worst(&[3.0, 4.0], 1.0, LpNorm::Finite(2.0));
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l3_dual_exponent_formula() {
        // p = 3, p* = 1.5, exponent 1/(p-1) = 1/2.
        let g = [1.0, 8.0];
        let e = lp_worst(&g, 2.0, LpNorm::Finite(3.0));
        let dual = (1f64.powf(1.5) + 8f64.powf(1.5)).powf(1.0 / 1.5);
        let want = [2.0 * (1.0 / dual).sqrt(), 2.0 * (8.0 / dual).sqrt()];
        for (a, b) in e.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((LpNorm::Finite(3.0).norm(&e) - 2.0).abs() < 1e-10);
        assert!(e.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn zero_gradient_gives_zero_perturbation() {
        for p in [LpNorm::Infinity, LpNorm::Finite(2.0), LpNorm::Finite(1.5)] {
            assert_eq!(lp_worst(&[0.0; 4], 3.0, p), vec![0.0; 4]);
        }
    }

    #[test]
    fn lp_norm_parsing() {
        assert_eq!("inf".parse::<LpNorm>().unwrap(), LpNorm::Infinity);
        assert_eq!("2".parse::<LpNorm>().unwrap(), LpNorm::Finite(2.0));
        assert!("1".parse::<LpNorm>().is_err());
        assert!("0.5".parse::<LpNorm>().is_err());
    }

    #[test]
    fn power_direction_diagonal_quadratic() {
        let h = Matrix::from_diag(&[9.0, 1.0]);
        let spec = PerturbationSpec::power(1.0, 1e-3, 12, 42);
        let d = power_direction(&quadratic(&h), &spec, 0).unwrap();
        assert!((d[0].abs() - 1.0).abs() < 1e-8);
        assert!(d[1].abs() < 1e-8);
    }

    #[test]
    fn one_step_is_normalized_hessian_product() {
        let h = Matrix::from_rows(&[
            vec![3.0, 1.0, 0.0],
            vec![1.0, 2.0, 0.5],
            vec![0.0, 0.5, 1.0],
        ])
        .unwrap();
        let spec = PerturbationSpec::power(1.0, 1e-3, 1, 9);
        let d0 = initial_direction(3, 9, 4);
        let want = normalized(&h.matvec(&d0).unwrap()).unwrap();
        let got = power_direction(&quadratic(&h), &spec, 4).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn power_direction_matches_oracle_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 8;
        let b = Matrix::new(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut h = b.matmul(&b.transpose()).unwrap();
        h.add_ridge(0.1);
        let spec = PerturbationSpec::power(1.0, 1e-3, 50, 3);
        let d = power_direction(&quadratic(&h), &spec, 0).unwrap();
        let (_, v) = dominant_eig_oracle(&h).unwrap();
        assert!(dot(&d, &v).abs() >= 0.999);
    }

    #[test]
    fn power_error_decays_geometrically() {
        // Spectrum 4, 2, 1: error to e1 shrinks by at least |λ2/λ1| = 1/2 per step.
        let h = Matrix::from_diag(&[4.0, 2.0, 1.0]);
        let mut prev = f64::INFINITY;
        for n in 1..10 {
            let spec = PerturbationSpec::power(1.0, 1e-3, n, 5);
            let d = power_direction(&quadratic(&h), &spec, 0).unwrap();
            let err = (d[1] * d[1] + d[2] * d[2]).sqrt() / d[0].abs();
            if prev.is_finite() {
                assert!(
                    err <= 0.5 * prev * (1.0 + 1e-9),
                    "step {n}: {err} vs {prev}"
                );
            }
            prev = err;
        }
    }

    #[test]
    fn power_direction_degenerate_on_flat_function() {
        let zero = FnSmoothness::new(3, |_: &[f64]| vec![0.0; 3]);
        let spec = PerturbationSpec::power(1.0, 1e-3, 1, 0);
        assert_eq!(
            power_direction(&zero, &spec, 0),
            Err(Error::DegenerateDirection)
        );
    }

    #[test]
    fn seed_determinism() {
        let h = Matrix::from_diag(&[2.0, 1.5, 1.0]);
        let spec = PerturbationSpec::power(1.0, 1e-3, 1, 1234);
        let a = power_direction(&quadratic(&h), &spec, 7).unwrap();
        let b = power_direction(&quadratic(&h), &spec, 7).unwrap();
        assert_eq!(a, b);
        let c = power_direction(&quadratic(&h), &spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hvp_oracle_quadratic_exact_and_quartic_approximate() {
        let h = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let grad = |x: &[f64]| h.matvec(x).unwrap();
        for a in [1.0, 1e-3] {
            let hv = hvp_fd_oracle(grad, &[0.5, -1.0], &[1.0, 2.0], a);
            assert!((hv[0] - 4.0).abs() < 1e-9 && (hv[1] - 7.0).abs() < 1e-9);
        }
        // F = ‖x‖⁴, ∇F = 4‖x‖²x, Hessian at e1 is diag(12, 4).
        let grad4 = |x: &[f64]| {
            let s = dot(x, x);
            x.iter().map(|v| 4.0 * s * v).collect::<Vec<_>>()
        };
        let hv = hvp_fd_oracle(grad4, &[1.0, 0.0], &[1.0, 0.0], 1e-5);
        assert!((hv[0] - 12.0).abs() < 24.0 * 1e-5 * 1.01);
        assert!(hv[1].abs() < 1e-12);
        assert_eq!(
            hvp_fd_oracle(grad4, &[1.0, 0.0], &[0.0, 0.0], 1e-5),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn spec_validation() {
        let mut s = PerturbationSpec::power(1.0, 1e-6, 1, 0);
        assert!(s.validate().is_ok());
        s.xi = 0.0;
        assert!(s.validate().is_err());
        s.xi = 1e-6;
        s.n_iters = 0;
        assert!(s.validate().is_err());
    }
}
