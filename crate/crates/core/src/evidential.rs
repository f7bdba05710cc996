//! Normal-Inverse-Gamma (NIG) evidential regression.
//!
//! A prediction is four numbers `(λ, ν, α, β)`: `μ ~ N(λ, σ²/ν)` and
//! `σ² ~ Γ⁻¹(α, β)`. Marginalising `(μ, σ²)` gives a location-scale Student-t
//! with location `λ`, squared scale `β(1+ν)/(να)` and `2α` degrees of freedom,
//! whose variance splits into data (aleatoric) and knowledge (epistemic) parts:
//!
//! ```text
//! Var(x) = E[σ²] + Var[μ] = β/(α−1) + β/(ν(α−1))
//! ```
//!
//! The scalar functions here are the reference implementations; the `*_graph`
//! variants build the same losses elementwise on a [`Graph`] for training.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::special::{lgamma, softplus};
use crate::tensor::{Graph, TensorError, Var};

/// `√2 · erf⁻¹(1/2)`: the ratio between the mean absolute deviation and the
/// median absolute deviation scale of a Gaussian (its 75th percentile in σ units).
pub const MAD_CONSTANT: f64 = 0.674_489_750_196_081_7;

/// Floor added by [`positivity_transform`].
pub const PARAM_FLOOR: f64 = 1e-6;

/// Default weight of the ratio regulariser in the total loss.
pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidentialError {
    #[error("invalid NIG parameters: {0}")]
    InvalidParams(String),
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvidentialError>;

/// Evidential parameters of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    /// Predicted mean.
    pub lambda: f64,
    /// Virtual observation count of the mean.
    pub nu: f64,
    /// Shape of the inverse-gamma; strictly above one so variances are finite.
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(lambda: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            lambda,
            nu,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda, self.nu, self.alpha, self.beta].iter().all(|v| v.is_finite());
        if !finite {
            return Err(EvidentialError::InvalidParams(format!("non-finite value in {self:?}")));
        }
        if self.nu <= 0.0 {
            return Err(EvidentialError::InvalidParams(format!("nu must be > 0, got {}", self.nu)));
        }
        if self.alpha <= 1.0 {
            return Err(EvidentialError::InvalidParams(format!(
                "alpha must be > 1 for finite variance, got {}",
                self.alpha
            )));
        }
        if self.beta <= 0.0 {
            return Err(EvidentialError::InvalidParams(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Squared scale of the marginal Student-t.
    pub fn student_scale2(&self) -> f64 {
        self.beta * (1.0 + self.nu) / (self.nu * self.alpha)
    }
}

/// Variance split of one prediction, in squared prediction units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBreakdown {
    pub data_var: f64,
    pub knowledge_var: f64,
    pub total_var: f64,
}

/// Log of the NIG joint density at `(mu, sigma2)`.
pub fn nig_log_density(mu: f64, sigma2: f64, p: &NigParams) -> Result<f64> {
    p.validate()?;
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(EvidentialError::NonPositiveVariance(sigma2));
    }
    let d = p.lambda - mu;
    Ok(p.alpha * p.beta.ln() + 0.5 * p.nu.ln()
        - lgamma(p.alpha)
        - 0.5 * (2.0 * PI * sigma2).ln()
        - (p.alpha + 1.0) * sigma2.ln()
        - (2.0 * p.beta + p.nu * d * d) / (2.0 * sigma2))
}

/// Log pdf of the marginal Student-t `St(x; λ, β(1+ν)/(να), 2α)`.
pub fn student_t_log_pdf(x: f64, p: &NigParams) -> Result<f64> {
    p.validate()?;
    let dof = 2.0 * p.alpha;
    let scale2 = p.student_scale2();
    let z2 = (x - p.lambda).powi(2) / (dof * scale2);
    Ok(lgamma(0.5 * (dof + 1.0)) - lgamma(0.5 * dof) - 0.5 * (dof * PI * scale2).ln() - 0.5 * (dof + 1.0) * z2.ln_1p())
}

/// Splits the Student-t variance into data and knowledge terms.
pub fn decompose(p: &NigParams) -> Result<UncertaintyBreakdown> {
    p.validate()?;
    let data_var = p.beta / (p.alpha - 1.0);
    let knowledge_var = data_var / p.nu;
    Ok(UncertaintyBreakdown {
        data_var,
        knowledge_var,
        total_var: data_var + knowledge_var,
    })
}

/// Student-t negative log-likelihood of an observation.
pub fn nll_loss(x_obs: f64, p: &NigParams) -> Result<f64> {
    p.validate()?;
    let omega = 2.0 * p.beta * (1.0 + p.nu);
    let r = x_obs - p.lambda;
    Ok(0.5 * (PI / p.nu).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * (r * r * p.nu + omega).ln()
        + lgamma(p.alpha)
        - lgamma(p.alpha + 0.5))
}

/// Ratio of the observed absolute error to the Gaussian MAD implied by the
/// predicted data variance, minus one, weighted by the total evidence `ν + α`.
pub fn ratio_regularizer(x_obs: f64, p: &NigParams) -> Result<f64> {
    p.validate()?;
    let est = MAD_CONSTANT * (p.beta / (p.alpha - 1.0)).sqrt();
    Ok(((x_obs - p.lambda).abs() / est - 1.0) * (p.nu + p.alpha))
}

/// `nll + ε · ratio_regularizer`.
pub fn total_loss(x_obs: f64, p: &NigParams, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(EvidentialError::InvalidParams(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let nll = nll_loss(x_obs, p)?;
    if epsilon == 0.0 {
        return Ok(nll);
    }
    Ok(nll + epsilon * ratio_regularizer(x_obs, p)?)
}

/// Maps three unconstrained reals to valid `(ν, α, β)`.
pub fn positivity_transform(raw: [f64; 3]) -> (f64, f64, f64) {
    (
        softplus(raw[0]) + PARAM_FLOOR,
        1.0 + softplus(raw[1]) + PARAM_FLOOR,
        softplus(raw[2]) + PARAM_FLOOR,
    )
}

/// Graph handles to elementwise NIG parameters of equal shape.
#[derive(Debug, Clone, Copy)]
pub struct NigVars {
    pub lambda: Var,
    pub nu: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// How the regulariser's bracket is treated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerMode {
    /// Use the bracket as is; it goes negative when the observed error is
    /// below the estimated one.
    #[default]
    Plain,
    /// Clip the bracket at zero so only under-estimated errors are penalised.
    NonNegative,
}

/// Differentiable positivity transform on a raw `[..., 3]`-split triple.
pub fn positivity_transform_graph(g: &mut Graph, raw_nu: Var, raw_alpha: Var, raw_beta: Var) -> Result<(Var, Var, Var)> {
    let nu = g.softplus(raw_nu)?;
    let nu = g.add_scalar(nu, PARAM_FLOOR)?;
    let alpha = g.softplus(raw_alpha)?;
    let alpha = g.add_scalar(alpha, 1.0 + PARAM_FLOOR)?;
    let beta = g.softplus(raw_beta)?;
    let beta = g.add_scalar(beta, PARAM_FLOOR)?;
    Ok((nu, alpha, beta))
}

/// Elementwise Student-t NLL on the graph.
pub fn nll_loss_graph(g: &mut Graph, x_obs: Var, p: NigVars) -> Result<Var> {
    // ½ log(π/ν)
    let log_nu = g.log(p.nu)?;
    let t1 = g.scale(log_nu, -0.5)?;
    let t1 = g.add_scalar(t1, 0.5 * PI.ln())?;
    // Ω = 2β(1+ν)
    let one_plus_nu = g.add_scalar(p.nu, 1.0)?;
    let omega = g.mul(p.beta, one_plus_nu)?;
    let omega = g.scale(omega, 2.0)?;
    let log_omega = g.log(omega)?;
    let t2 = g.mul(p.alpha, log_omega)?;
    // (α+½) log((x−λ)²ν + Ω)
    let r = g.sub(x_obs, p.lambda)?;
    let r2 = g.square(r)?;
    let r2nu = g.mul(r2, p.nu)?;
    let inner = g.add(r2nu, omega)?;
    let log_inner = g.log(inner)?;
    let a_half = g.add_scalar(p.alpha, 0.5)?;
    let t3 = g.mul(a_half, log_inner)?;
    // log Γ(α) − log Γ(α+½)
    let lg_a = g.lgamma(p.alpha)?;
    let lg_ah = g.lgamma(a_half)?;
    let t4 = g.sub(lg_a, lg_ah)?;

    let s = g.sub(t1, t2)?;
    let s = g.add(s, t3)?;
    Ok(g.add(s, t4)?)
}

/// Elementwise ratio regulariser on the graph.
pub fn ratio_regularizer_graph(g: &mut Graph, x_obs: Var, p: NigVars, mode: RegularizerMode) -> Result<Var> {
    let r = g.sub(x_obs, p.lambda)?;
    let abs_err = g.abs(r)?;
    let a_minus_1 = g.add_scalar(p.alpha, -1.0)?;
    let var = g.div(p.beta, a_minus_1)?;
    let std = g.sqrt(var)?;
    let est = g.scale(std, MAD_CONSTANT)?;
    let ratio = g.div(abs_err, est)?;
    let mut bracket = g.add_scalar(ratio, -1.0)?;
    if mode == RegularizerMode::NonNegative {
        bracket = g.clamp(bracket, 0.0, f64::INFINITY)?;
    }
    let evidence = g.add(p.nu, p.alpha)?;
    Ok(g.mul(bracket, evidence)?)
}

/// Elementwise `nll + ε · regulariser` on the graph.
pub fn total_loss_graph(g: &mut Graph, x_obs: Var, p: NigVars, epsilon: f64, mode: RegularizerMode) -> Result<Var> {
    let nll = nll_loss_graph(g, x_obs, p)?;
    if epsilon == 0.0 {
        return Ok(nll);
    }
    let reg = ratio_regularizer_graph(g, x_obs, p, mode)?;
    let reg = g.scale(reg, epsilon)?;
    Ok(g.add(nll, reg)?)
}
