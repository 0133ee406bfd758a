//! Formula-level math of the Robit model with a Cauchy scale-mixture prior.
//!
//! The likelihood link is the CDF of a scaled Student-t distribution
//! `T(alpha, omega)` (degrees of freedom `alpha`, scale `sqrt(omega)`). The
//! prior on each coefficient is the same family, written as a normal with an
//! Inverse-Gamma distributed variance `lambda_j`, which makes `lambda_j | beta_j`
//! conjugate.
//!
//! [`CondPosterior`] evaluates the negative log conditional posterior of the
//! coefficients selected for an HMC update, with the contribution of the frozen
//! coefficients supplied as a cached partial linear predictor.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{FbrhtError, Result};

/// Parameters of a scaled Student-t distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TParams {
    alpha: f64,
    omega: f64,
}

impl TParams {
    pub fn new(alpha: f64, omega: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(FbrhtError::Parameter(format!(
                "degrees of freedom must be positive and finite, got {alpha}"
            )));
        }
        if !(omega.is_finite() && omega > 0.0) {
            return Err(FbrhtError::Parameter(format!(
                "squared scale must be positive and finite, got {omega}"
            )));
        }
        Ok(Self { alpha, omega })
    }

    /// Robit likelihood default: `alpha0 = 1`, `omega0 = 0.5`.
    pub fn likelihood_default() -> Self {
        Self { alpha: 1.0, omega: 0.5 }
    }

    /// Coefficient prior default: Cauchy with scale `e^-5` (`omega1 = e^-10`).
    pub fn prior_default() -> Self {
        Self { alpha: 1.0, omega: (-10.0f64).exp() }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn scale(&self) -> f64 {
        self.omega.sqrt()
    }
}

/// Lower tail `P(T <= t)` of a standard (unit scale) t variable, for `t <= 0`.
fn std_t_lower_tail(t: f64, alpha: f64) -> f64 {
    debug_assert!(!(t > 0.0));
    if alpha == 1.0 {
        // 1/2 + atan(t)/pi rewritten without cancellation for t << 0.
        return (1.0f64).atan2(-t) / PI;
    }
    if t == f64::NEG_INFINITY {
        return 0.0;
    }
    let x = alpha / (alpha + t * t);
    0.5 * beta_reg(alpha / 2.0, 0.5, x)
}

/// CDF of the scaled t distribution `T(alpha, omega)` at `x`.
///
/// Infinite arguments saturate to 0 or 1; NaN propagates.
pub fn student_t_cdf(x: f64, params: &TParams) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let t = x / params.scale();
    if t <= 0.0 {
        std_t_lower_tail(t, params.alpha)
    } else {
        1.0 - std_t_lower_tail(-t, params.alpha)
    }
}

/// `ln T(x)`, accurate in both tails.
pub fn student_t_log_cdf(x: f64, params: &TParams) -> f64 {
    let t = x / params.scale();
    if t <= 0.0 {
        std_t_lower_tail(t, params.alpha).ln()
    } else {
        (-std_t_lower_tail(-t, params.alpha)).ln_1p()
    }
}

/// Upper-tail quantile of `|X|` for `X ~ Cauchy(0, scale)`: the `q` with
/// `P(|X| > q) = upper_prob`.
pub fn cauchy_abs_upper_quantile(upper_prob: f64, scale: f64) -> Result<f64> {
    if !(upper_prob > 0.0 && upper_prob < 1.0) {
        return Err(FbrhtError::Parameter(format!(
            "upper probability must lie in (0, 1), got {upper_prob}"
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(FbrhtError::Parameter(format!("scale must be positive, got {scale}")));
    }
    // scale * tan(pi (1 - u) / 2) == scale / tan(pi u / 2), the latter exact for small u.
    Ok(scale / (PI * upper_prob / 2.0).tan())
}

/// The Robit link: a [`TParams`] with its log-density normalizer cached.
#[derive(Debug, Clone, Copy)]
pub struct RobitLink {
    params: TParams,
    log_norm: f64,
}

impl RobitLink {
    pub fn new(params: TParams) -> Self {
        let a = params.alpha;
        let log_norm = ln_gamma((a + 1.0) / 2.0)
            - ln_gamma(a / 2.0)
            - 0.5 * (a * PI).ln()
            - 0.5 * params.omega.ln();
        Self { params, log_norm }
    }

    pub fn params(&self) -> &TParams {
        &self.params
    }

    pub fn cdf(&self, x: f64) -> f64 {
        student_t_cdf(x, &self.params)
    }

    pub fn log_cdf(&self, x: f64) -> f64 {
        student_t_log_cdf(x, &self.params)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let a = self.params.alpha;
        self.log_norm - 0.5 * (a + 1.0) * (x * x / (a * self.params.omega)).ln_1p()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    /// `log P(y | eta)`.
    pub fn log_prob(&self, y: u8, eta: f64) -> f64 {
        if y == 1 {
            self.log_cdf(eta)
        } else {
            self.log_cdf(-eta)
        }
    }

    /// Derivative of `-log P(y | eta)` with respect to `eta`.
    ///
    /// Equals `t(eta) / (1 - y - T(eta))`; the ratio is formed in log space so
    /// it stays finite far in the tails.
    pub fn neg_log_prob_deriv(&self, y: u8, eta: f64) -> f64 {
        let lp = self.log_pdf(eta);
        if y == 1 {
            -(lp - self.log_cdf(eta)).exp()
        } else {
            (lp - self.log_cdf(-eta)).exp()
        }
    }
}

/// `y log T(eta) + (1 - y) log T(-eta)`.
pub fn log_robit_prob(y: u8, eta: f64, like: &TParams) -> f64 {
    if y == 1 {
        student_t_log_cdf(eta, like)
    } else {
        student_t_log_cdf(-eta, like)
    }
}

/// Coefficients and their latent prior variances; index 0 is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefState {
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl CoefState {
    pub fn new(beta: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        if beta.len() != lambda.len() {
            return Err(FbrhtError::Shape(format!(
                "beta has {} entries but lambda has {}",
                beta.len(),
                lambda.len()
            )));
        }
        if let Some(bad) = lambda.iter().find(|l| !(**l > 0.0)) {
            return Err(FbrhtError::Parameter(format!("prior variance must be positive, got {bad}")));
        }
        Ok(Self { beta, lambda })
    }
}

/// Draw `lambda_j | beta_j ~ Inverse-Gamma((a1 + 1)/2, (a1 w1 + beta_j^2)/2)`.
pub fn sample_lambda_given_beta<R: Rng + ?Sized>(beta_j: f64, prior: &TParams, rng: &mut R) -> f64 {
    let shape = (prior.alpha + 1.0) / 2.0;
    let rate = (prior.alpha * prior.omega + beta_j * beta_j) / 2.0;
    let gamma = Gamma::new(shape, 1.0 / rate).expect("shape and rate are positive");
    1.0 / gamma.sample(rng)
}

/// Design matrix with a leading column of ones, stored column-major.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn with_intercept(x: &nalgebra::DMatrix<f64>) -> Self {
        let n = x.nrows();
        let mut data = Vec::with_capacity(n * (x.ncols() + 1));
        data.extend(std::iter::repeat_n(1.0, n));
        // DMatrix is column-major already.
        data.extend_from_slice(x.as_slice());
        Self { n, cols: x.ncols() + 1, data }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    /// Number of columns including the intercept.
    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    /// `X beta` over all columns.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                axpy(b, self.col(j), &mut eta);
            }
        }
        eta
    }
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Negative log conditional posterior of `beta_U` given `beta_F` and `lambda`,
/// with additive constants dropped.
///
/// `fixed_eta` holds `X_F beta_F`, computed once per Gibbs iteration.
pub struct CondPosterior<'a> {
    design: &'a Design,
    labels: &'a [u8],
    link: &'a RobitLink,
    lambda: &'a [f64],
    update: &'a [usize],
    fixed_eta: &'a [f64],
}

impl<'a> CondPosterior<'a> {
    pub fn new(
        design: &'a Design,
        labels: &'a [u8],
        link: &'a RobitLink,
        lambda: &'a [f64],
        update: &'a [usize],
        fixed_eta: &'a [f64],
    ) -> Result<Self> {
        let n = design.nrows();
        if labels.len() != n || fixed_eta.len() != n {
            return Err(FbrhtError::Shape(format!(
                "design has {n} rows, labels {}, cached predictor {}",
                labels.len(),
                fixed_eta.len()
            )));
        }
        if lambda.len() != design.ncols() {
            return Err(FbrhtError::Shape(format!(
                "lambda has {} entries for {} coefficients",
                lambda.len(),
                design.ncols()
            )));
        }
        if let Some(&j) = update.iter().find(|&&j| j >= design.ncols()) {
            return Err(FbrhtError::Shape(format!("update index {j} out of range")));
        }
        Ok(Self { design, labels, link, lambda, update, fixed_eta })
    }

    pub fn dim(&self) -> usize {
        self.update.len()
    }

    pub fn update_set(&self) -> &[usize] {
        self.update
    }

    /// Full linear predictor `X_F beta_F + X_U beta_U`.
    pub fn eta(&self, beta_u: &[f64]) -> Vec<f64> {
        let mut eta = self.fixed_eta.to_vec();
        for (&j, &b) in self.update.iter().zip(beta_u) {
            axpy(b, self.design.col(j), &mut eta);
        }
        eta
    }

    fn prior_energy(&self, beta_u: &[f64]) -> f64 {
        self.update
            .iter()
            .zip(beta_u)
            .map(|(&j, &b)| {
                let l = self.lambda[j];
                b * b / (2.0 * l) + 0.5 * l.ln()
            })
            .sum()
    }

    /// Potential energy from a precomputed linear predictor.
    pub fn energy_from_eta(&self, beta_u: &[f64], eta: &[f64]) -> f64 {
        let nll: f64 = self
            .labels
            .iter()
            .zip(eta)
            .map(|(&y, &e)| -self.link.log_prob(y, e))
            .sum();
        nll + self.prior_energy(beta_u)
    }

    pub fn energy(&self, beta_u: &[f64]) -> Result<f64> {
        self.check_len(beta_u)?;
        Ok(self.energy_from_eta(beta_u, &self.eta(beta_u)))
    }

    /// Gradient from a precomputed linear predictor, written into `grad`.
    pub fn gradient_from_eta(&self, beta_u: &[f64], eta: &[f64], grad: &mut [f64]) {
        let d: Vec<f64> = self
            .labels
            .iter()
            .zip(eta)
            .map(|(&y, &e)| self.link.neg_log_prob_deriv(y, e))
            .collect();
        for ((g, &j), &b) in grad.iter_mut().zip(self.update).zip(beta_u) {
            *g = dot(&d, self.design.col(j)) + b / self.lambda[j];
        }
    }

    pub fn gradient(&self, beta_u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(beta_u)?;
        let mut grad = vec![0.0; beta_u.len()];
        self.gradient_from_eta(beta_u, &self.eta(beta_u), &mut grad);
        Ok(grad)
    }

    fn check_len(&self, beta_u: &[f64]) -> Result<()> {
        if beta_u.len() != self.update.len() {
            return Err(FbrhtError::Shape(format!(
                "beta_U has {} entries, update set has {}",
                beta_u.len(),
                self.update.len()
            )));
        }
        Ok(())
    }
}
