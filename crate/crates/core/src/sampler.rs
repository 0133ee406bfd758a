//! Restricted Gibbs sampling with Hamiltonian Monte Carlo updates.
//!
//! One Gibbs iteration:
//!
//! 1. redraw every feature's prior variance `lambda_j | beta_j`;
//! 2. pick the update set `U`: the intercept plus the `ceil(fraction * p)`
//!    features with the largest fresh `lambda_j`;
//! 3. run one HMC transition on `beta_U` with `beta_F` frozen, reusing the
//!    cached partial predictor `X_F beta_F`;
//! 4. commit.
//!
//! [`run_two_stage`] screens features with a first chain over all columns and
//! reruns the sampler on the `p_star` features with the largest absolute
//! posterior means.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::Dataset;
use crate::error::{FbrhtError, Result};
use crate::math::{axpy, sample_lambda_given_beta, CoefState, CondPosterior, Design, RobitLink, TParams};

/// Fixed hyperparameters of the Robit model and its coefficient prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub likelihood: TParams,
    pub prior: TParams,
    /// Prior variance of the intercept; never resampled.
    pub intercept_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            likelihood: TParams::likelihood_default(),
            prior: TParams::prior_default(),
            intercept_variance: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Common step-size adjustment factor.
    pub epsilon_adjust: f64,
    /// Leapfrog steps per trajectory during burn-in.
    pub l_burnin: usize,
    /// Leapfrog steps per trajectory during sampling.
    pub l_sampling: usize,
    /// Fraction of feature coefficients updated per iteration.
    pub update_fraction: f64,
    pub n_burnin_iters: usize,
    pub n_sampling_iters: usize,
    pub thin: usize,
    /// Features kept after stage 1.
    pub p_star: usize,
    pub seed: u64,
    /// Recompute `X_F beta_F` from scratch every iteration instead of
    /// downdating the cached predictor.
    pub full_recompute: bool,
    pub step_rule: StepRule,
}

/// How leapfrog step sizes are derived from the curvature of the energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// `(sum_i x_ij^2 + 1) / lambda_j`, see [`hmc_step_sizes`].
    Printed,
    /// `kappa * sum_i x_ij^2 + 1 / lambda_j` with `kappa` the likelihood
    /// curvature at `eta = 0`, see [`hmc_step_sizes_curvature`].
    Curvature,
}

impl std::str::FromStr for StepRule {
    type Err = FbrhtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(StepRule::Printed),
            "curvature" => Ok(StepRule::Curvature),
            _ => Err(FbrhtError::Parameter(format!("unknown step rule `{s}` (printed, curvature)"))),
        }
    }
}

impl StepRule {
    pub fn name(self) -> &'static str {
        match self {
            StepRule::Printed => "printed",
            StepRule::Curvature => "curvature",
        }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            epsilon_adjust: 0.5,
            l_burnin: 10,
            l_sampling: 50,
            update_fraction: 0.1,
            n_burnin_iters: 2_000,
            n_sampling_iters: 12_000,
            thin: 10,
            p_star: 100,
            seed: 1,
            full_recompute: false,
            step_rule: StepRule::Curvature,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FbrhtError::Parameter(msg));
        if !(self.epsilon_adjust.is_finite() && self.epsilon_adjust > 0.0) {
            return bad(format!("epsilon_adjust must be positive, got {}", self.epsilon_adjust));
        }
        if !(self.update_fraction > 0.0 && self.update_fraction <= 1.0) {
            return bad(format!("update_fraction must lie in (0, 1], got {}", self.update_fraction));
        }
        if self.thin == 0 {
            return bad("thin must be positive".into());
        }
        if self.n_sampling_iters < self.thin {
            return bad(format!(
                "{} sampling iterations keep no draw with thin {}",
                self.n_sampling_iters, self.thin
            ));
        }
        if self.p_star == 0 {
            return bad("p_star must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Burnin,
    Sampling,
}

impl Phase {
    pub fn leapfrog_steps(self, config: &SamplerConfig) -> usize {
        match self {
            Phase::Burnin => config.l_burnin,
            Phase::Sampling => config.l_sampling,
        }
    }
}

/// Current coefficients with the full linear predictor `X beta` cached.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub coef: CoefState,
    pub cached_eta: Vec<f64>,
    pub iteration: usize,
}

/// Retained draws: one column per kept iteration, one row per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    pub draws: DMatrix<f64>,
    /// Intercept draw for each retained column.
    pub intercepts: Vec<f64>,
    /// 1-based feature ID of each row.
    pub feature_ids: Vec<usize>,
    /// Acceptance rate over the sampling phase.
    pub accept_rate: f64,
}

impl SampleMatrix {
    pub fn p(&self) -> usize {
        self.draws.nrows()
    }

    pub fn iterations_kept(&self) -> usize {
        self.draws.ncols()
    }

    pub fn posterior_means(&self) -> Vec<f64> {
        let r = self.iterations_kept() as f64;
        self.draws.row_iter().map(|row| row.sum() / r).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcOutcome {
    pub accepted: bool,
    /// `H(end) - H(start)`; infinite for a diverged trajectory.
    pub delta_h: f64,
}

/// Indices to update: the intercept (0) plus the `ceil(fraction * p)` features
/// with the largest prior variance, as 1-based coefficient indices.
///
/// `lambda_hat` holds the feature variances only. Equivalent to thresholding at
/// the empirical `(1 - fraction)` quantile, with ties at the threshold going
/// to lower indices.
pub fn select_update_set(lambda_hat: &[f64], fraction: f64) -> Result<Vec<usize>> {
    let p = lambda_hat.len();
    if p == 0 {
        return Err(FbrhtError::Shape("no feature variances to threshold".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FbrhtError::Parameter(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    // Guard against 0.1 * 30 = 3.0000000000000004 rounding up.
    let k = ((fraction * p as f64 - 1e-9).ceil() as usize).clamp(1, p);
    let mut order: Vec<usize> = (0..p).collect();
    if k < p {
        order.select_nth_unstable_by(k - 1, |&a, &b| lambda_hat[b].total_cmp(&lambda_hat[a]).then(a.cmp(&b)));
        order.truncate(k);
    }
    let mut set: Vec<usize> = Vec::with_capacity(k + 1);
    set.push(0);
    set.extend(order.into_iter().map(|j| j + 1));
    set.sort_unstable();
    Ok(set)
}

/// Per-coordinate leapfrog step sizes
/// `eps * (sum_i x_ij^2 / lambda_j + 1 / lambda_j)^(-1/2)`.
pub fn hmc_step_sizes(lambda_hat_u: &[f64], columns_u: &[&[f64]], epsilon_adjust: f64) -> Vec<f64> {
    lambda_hat_u
        .iter()
        .zip(columns_u)
        .map(|(&l, col)| {
            let ss: f64 = col.iter().map(|v| v * v).sum();
            epsilon_adjust / ((ss / l) + 1.0 / l).sqrt()
        })
        .collect()
}

/// Step sizes `eps * (kappa * sum_i x_ij^2 + 1 / lambda_j)^(-1/2)`: the
/// likelihood term uses a fixed per-case curvature `kappa` instead of the
/// prior variance.
pub fn hmc_step_sizes_curvature(
    lambda_hat_u: &[f64],
    columns_u: &[&[f64]],
    epsilon_adjust: f64,
    kappa: f64,
) -> Vec<f64> {
    lambda_hat_u
        .iter()
        .zip(columns_u)
        .map(|(&l, col)| {
            let ss: f64 = col.iter().map(|v| v * v).sum();
            epsilon_adjust / (kappa * ss + 1.0 / l).sqrt()
        })
        .collect()
}

/// Result of one HMC transition on `beta_U`.
#[derive(Debug, Clone)]
pub struct HmcProposal {
    pub beta_u: Vec<f64>,
    /// Full linear predictor at `beta_u`.
    pub eta: Vec<f64>,
    pub outcome: HmcOutcome,
}

/// One HMC transition with independent standard-normal momenta, `n_steps`
/// leapfrog steps with per-coordinate step sizes, and a Metropolis test on
/// `H = U + |p|^2 / 2`. A non-finite energy or gradient anywhere on the
/// trajectory counts as a rejection.
pub fn hmc_transition<R: Rng + ?Sized>(
    target: &CondPosterior<'_>,
    current: &[f64],
    step_sizes: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> HmcProposal {
    let d = current.len();
    let mut q = current.to_vec();
    let mut mom: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let eta0 = target.eta(&q);
    let u0 = target.energy_from_eta(&q, &eta0);
    let h0 = u0 + 0.5 * mom.iter().map(|m| m * m).sum::<f64>();

    let mut grad = vec![0.0; d];
    let mut eta = eta0.clone();
    target.gradient_from_eta(&q, &eta, &mut grad);
    let mut diverged = !grad.iter().all(|g| g.is_finite());
    for _ in 0..n_steps {
        if diverged {
            break;
        }
        for k in 0..d {
            mom[k] -= 0.5 * step_sizes[k] * grad[k];
            q[k] += step_sizes[k] * mom[k];
        }
        eta = target.eta(&q);
        target.gradient_from_eta(&q, &eta, &mut grad);
        for k in 0..d {
            mom[k] -= 0.5 * step_sizes[k] * grad[k];
        }
        diverged = !grad.iter().all(|g| g.is_finite());
    }
    let h1 = if diverged {
        f64::INFINITY
    } else {
        target.energy_from_eta(&q, &eta) + 0.5 * mom.iter().map(|m| m * m).sum::<f64>()
    };
    let delta_h = h1 - h0;
    let u: f64 = rng.random();
    let accepted = delta_h.is_finite() && u.ln() < -delta_h;
    if accepted {
        HmcProposal { beta_u: q, eta, outcome: HmcOutcome { accepted, delta_h } }
    } else {
        HmcProposal { beta_u: current.to_vec(), eta: eta0, outcome: HmcOutcome { accepted, delta_h } }
    }
}

/// Full cached-predictor refresh interval, in iterations.
const REFRESH_EVERY: usize = 500;

/// A dataset prepared for sampling: design with intercept column, labels and
/// the model's link.
pub struct Chain<'a> {
    design: Design,
    labels: &'a [u8],
    link: RobitLink,
    model: ModelConfig,
    /// `-(d^2/d eta^2) log T(eta)` at zero, i.e. `(pdf(0) / cdf(0))^2`.
    kappa: f64,
}

impl<'a> Chain<'a> {
    pub fn new(data: &'a Dataset, model: ModelConfig) -> Result<Self> {
        if data.n() < 2 {
            return Err(FbrhtError::Data(format!("need at least 2 cases, got {}", data.n())));
        }
        let pos = data.n_positive();
        if pos == 0 || pos == data.n() {
            return Err(FbrhtError::Data("labels contain a single class".into()));
        }
        if data.p() == 0 {
            return Err(FbrhtError::Data("dataset has no features".into()));
        }
        if !(model.intercept_variance > 0.0) {
            return Err(FbrhtError::Parameter("intercept variance must be positive".into()));
        }
        let link = RobitLink::new(model.likelihood);
        let kappa = (2.0 * link.pdf(0.0)).powi(2);
        Ok(Self { design: Design::with_intercept(&data.x), labels: &data.y, link, model, kappa })
    }

    pub fn p(&self) -> usize {
        self.design.ncols() - 1
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// All coefficients at zero.
    pub fn initial_state(&self) -> SamplerState {
        let p = self.p();
        let mut lambda = vec![self.model.prior.omega(); p + 1];
        lambda[0] = self.model.intercept_variance;
        SamplerState {
            coef: CoefState { beta: vec![0.0; p + 1], lambda },
            cached_eta: vec![0.0; self.design.nrows()],
            iteration: 0,
        }
    }

    fn fixed_eta(&self, state: &SamplerState, update: &[usize], full_recompute: bool) -> Vec<f64> {
        if full_recompute {
            let mut b = state.coef.beta.clone();
            for &j in update {
                b[j] = 0.0;
            }
            self.design.linear_predictor(&b)
        } else {
            let mut eta = state.cached_eta.clone();
            for &j in update {
                let b = state.coef.beta[j];
                if b != 0.0 {
                    axpy(-b, self.design.col(j), &mut eta);
                }
            }
            eta
        }
    }

    /// HMC update of `beta_U` with `lambda_hat` already in `state`.
    pub fn hmc_update<R: Rng + ?Sized>(
        &self,
        state: &mut SamplerState,
        update: &[usize],
        config: &SamplerConfig,
        phase: Phase,
        rng: &mut R,
    ) -> Result<HmcOutcome> {
        let fixed = self.fixed_eta(state, update, config.full_recompute);
        let target = CondPosterior::new(&self.design, self.labels, &self.link, &state.coef.lambda, update, &fixed)?;
        let lambda_u: Vec<f64> = update.iter().map(|&j| state.coef.lambda[j]).collect();
        let cols: Vec<&[f64]> = update.iter().map(|&j| self.design.col(j)).collect();
        let steps = match config.step_rule {
            StepRule::Printed => hmc_step_sizes(&lambda_u, &cols, config.epsilon_adjust),
            StepRule::Curvature => hmc_step_sizes_curvature(&lambda_u, &cols, config.epsilon_adjust, self.kappa),
        };
        let current: Vec<f64> = update.iter().map(|&j| state.coef.beta[j]).collect();
        let proposal = hmc_transition(&target, &current, &steps, phase.leapfrog_steps(config), rng);
        if proposal.outcome.accepted {
            for (&j, &b) in update.iter().zip(&proposal.beta_u) {
                state.coef.beta[j] = b;
            }
            state.cached_eta = proposal.eta;
        }
        Ok(proposal.outcome)
    }

    /// One full restricted Gibbs iteration.
    pub fn gibbs_iteration<R: Rng + ?Sized>(
        &self,
        state: &mut SamplerState,
        config: &SamplerConfig,
        phase: Phase,
        rng: &mut R,
    ) -> Result<HmcOutcome> {
        let p = self.p();
        for j in 1..=p {
            state.coef.lambda[j] = sample_lambda_given_beta(state.coef.beta[j], &self.model.prior, rng);
        }
        state.coef.lambda[0] = self.model.intercept_variance;
        let update = select_update_set(&state.coef.lambda[1..], config.update_fraction)?;
        let outcome = self.hmc_update(state, &update, config, phase, rng)?;
        state.iteration += 1;
        if state.iteration % REFRESH_EVERY == 0 {
            state.cached_eta = self.design.linear_predictor(&state.coef.beta);
        }
        Ok(outcome)
    }

    /// Burn-in then sampling from `state`, keeping every `thin`-th draw.
    pub fn run_from<R: Rng + ?Sized>(
        &self,
        state: &mut SamplerState,
        config: &SamplerConfig,
        rng: &mut R,
    ) -> Result<SampleMatrix> {
        config.validate()?;
        for _ in 0..config.n_burnin_iters {
            self.gibbs_iteration(state, config, Phase::Burnin, rng)?;
        }
        let p = self.p();
        let kept = config.n_sampling_iters / config.thin;
        let mut draws = DMatrix::zeros(p, kept);
        let mut intercepts = Vec::with_capacity(kept);
        let mut accepted = 0usize;
        for it in 0..config.n_sampling_iters {
            if self.gibbs_iteration(state, config, Phase::Sampling, rng)?.accepted {
                accepted += 1;
            }
            if (it + 1) % config.thin == 0 {
                let c = intercepts.len();
                draws.column_mut(c).copy_from_slice(&state.coef.beta[1..]);
                intercepts.push(state.coef.beta[0]);
            }
        }
        Ok(SampleMatrix {
            draws,
            intercepts,
            feature_ids: (1..=p).collect(),
            accept_rate: accepted as f64 / config.n_sampling_iters as f64,
        })
    }
}

/// Run a single chain from all-zero coefficients.
pub fn run_chain<R: Rng + ?Sized>(
    data: &Dataset,
    model: &ModelConfig,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleMatrix> {
    config.validate()?;
    let chain = Chain::new(data, *model)?;
    let mut state = chain.initial_state();
    chain.run_from(&mut state, config, rng)
}

#[derive(Debug, Clone)]
pub struct TwoStageResult {
    /// Stage-1 posterior means, one per original feature; `None` when stage 1
    /// was skipped.
    pub stage1_means: Option<Vec<f64>>,
    /// 1-based original feature IDs kept for stage 2, ascending.
    pub selected: Vec<usize>,
    /// Stage-2 draws; `feature_ids` refer to the original dataset.
    pub stage2: SampleMatrix,
}

/// The `k` features with the largest `|mean|`, as ascending 1-based IDs.
pub fn top_by_abs_mean(means: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].abs().total_cmp(&means[a].abs()).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).map(|j| j + 1).collect();
    top.sort_unstable();
    top
}

/// Stage 1 over all features, keep the top `p_star` by absolute posterior
/// mean, stage 2 on the reduced data. Stage 1 is skipped when `p <= p_star`.
pub fn run_two_stage<R: Rng + ?Sized>(
    data: &Dataset,
    model: &ModelConfig,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<TwoStageResult> {
    config.validate()?;
    if data.p() <= config.p_star {
        let stage2 = run_chain(data, model, config, rng)?;
        return Ok(TwoStageResult { stage1_means: None, selected: (1..=data.p()).collect(), stage2 });
    }
    let stage1 = run_chain(data, model, config, rng)?;
    let means = stage1.posterior_means();
    let selected = top_by_abs_mean(&means, config.p_star);
    let cols: Vec<usize> = selected.iter().map(|id| id - 1).collect();
    let reduced = data.select_columns(&cols);
    let mut stage2 = run_chain(&reduced, model, config, rng)?;
    stage2.feature_ids = selected.clone();
    Ok(TwoStageResult { stage1_means: Some(means), selected, stage2 })
}
