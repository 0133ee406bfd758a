//! Penalized logistic regression with Student-t priors, predictive metrics,
//! and leave-one-out evaluation of feature subsets.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{FbrhtError, Result};
use crate::subsets::FeatureSubsetReport;

/// Settings for [`fit_penalized_logistic`].
///
/// With `scaled`, a slope's prior scale is `prior_scale / (2 sd)` for a
/// continuous column and `prior_scale / range` for a two-valued column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlrConfig {
    pub prior_df: f64,
    pub prior_scale: f64,
    pub intercept_scale: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub scaled: bool,
}

impl Default for PlrConfig {
    fn default() -> Self {
        Self { prior_df: 1.0, prior_scale: 2.5, intercept_scale: 10.0, max_iters: 100, tol: 1e-8, scaled: true }
    }
}

impl PlrConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prior_df", self.prior_df),
            ("prior_scale", self.prior_scale),
            ("intercept_scale", self.intercept_scale),
            ("tol", self.tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FbrhtError::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(FbrhtError::Parameter("max_iters must be positive".into()));
        }
        Ok(())
    }
}

const RIDGE_JITTER: f64 = 1e-6;

/// Result of a penalized logistic fit. `coef[0]` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct PlrFit {
    pub coef: Vec<f64>,
    pub prior_scales: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

impl PlrFit {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.coef[0] + (0..x.ncols()).map(|j| x[(i, j)] * self.coef[j + 1]).sum::<f64>())
            .collect()
    }

    /// `P(y = 1)` for each row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.linear_predictor(x).into_iter().map(sigmoid).collect()
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^eta)` without overflow.
pub fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

fn prior_scales(x: &DMatrix<f64>, cfg: &PlrConfig) -> Vec<f64> {
    let mut scales = vec![cfg.intercept_scale];
    for col in x.column_iter() {
        if !cfg.scaled {
            scales.push(cfg.prior_scale);
            continue;
        }
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let two_valued = col.iter().all(|&v| v == lo || v == hi);
        let spread = if two_valued { hi - lo } else { 2.0 * sd };
        scales.push(if spread > 0.0 { cfg.prior_scale / spread } else { cfg.prior_scale });
    }
    scales
}

/// Negative log posterior: logistic loss plus independent t penalties.
pub fn penalized_objective(x: &DMatrix<f64>, y: &[u8], coef: &[f64], scales: &[f64], df: f64) -> f64 {
    let mut f = 0.0;
    for i in 0..x.nrows() {
        let eta = coef[0] + (0..x.ncols()).map(|j| x[(i, j)] * coef[j + 1]).sum::<f64>();
        f += softplus(eta) - if y[i] == 1 { eta } else { 0.0 };
    }
    for (b, s) in coef.iter().zip(scales) {
        f += 0.5 * (df + 1.0) * (b * b / (df * s * s)).ln_1p();
    }
    f
}

/// Gradient of [`penalized_objective`].
pub fn penalized_gradient(x: &DMatrix<f64>, y: &[u8], coef: &[f64], scales: &[f64], df: f64) -> Vec<f64> {
    let k = coef.len();
    let mut g = vec![0.0; k];
    for i in 0..x.nrows() {
        let eta = coef[0] + (0..x.ncols()).map(|j| x[(i, j)] * coef[j + 1]).sum::<f64>();
        let r = sigmoid(eta) - y[i] as f64;
        g[0] += r;
        for j in 0..x.ncols() {
            g[j + 1] += r * x[(i, j)];
        }
    }
    for j in 0..k {
        let b = coef[j];
        g[j] += (df + 1.0) * b / (df * scales[j] * scales[j] + b * b);
    }
    g
}

/// Posterior mode of logistic regression under independent t priors.
///
/// Each iteration recomputes the working prior precisions
/// `(df + 1) / (df s^2 + beta^2)` from the current coefficients, then takes a
/// weighted least-squares step, halved until the objective does not increase.
pub fn fit_penalized_logistic(x: &DMatrix<f64>, y: &[u8], cfg: &PlrConfig) -> Result<PlrFit> {
    cfg.validate()?;
    let n = x.nrows();
    if y.len() != n {
        return Err(FbrhtError::Shape(format!("{} labels for {} rows", y.len(), n)));
    }
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(FbrhtError::Degenerate(format!("single-class training labels ({n} cases)")));
    }
    let k = x.ncols() + 1;
    let df = cfg.prior_df;
    let scales = prior_scales(x, cfg);
    let mut xd = DMatrix::from_element(n, k, 1.0);
    xd.columns_mut(1, k - 1).copy_from(x);

    let mut coef = vec![0.0; k];
    let mut obj = penalized_objective(x, y, &coef, &scales, df);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let beta = DVector::from_column_slice(&coef);
        let eta = &xd * &beta;
        let mut w = DVector::zeros(n);
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let p = sigmoid(eta[i]);
            w[i] = (p * (1.0 - p)).max(1e-12);
            resid[i] = y[i] as f64 - p;
        }
        let mut a = xd.transpose() * DMatrix::from_diagonal(&w) * &xd;
        let mut rhs = xd.transpose() * resid;
        for j in 0..k {
            let tau = (df + 1.0) / (df * scales[j] * scales[j] + coef[j] * coef[j]);
            a[(j, j)] += tau + RIDGE_JITTER;
            rhs[j] -= tau * coef[j];
        }
        let step = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| FbrhtError::Degenerate("singular working system".into()))?,
        };

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = coef.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_obj = penalized_objective(x, y, &cand, &scales, df);
            if cand_obj <= obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_obj)) = accepted else {
            // no descent along the step: already at numerical optimum
            converged = true;
            break;
        };
        let change = coef
            .iter()
            .zip(&cand)
            .map(|(old, new)| (new - old).abs() / new.abs().max(1.0))
            .fold(0.0, f64::max);
        coef = cand;
        obj = cand_obj;
        trace.push(obj);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("penalized logistic fit stopped after {iterations} iterations");
    }
    Ok(PlrFit { coef, prior_scales: scales, converged, iterations, objective_trace: trace })
}

/// ER, AMLP and AUC of a probability vector against labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    pub er: f64,
    pub amlp: f64,
    pub auc: f64,
}

fn check_lengths(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(FbrhtError::Shape(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Err(FbrhtError::Shape("no cases to score".into()));
    }
    Ok(())
}

/// Misclassification rate; `P(1) >= 0.5` predicts class 1.
pub fn error_rate(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(probs, labels)?;
    let wrong = probs.iter().zip(labels).filter(|(&p, &y)| (p >= 0.5) != (y == 1)).count();
    Ok(wrong as f64 / probs.len() as f64)
}

/// Average minus log probability of the observed labels; `+inf` when any
/// observed label has probability zero.
pub fn amlp(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(-p).ln_1p() })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Area under the ROC curve in Mann-Whitney form, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(FbrhtError::Data("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FbrhtError::Degenerate("AUC undefined with a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn metrics(probs: &[f64], labels: &[u8]) -> Result<MetricsTriple> {
    Ok(MetricsTriple { er: error_rate(probs, labels)?, amlp: amlp(probs, labels)?, auc: auc(probs, labels)? })
}

/// Leave-one-out predictive probabilities for the columns `columns` of `x`.
/// A fold whose training labels are a single class predicts its base rate.
pub fn loocv_probs(x: &DMatrix<f64>, y: &[u8], columns: &[usize], cfg: &PlrConfig) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n < 3 {
        return Err(FbrhtError::Shape(format!("LOOCV needs at least 3 cases, got {n}")));
    }
    if columns.is_empty() {
        return Err(FbrhtError::Shape("empty feature subset".into()));
    }
    if let Some(&bad) = columns.iter().find(|&&c| c >= x.ncols()) {
        return Err(FbrhtError::Shape(format!("column {bad} out of range for {} features", x.ncols())));
    }
    let xs = x.select_columns(columns);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x_train = xs.clone().remove_row(i);
            let y_train: Vec<u8> = y.iter().enumerate().filter(|&(r, _)| r != i).map(|(_, &v)| v).collect();
            match fit_penalized_logistic(&x_train, &y_train, cfg) {
                Ok(fit) => Ok(fit.predict(&xs.rows(i, 1).into_owned())[0]),
                Err(FbrhtError::Degenerate(_)) => {
                    Ok(y_train.iter().map(|&v| v as f64).sum::<f64>() / y_train.len() as f64)
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// cvER, cvAMLP and cvAUC of a subset of 0-based columns.
pub fn loocv_evaluate(x: &DMatrix<f64>, y: &[u8], columns: &[usize], cfg: &PlrConfig) -> Result<MetricsTriple> {
    metrics(&loocv_probs(x, y, columns, cfg)?, y)
}

/// Fill the cv fields of the first `max_reports` reports. Feature IDs are
/// 1-based columns of `data`.
pub fn evaluate_reports(
    data: &Dataset,
    reports: &mut [FeatureSubsetReport],
    max_reports: usize,
    cfg: &PlrConfig,
) -> Result<()> {
    for rep in reports.iter_mut().take(max_reports) {
        let cols: Vec<usize> = rep.features.iter().map(|&f| f - 1).collect();
        let m = loocv_evaluate(&data.x, &data.y, &cols, cfg)?;
        rep.cv_er = Some(m.er);
        rep.cv_amlp = Some(m.amlp);
        rep.cv_auc = Some(m.auc);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_instance(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|i| {
                let eta = 0.3 + x[(i, 0)] - 0.5 * x[(i, p - 1)];
                u8::from(rng.random::<f64>() < sigmoid(eta))
            })
            .collect();
        (x, y)
    }

    #[test]
    fn zero_columns_balanced_labels() {
        let x = DMatrix::zeros(6, 2);
        let fit = fit_penalized_logistic(&x, &[0, 1, 0, 1, 0, 1], &PlrConfig::default()).unwrap();
        assert!(fit.converged);
        for c in &fit.coef {
            assert!(c.abs() < 1e-10);
        }
    }

    #[test]
    fn separable_data_stays_finite() {
        let x = DMatrix::from_column_slice(4, 1, &[-2.0, -1.0, 1.0, 2.0]);
        let y = [0, 0, 1, 1];
        let cfg = PlrConfig::default();
        let fit = fit_penalized_logistic(&x, &y, &cfg).unwrap();
        assert!(fit.coef.iter().all(|c| c.is_finite()));
        assert!(fit.coef[1] > 0.0 && fit.coef[1] < 50.0);
        let best = penalized_objective(&x, &y, &fit.coef, &fit.prior_scales, cfg.prior_df);
        for k in -2000..=2000 {
            let slope = k as f64 * 0.01;
            let other = penalized_objective(&x, &y, &[fit.coef[0], slope], &fit.prior_scales, cfg.prior_df);
            assert!(best <= other + 1e-12, "slope {slope}: {other} < {best}");
        }
    }

    #[test]
    fn stationary_point_on_random_instances() {
        let cfg = PlrConfig::default();
        for seed in 0..50 {
            let (x, y) = random_instance(seed, 30, 4);
            let fit = fit_penalized_logistic(&x, &y, &cfg).unwrap();
            let g = penalized_gradient(&x, &y, &fit.coef, &fit.prior_scales, cfg.prior_df);
            let sup = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(sup < 1e-5, "seed {seed}: gradient {sup}");
        }
    }

    #[test]
    fn objective_trace_is_nonincreasing() {
        for seed in 0..20 {
            let (x, y) = random_instance(100 + seed, 25, 3);
            let fit = fit_penalized_logistic(&x, &y, &PlrConfig::default()).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = random_instance(9, 15, 3);
        let scales = prior_scales(&x, &PlrConfig::default());
        let coef = [0.2, -0.7, 1.1, 0.05];
        let g = penalized_gradient(&x, &y, &coef, &scales, 1.0);
        for j in 0..coef.len() {
            let h = 1e-6;
            let mut up = coef;
            let mut dn = coef;
            up[j] += h;
            dn[j] -= h;
            let fd = (penalized_objective(&x, &y, &up, &scales, 1.0)
                - penalized_objective(&x, &y, &dn, &scales, 1.0))
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = DMatrix::zeros(3, 1);
        assert!(matches!(
            fit_penalized_logistic(&x, &[1, 1, 1], &PlrConfig::default()),
            Err(FbrhtError::Degenerate(_))
        ));
    }

    #[test]
    fn scaled_prior_scales() {
        let x = DMatrix::from_column_slice(4, 2, &[0.0, 1.0, 0.0, 1.0, 1.0, 2.0, 3.0, 4.0]);
        let s = prior_scales(&x, &PlrConfig::default());
        assert_eq!(s[0], 10.0);
        assert!((s[1] - 2.5).abs() < 1e-12);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s[2] - 2.5 / (2.0 * sd)).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(error_rate(&[0.9, 0.2], &[1, 0]).unwrap(), 0.0);
        assert_eq!(error_rate(&[0.9, 0.2], &[0, 1]).unwrap(), 1.0);
        let half = vec![0.5; 8];
        let y = [1, 0, 0, 0, 1, 0, 1, 0];
        assert_eq!(error_rate(&half, &y).unwrap(), 5.0 / 8.0);
        assert!((amlp(&half, &y).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(amlp(&[0.0, 0.5], &[1, 0]).unwrap(), f64::INFINITY);
        assert_eq!(amlp(&[1.0, 0.5], &[0, 1]).unwrap(), f64::INFINITY);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&half, &y).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(FbrhtError::Degenerate(_))));
    }

    fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn metrics_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            // coarse grid so ties occur
            let s: Vec<f64> = (0..50).map(|_| (rng.random::<f64>() * 20.0).floor() / 20.0).collect();
            let mut y: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            assert!((auc(&s, &y).unwrap() - brute_auc(&s, &y)).abs() < 1e-12);

            let p: Vec<f64> = (0..50).map(|_| rng.random_range(0.01..0.99)).collect();
            let mut wrong = 0.0;
            let mut nll = 0.0;
            for i in 0..50 {
                let pred = if p[i] >= 0.5 { 1 } else { 0 };
                if pred != y[i] {
                    wrong += 1.0;
                }
                nll -= if y[i] == 1 { p[i].ln() } else { (1.0 - p[i]).ln() };
            }
            assert_eq!(error_rate(&p, &y).unwrap(), wrong / 50.0);
            assert!((amlp(&p, &y).unwrap() - nll / 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loocv_noise_auc_near_half() {
        let mut total = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let x = DMatrix::from_fn(100, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
            total += loocv_evaluate(&x, &y, &[0, 1], &PlrConfig::default()).unwrap().auc;
        }
        let mean = total / 5.0;
        assert!((mean - 0.5).abs() < 0.1, "mean cvAUC {mean}");
    }

    #[test]
    fn loocv_is_deterministic_and_falls_back() {
        let (x, y) = random_instance(3, 20, 3);
        let a = loocv_evaluate(&x, &y, &[0, 2], &PlrConfig::default()).unwrap();
        let b = loocv_evaluate(&x, &y, &[0, 2], &PlrConfig::default()).unwrap();
        assert_eq!(a, b);
        // one positive: its fold trains on negatives only and predicts 0
        let x1 = DMatrix::from_column_slice(4, 1, &[0.1, 0.2, 0.3, 0.4]);
        let p = loocv_probs(&x1, &[0, 0, 0, 1], &[0], &PlrConfig::default()).unwrap();
        assert_eq!(p[3], 0.0);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            s in proptest::collection::vec(-3.0f64..3.0, 12),
            y in proptest::collection::vec(0u8..2, 12),
        ) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert!((auc(&s, &y).unwrap() - auc(&t, &y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn error_rate_complements_under_flip(
            p in proptest::collection::vec(0.0f64..1.0, 10),
            y in proptest::collection::vec(0u8..2, 10),
        ) {
            prop_assume!(p.iter().all(|&v| v != 0.5));
            let fp: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
            let fy: Vec<u8> = y.iter().map(|v| 1 - v).collect();
            let a = error_rate(&p, &y).unwrap();
            prop_assert!(a <= 1.0);
            prop_assert!((error_rate(&fp, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
            prop_assert_eq!(error_rate(&fp, &fy).unwrap(), a);
        }
    }
}
