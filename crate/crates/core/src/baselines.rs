//! L1-penalized logistic regression by coordinate descent, with
//! cross-validated penalty choice, and the used-feature count for comparison
//! tables.
//!
//! The objective is `(1/n) * sum_i [log(1 + e^eta_i) - y_i eta_i] + lambda * sum_j |beta_j|`
//! with an unpenalized intercept.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FbrhtError, Result};
use crate::evaluator::{sigmoid, softplus};

const MAX_OUTER: usize = 500;
const MAX_SWEEPS: usize = 100_000;
const INNER_TOL: f64 = 1e-13;
const OUTER_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    /// Intercept first.
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn check_inputs(x: &DMatrix<f64>, y: &[u8], lambda: f64) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(FbrhtError::Shape(format!("{} labels for {} rows", y.len(), x.nrows())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(FbrhtError::Parameter(format!("lambda must be nonnegative, got {lambda}")));
    }
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(FbrhtError::Degenerate("single-class labels".into()));
    }
    Ok(())
}

fn linear_predictor(x: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    let mut eta = vec![coef[0]; x.nrows()];
    for (j, col) in x.column_iter().enumerate() {
        let b = coef[j + 1];
        if b != 0.0 {
            for (e, v) in eta.iter_mut().zip(col.iter()) {
                *e += b * v;
            }
        }
    }
    eta
}

/// Penalized objective at `coef`.
pub fn lasso_objective(x: &DMatrix<f64>, y: &[u8], coef: &[f64], lambda: f64) -> f64 {
    let eta = linear_predictor(x, coef);
    let nll: f64 = eta.iter().zip(y).map(|(&e, &v)| softplus(e) - v as f64 * e).sum();
    nll / x.nrows() as f64 + lambda * coef[1..].iter().map(|b| b.abs()).sum::<f64>()
}

/// `(1/n) X^T (y - p)` for the slopes, intercept first.
pub fn lasso_scores(x: &DMatrix<f64>, y: &[u8], coef: &[f64]) -> Vec<f64> {
    let eta = linear_predictor(x, coef);
    let resid: Vec<f64> = eta.iter().zip(y).map(|(&e, &v)| v as f64 - sigmoid(e)).collect();
    let n = x.nrows() as f64;
    let mut s = vec![resid.iter().sum::<f64>() / n];
    s.extend(x.column_iter().map(|c| c.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / n));
    s
}

/// Largest violation of the optimality conditions: intercept score zero,
/// `|score_j| <= lambda` for zero slopes, `score_j = lambda sign(beta_j)` otherwise.
pub fn kkt_residual(x: &DMatrix<f64>, y: &[u8], coef: &[f64], lambda: f64) -> f64 {
    let s = lasso_scores(x, y, coef);
    let mut worst = s[0].abs();
    for j in 1..coef.len() {
        let v = if coef[j] == 0.0 {
            (s[j].abs() - lambda).max(0.0)
        } else {
            (s[j] - lambda * coef[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Smallest penalty at which every slope is zero.
pub fn lambda_max(x: &DMatrix<f64>, y: &[u8]) -> f64 {
    let rate = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
    let mut null = vec![0.0; x.ncols() + 1];
    null[0] = (rate / (1.0 - rate)).ln();
    lasso_scores(x, y, &null)[1..].iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn soft_threshold(u: f64, t: f64) -> f64 {
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

/// Fit from a starting point (warm start along a path).
pub fn lasso_logistic_fit_from(x: &DMatrix<f64>, y: &[u8], lambda: f64, start: &[f64]) -> Result<LassoFit> {
    check_inputs(x, y, lambda)?;
    let n = x.nrows();
    let nf = n as f64;
    let p = x.ncols();
    if start.len() != p + 1 {
        return Err(FbrhtError::Shape(format!("start has {} entries, need {}", start.len(), p + 1)));
    }
    let mut coef = start.to_vec();
    let mut obj = lasso_objective(x, y, &coef, lambda);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_OUTER {
        iterations += 1;
        let eta = linear_predictor(x, &coef);
        let mut w = vec![0.0; n];
        // working residual z - eta
        let mut r = vec![0.0; n];
        for i in 0..n {
            let pr = sigmoid(eta[i]);
            w[i] = (pr * (1.0 - pr)).max(1e-5);
            r[i] = (y[i] as f64 - pr) / w[i];
        }
        let sum_w: f64 = w.iter().sum();
        let curv: Vec<f64> = x
            .column_iter()
            .map(|c| c.iter().zip(&w).map(|(v, wi)| wi * v * v).sum::<f64>() / nf)
            .collect();

        let mut trial = coef.clone();
        for _ in 0..MAX_SWEEPS {
            let mut max_change = 0.0f64;
            let d0 = r.iter().zip(&w).map(|(ri, wi)| ri * wi).sum::<f64>() / sum_w;
            trial[0] += d0;
            for ri in r.iter_mut() {
                *ri -= d0;
            }
            max_change = max_change.max(d0.abs());
            for (j, col) in x.column_iter().enumerate() {
                if curv[j] == 0.0 {
                    continue;
                }
                let old = trial[j + 1];
                let grad: f64 = col.iter().zip(&r).zip(&w).map(|((v, ri), wi)| wi * v * ri).sum::<f64>() / nf;
                let new = soft_threshold(grad + curv[j] * old, lambda) / curv[j];
                let d = new - old;
                if d != 0.0 {
                    trial[j + 1] = new;
                    for (ri, v) in r.iter_mut().zip(col.iter()) {
                        *ri -= d * v;
                    }
                    max_change = max_change.max(d.abs() * curv[j].sqrt());
                }
            }
            if max_change < INNER_TOL {
                break;
            }
        }

        // backtrack toward the current point if the quadratic step overshoots
        let mut t = 1.0;
        let mut next = trial.clone();
        let mut next_obj = lasso_objective(x, y, &next, lambda);
        while next_obj > obj + 1e-15 && t > 1e-10 {
            t *= 0.5;
            next = coef.iter().zip(&trial).map(|(a, b)| a + t * (b - a)).collect();
            next_obj = lasso_objective(x, y, &next, lambda);
        }
        let change = coef.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        coef = next;
        obj = next_obj.min(obj);
        if change < OUTER_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("lasso fit at lambda {lambda} stopped after {iterations} iterations");
    }
    Ok(LassoFit { coef, converged, iterations })
}

/// Fit starting from the null model with the base-rate intercept.
pub fn lasso_logistic_fit(x: &DMatrix<f64>, y: &[u8], lambda: f64) -> Result<LassoFit> {
    check_inputs(x, y, lambda)?;
    let rate = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
    let mut start = vec![0.0; x.ncols() + 1];
    start[0] = (rate / (1.0 - rate)).ln();
    lasso_logistic_fit_from(x, y, lambda, &start)
}

/// Fits along a descending penalty grid, each warm-started from the last.
pub fn lasso_path(x: &DMatrix<f64>, y: &[u8], lambdas: &[f64]) -> Result<Vec<LassoFit>> {
    check_descending(lambdas)?;
    let mut out: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let fit = match out.last() {
            Some(prev) => lasso_logistic_fit_from(x, y, lam, &prev.coef)?,
            None => lasso_logistic_fit(x, y, lam)?,
        };
        out.push(fit);
    }
    Ok(out)
}

fn check_descending(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(FbrhtError::Parameter("empty lambda grid".into()));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(FbrhtError::Parameter("lambda grid must be positive and strictly descending".into()));
    }
    Ok(())
}

/// `lambda_m = 0.01 m` for `m = M, ..., 1`.
pub fn default_grid(m: usize) -> Vec<f64> {
    (1..=m).rev().map(|k| 0.01 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    /// `(p + 1) × M`, intercept in row 0.
    pub coefs: DMatrix<f64>,
    pub cv_amlp: Vec<f64>,
    pub best_index: usize,
}

impl LassoPath {
    pub fn best_coef(&self) -> Vec<f64> {
        self.coefs.column(self.best_index).iter().copied().collect()
    }

    pub fn n_active(&self, m: usize) -> usize {
        self.coefs.column(m).iter().skip(1).filter(|&&b| b != 0.0).count()
    }
}

/// K-fold cross-validated choice of lambda by held-out AMLP, then a refit of
/// the whole path on all cases. Folds come from a seeded shuffle.
pub fn lasso_cv_select(x: &DMatrix<f64>, y: &[u8], lambdas: &[f64], folds: usize, seed: u64) -> Result<LassoPath> {
    check_descending(lambdas)?;
    let n = x.nrows();
    if folds < 2 || folds > n {
        return Err(FbrhtError::Parameter(format!("need 2 <= folds <= n, got {folds} for n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (k, &i) in perm.iter().enumerate() {
        fold_of[i] = k % folds;
    }

    let losses: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let xt = x.select_rows(&train);
            let yt: Vec<u8> = train.iter().map(|&i| y[i]).collect();
            let xv = x.select_rows(&test);
            let yv: Vec<u8> = test.iter().map(|&i| y[i]).collect();
            let nll = |probs: &[f64]| -> f64 {
                probs
                    .iter()
                    .zip(&yv)
                    .map(|(&p, &v)| if v == 1 { -p.ln() } else { -(-p).ln_1p() })
                    .sum()
            };
            match lasso_path(&xt, &yt, lambdas) {
                Ok(path) => Ok(path
                    .iter()
                    .map(|fit| nll(&linear_predictor(&xv, &fit.coef).into_iter().map(sigmoid).collect::<Vec<_>>()))
                    .collect()),
                Err(FbrhtError::Degenerate(_)) => {
                    let rate = yt.iter().map(|&v| v as f64).sum::<f64>() / yt.len() as f64;
                    Ok(vec![nll(&vec![rate; yv.len()]); lambdas.len()])
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let cv_amlp: Vec<f64> =
        (0..lambdas.len()).map(|m| losses.iter().map(|l| l[m]).sum::<f64>() / n as f64).collect();
    let best_index = cv_amlp
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(m, _)| m)
        .unwrap_or(0);

    let full = lasso_path(x, y, lambdas)?;
    let mut coefs = DMatrix::zeros(x.ncols() + 1, lambdas.len());
    for (m, fit) in full.iter().enumerate() {
        coefs.column_mut(m).copy_from_slice(&fit.coef);
    }
    Ok(LassoPath { lambdas: lambdas.to_vec(), coefs, cv_amlp, best_index })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UsedFeatures {
    pub total: usize,
    /// Counts keyed by group label, when a group map is supplied.
    pub per_group: BTreeMap<usize, usize>,
}

/// Counts slopes with `|beta_j| > rel_threshold * max_k |beta_k|`.
/// `groups[j]` labels slope `j`.
pub fn count_used_features(slopes: &[f64], rel_threshold: f64, groups: Option<&[usize]>) -> Result<UsedFeatures> {
    if let Some(g) = groups {
        if g.len() != slopes.len() {
            return Err(FbrhtError::Shape(format!("{} group labels for {} slopes", g.len(), slopes.len())));
        }
    }
    let cut = rel_threshold * slopes.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut per_group = BTreeMap::new();
    if let Some(g) = groups {
        for &label in g {
            per_group.entry(label).or_insert(0);
        }
    }
    let mut total = 0;
    for (j, b) in slopes.iter().enumerate() {
        if b.abs() > cut {
            total += 1;
            if let Some(g) = groups {
                *per_group.entry(g[j]).or_insert(0) += 1;
            }
        }
    }
    Ok(UsedFeatures { total, per_group })
}
