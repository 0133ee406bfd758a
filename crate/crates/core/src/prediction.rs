//! Out-of-sample prediction: posterior averaging, and refits on the most
//! frequent or the best cross-validated feature subset.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::datagen::Dataset;
use crate::error::{FbrhtError, Result};
use crate::evaluator::{fit_penalized_logistic, metrics, MetricsTriple, PlrConfig};
use crate::math::RobitLink;
use crate::sampler::SampleMatrix;
use crate::subsets::FeatureSubsetReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Avg,
    Top,
    Opt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Avg => "avg",
            Method::Top => "top",
            Method::Opt => "opt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionReport {
    pub method: Method,
    pub probs: Vec<f64>,
    pub metrics: Option<MetricsTriple>,
    pub n_features_used: usize,
    pub features: Vec<usize>,
}

impl PredictionReport {
    /// Attach metrics when test labels are available.
    pub fn score(mut self, labels: Option<&[u8]>) -> Result<Self> {
        if let Some(y) = labels {
            self.metrics = Some(metrics(&self.probs, y)?);
        }
        Ok(self)
    }
}

/// Average of the Robit probabilities over all retained draws. `x_test` has
/// one column per original feature; draw row `k` multiplies column
/// `feature_ids[k] - 1`.
pub fn predict_avg(samples: &SampleMatrix, x_test: &DMatrix<f64>, link: &RobitLink) -> Result<Vec<f64>> {
    if let Some(&bad) = samples.feature_ids.iter().find(|&&f| f == 0 || f > x_test.ncols()) {
        return Err(FbrhtError::Shape(format!(
            "feature {bad} not present in a test matrix with {} columns",
            x_test.ncols()
        )));
    }
    let r = samples.draws.ncols();
    if r == 0 || samples.intercepts.len() != r {
        return Err(FbrhtError::Shape("sample matrix has no draws or mismatched intercepts".into()));
    }
    let xs = x_test.select_columns(&samples.feature_ids.iter().map(|f| f - 1).collect::<Vec<_>>());
    // eta[i, r] = intercept_r + sum_k x[i, k] beta[k, r]
    let eta = &xs * &samples.draws;
    Ok((0..x_test.nrows())
        .map(|i| {
            (0..r).map(|d| link.cdf(eta[(i, d)] + samples.intercepts[d])).sum::<f64>() / r as f64
        })
        .collect())
}

fn by_freq_then_lex(a: &FeatureSubsetReport, b: &FeatureSubsetReport) -> std::cmp::Ordering {
    b.freq.total_cmp(&a.freq).then_with(|| a.features.cmp(&b.features))
}

/// Most frequent subset; ties go to the lexicographically smaller one.
pub fn select_top_subset(reports: &[FeatureSubsetReport]) -> Option<&FeatureSubsetReport> {
    reports.iter().min_by(|a, b| by_freq_then_lex(a, b))
}

/// Subset with the smallest cvAMLP among those evaluated; ties go to the more
/// frequent, then the lexicographically smaller.
pub fn select_opt_subset(reports: &[FeatureSubsetReport]) -> Option<&FeatureSubsetReport> {
    reports
        .iter()
        .filter_map(|r| r.cv_amlp.filter(|v| !v.is_nan()).map(|v| (v, r)))
        .min_by(|(va, a), (vb, b)| va.total_cmp(vb).then_with(|| by_freq_then_lex(a, b)))
        .map(|(_, r)| r)
}

/// Refit on the subset's columns of the training data and predict the test
/// rows. Feature IDs are 1-based columns of both matrices.
pub fn predict_with_subset(
    train: &Dataset,
    features: &[usize],
    x_test: &DMatrix<f64>,
    cfg: &PlrConfig,
) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(FbrhtError::Shape("empty feature subset".into()));
    }
    if let Some(&bad) = features.iter().find(|&&f| f == 0 || f > train.p() || f > x_test.ncols()) {
        return Err(FbrhtError::Shape(format!("feature {bad} out of range")));
    }
    let cols: Vec<usize> = features.iter().map(|f| f - 1).collect();
    let fit = fit_penalized_logistic(&train.x.select_columns(&cols), &train.y, cfg)?;
    if x_test.nrows() == 0 {
        return Ok(Vec::new());
    }
    Ok(fit.predict(&x_test.select_columns(&cols)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::TParams;

    fn rep(features: &[usize], freq: f64, amlp: Option<f64>) -> FeatureSubsetReport {
        FeatureSubsetReport { cv_amlp: amlp, ..FeatureSubsetReport::new(features.to_vec(), freq) }
    }

    fn samples(draws: DMatrix<f64>, intercepts: Vec<f64>, ids: Vec<usize>) -> SampleMatrix {
        SampleMatrix { draws, intercepts, feature_ids: ids, accept_rate: 1.0 }
    }

    #[test]
    fn avg_single_draw_is_robit_probability() {
        let link = RobitLink::new(TParams::likelihood_default());
        let s = samples(DMatrix::from_column_slice(2, 1, &[1.5, -0.5]), vec![0.2], vec![1, 3]);
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 9.0, 2.0, -1.0, 9.0, 0.5]);
        let p = predict_avg(&s, &x, &link).unwrap();
        assert!((p[0] - link.cdf(0.2 + 1.5 - 1.0)).abs() < 1e-15);
        assert!((p[1] - link.cdf(0.2 - 1.5 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn avg_zero_draws_give_half_and_stay_in_hull() {
        let link = RobitLink::new(TParams::likelihood_default());
        let z = samples(DMatrix::zeros(2, 4), vec![0.0; 4], vec![1, 2]);
        let x = DMatrix::from_element(3, 2, 0.7);
        assert!(predict_avg(&z, &x, &link).unwrap().iter().all(|&p| p == 0.5));

        let s = samples(
            DMatrix::from_column_slice(2, 3, &[1.0, 0.0, -2.0, 1.0, 0.3, 0.3]),
            vec![0.0, 0.5, -0.1],
            vec![1, 2],
        );
        let p = predict_avg(&s, &x, &link).unwrap();
        let per: Vec<f64> = (0..3)
            .map(|d| link.cdf(s.intercepts[d] + 0.7 * (s.draws[(0, d)] + s.draws[(1, d)])))
            .collect();
        let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(p.iter().all(|&v| v >= lo && v <= hi));
        assert!(predict_avg(&s, &DMatrix::zeros(3, 1), &link).is_err());
    }

    #[test]
    fn top_and_opt_selection_rules() {
        let reports = vec![rep(&[2], 0.42, Some(0.5)), rep(&[1], 0.56, Some(0.45)), rep(&[1, 2], 0.02, None)];
        assert_eq!(select_top_subset(&reports).unwrap().features, vec![1]);
        assert_eq!(select_opt_subset(&reports).unwrap().features, vec![1]);

        let tied = vec![rep(&[3], 0.3, Some(0.4)), rep(&[1, 5], 0.3, Some(0.4)), rep(&[2], 0.4, Some(0.4))];
        assert_eq!(select_top_subset(&tied).unwrap().features, vec![2]);
        assert_eq!(select_opt_subset(&tied).unwrap().features, vec![2]);
        let mut rev = tied.clone();
        rev.reverse();
        assert_eq!(select_top_subset(&rev), select_top_subset(&tied));
        assert_eq!(select_opt_subset(&rev), select_opt_subset(&tied));
        let equal_freq = vec![rep(&[3], 0.3, Some(0.4)), rep(&[1, 5], 0.3, Some(0.4))];
        assert_eq!(select_top_subset(&equal_freq).unwrap().features, vec![1, 5]);

        let one = vec![rep(&[7], 0.1, Some(0.9))];
        assert_eq!(select_opt_subset(&one).unwrap().features, vec![7]);
        assert!(select_top_subset(&[]).is_none());
    }

    #[test]
    fn subset_refit_uses_only_subset_columns() {
        let x = DMatrix::from_row_slice(6, 2, &[-1.0, 3.0, -0.5, 1.0, 0.2, -2.0, 0.1, 0.0, 1.0, 5.0, 0.8, -1.0]);
        let train = Dataset::new(x.clone(), vec![0, 0, 1, 0, 1, 1]).unwrap();
        let cfg = PlrConfig::default();
        let mut x_test = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -0.3, 2.0]);
        let p1 = predict_with_subset(&train, &[1], &x_test, &cfg).unwrap();
        x_test.column_mut(1).fill(100.0);
        assert_eq!(p1, predict_with_subset(&train, &[1], &x_test, &cfg).unwrap());

        let direct = fit_penalized_logistic(&x, &train.y, &cfg).unwrap().predict(&x);
        assert_eq!(predict_with_subset(&train, &[1, 2], &x, &cfg).unwrap(), direct);
        assert!(predict_with_subset(&train, &[1], &DMatrix::zeros(0, 2), &cfg).unwrap().is_empty());
    }
}
