//! Feature subsets from MCMC draws and the mode-switching diagnostic.
//!
//! Each retained draw is reduced to the set of features whose coefficient is
//! large relative to that draw's largest coefficient. Features that are rarely
//! selected are then cleared everywhere, and identical indicator columns are
//! pooled into subsets ranked by how often they occur.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FbrhtError, Result};

/// Column-major `p × R` boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    p: usize,
    r: usize,
    data: Vec<bool>,
}

impl IndicatorMatrix {
    pub fn from_fn(p: usize, r: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(p * r);
        for i in 0..r {
            for j in 0..p {
                data.push(f(j, i));
            }
        }
        Self { p, r, data }
    }

    pub fn nrows(&self) -> usize {
        self.p
    }

    pub fn ncols(&self) -> usize {
        self.r
    }

    pub fn get(&self, j: usize, i: usize) -> bool {
        self.data[i * self.p + j]
    }

    pub fn column(&self, i: usize) -> &[bool] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    /// Fraction of columns in which row `j` is set.
    pub fn row_frequency(&self, j: usize) -> f64 {
        (0..self.r).filter(|&i| self.get(j, i)).count() as f64 / self.r as f64
    }

    /// Set rows of each column, as local row indices.
    pub fn column_sets(&self) -> Vec<Vec<usize>> {
        (0..self.r)
            .map(|i| self.column(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect())
            .collect()
    }
}

/// A feature subset with its posterior frequency and optional LOOCV metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSubsetReport {
    /// Strictly increasing 1-based feature IDs.
    pub features: Vec<usize>,
    pub freq: f64,
    pub cv_er: Option<f64>,
    pub cv_amlp: Option<f64>,
    pub cv_auc: Option<f64>,
}

impl FeatureSubsetReport {
    pub fn new(features: Vec<usize>, freq: f64) -> Self {
        Self { features, freq, cv_er: None, cv_amlp: None, cv_auc: None }
    }

    pub fn label(&self) -> String {
        self.features.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// `I[j, i] = |beta_{j,i}| > rel_threshold * max_k |beta_{k,i}|`.
pub fn binarize_samples(draws: &DMatrix<f64>, rel_threshold: f64) -> Result<IndicatorMatrix> {
    if draws.ncols() == 0 {
        return Err(FbrhtError::Shape("sample matrix has no draws".into()));
    }
    let cutoffs: Vec<f64> = draws
        .column_iter()
        .map(|c| rel_threshold * c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    Ok(IndicatorMatrix::from_fn(draws.nrows(), draws.ncols(), |j, i| draws[(j, i)].abs() > cutoffs[i]))
}

/// Clear rows selected in fewer than `min_freq` of the columns; rows at exactly
/// `min_freq` survive.
pub fn filter_low_frequency(ind: &IndicatorMatrix, min_freq: f64) -> IndicatorMatrix {
    let keep: Vec<bool> = (0..ind.nrows())
        .map(|j| {
            let count = (0..ind.ncols()).filter(|&i| ind.get(j, i)).count();
            // compare counts, not rounded fractions: count / R >= min_freq
            count as f64 >= min_freq * ind.ncols() as f64 - 1e-9
        })
        .collect();
    IndicatorMatrix::from_fn(ind.nrows(), ind.ncols(), |j, i| keep[j] && ind.get(j, i))
}

/// Pool identical columns into subsets. `feature_ids[j]` names row `j`.
///
/// Empty columns are not reported but still count in the denominator. The
/// result is sorted by frequency (descending), ties by feature list.
pub fn enumerate_subsets(ind: &IndicatorMatrix, feature_ids: &[usize]) -> Vec<FeatureSubsetReport> {
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for set in ind.column_sets() {
        if set.is_empty() {
            continue;
        }
        let mut ids: Vec<usize> = set.into_iter().map(|j| feature_ids[j]).collect();
        ids.sort_unstable();
        *counts.entry(ids).or_default() += 1;
    }
    let r = ind.ncols() as f64;
    let mut reports: Vec<(usize, FeatureSubsetReport)> = counts
        .into_iter()
        .map(|(ids, c)| (c, FeatureSubsetReport::new(ids, c as f64 / r)))
        .collect();
    reports.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.features.cmp(&b.1.features)));
    reports.into_iter().map(|(_, rep)| rep).collect()
}

/// Fraction of columns with no feature selected.
pub fn empty_fraction(ind: &IndicatorMatrix) -> f64 {
    (0..ind.ncols()).filter(|&i| !ind.column(i).iter().any(|&b| b)).count() as f64 / ind.ncols() as f64
}

/// Thresholds used by [`extract_subsets`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    pub rel_threshold: f64,
    pub min_freq: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { rel_threshold: 0.1, min_freq: 0.05 }
    }
}

/// Binarize, filter and pool in one call; also returns the filtered indicator
/// matrix for diagnostics.
pub fn extract_subsets(
    draws: &DMatrix<f64>,
    feature_ids: &[usize],
    config: &ExtractConfig,
) -> Result<(Vec<FeatureSubsetReport>, IndicatorMatrix)> {
    if feature_ids.len() != draws.nrows() {
        return Err(FbrhtError::Shape(format!(
            "{} feature IDs for {} rows",
            feature_ids.len(),
            draws.nrows()
        )));
    }
    let ind = filter_low_frequency(&binarize_samples(draws, config.rel_threshold)?, config.min_freq);
    Ok((enumerate_subsets(&ind, feature_ids), ind))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeSwitchStats {
    pub switch_count: usize,
    pub n_unique_modes: usize,
}

/// Count changes between consecutive entries and distinct entries.
pub fn mode_switch_stats<T: Eq + Hash>(sequence: &[T]) -> Result<ModeSwitchStats> {
    if sequence.len() < 2 {
        return Err(FbrhtError::Diagnostic(format!(
            "need at least 2 samples, got {}",
            sequence.len()
        )));
    }
    let switch_count = sequence.windows(2).filter(|w| w[0] != w[1]).count();
    let n_unique_modes = sequence.iter().collect::<HashSet<_>>().len();
    Ok(ModeSwitchStats { switch_count, n_unique_modes })
}
