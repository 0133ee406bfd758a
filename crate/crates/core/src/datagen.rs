//! Datasets, standardization, marginal screening and the synthetic generators.

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FbrhtError, Result};

/// Per-feature centering and scaling learned on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    /// Original column indices that survived (non-constant columns).
    pub kept: Vec<usize>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Original column indices dropped for zero variance.
    pub dropped: Vec<usize>,
}

impl Standardization {
    /// Apply the stored transform to a matrix with the original column layout.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let width = self.kept.len() + self.dropped.len();
        if x.ncols() != width {
            return Err(FbrhtError::Shape(format!(
                "transform expects {width} columns, matrix has {}",
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), self.kept.len(), |i, k| {
            (x[(i, self.kept[k])] - self.means[k]) / self.sds[k]
        }))
    }
}

/// Case-major design matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<u8>,
    pub feature_names: Option<Vec<String>>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<u8>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(FbrhtError::Shape(format!(
                "{} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if let Some((i, &v)) = y.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(FbrhtError::Data(format!("label {v} in row {} is not 0 or 1", i + 1)));
        }
        Ok(Self { x, y, feature_names: None, standardization: None })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.x.ncols() {
            return Err(FbrhtError::Shape(format!(
                "{} feature names for {} columns",
                names.len(),
                self.x.ncols()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_positive(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn rows(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            x: self.x.rows(start, end - start).into_owned(),
            y: self.y[start..end].to_vec(),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Keep only the given 0-based columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(cols),
            y: self.y.clone(),
            feature_names: self
                .feature_names
                .as_ref()
                .map(|names| cols.iter().map(|&c| names[c].clone()).collect()),
            standardization: None,
        }
    }
}

fn mean_sd(col: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = col.clone().count() as f64;
    let mean = col.clone().sum::<f64>() / n;
    let ss: f64 = col.map(|v| (v - mean) * (v - mean)).sum();
    let sd = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Center each column and scale to unit sample sd (denominator `n - 1`).
///
/// Constant columns are dropped and listed in the returned transform.
pub fn standardize(data: &Dataset) -> Result<(Dataset, Standardization)> {
    if data.n() < 2 {
        return Err(FbrhtError::Data(format!("need at least 2 cases, got {}", data.n())));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for j in 0..data.p() {
        let (m, s) = mean_sd(data.x.column(j).iter().copied());
        if s > 0.0 && s.is_finite() {
            kept.push(j);
            means.push(m);
            sds.push(s);
        } else {
            dropped.push(j);
        }
    }
    if !dropped.is_empty() {
        warn!("dropping {} zero-variance column(s): {:?}", dropped.len(), dropped);
    }
    let transform = Standardization { kept, means, sds, dropped };
    let x = transform.apply(&data.x)?;
    let feature_names = data
        .feature_names
        .as_ref()
        .map(|names| transform.kept.iter().map(|&c| names[c].clone()).collect());
    let out = Dataset {
        x,
        y: data.y.clone(),
        feature_names,
        standardization: Some(transform.clone()),
    };
    Ok((out, transform))
}

/// Pooled-variance two-sample t statistic of one column between the classes.
pub fn two_sample_t(col: &[f64], y: &[u8]) -> f64 {
    let (mut n1, mut s1, mut n0, mut s0) = (0.0, 0.0, 0.0, 0.0);
    for (&v, &c) in col.iter().zip(y) {
        if c == 1 {
            n1 += 1.0;
            s1 += v;
        } else {
            n0 += 1.0;
            s0 += v;
        }
    }
    if n1 == 0.0 || n0 == 0.0 {
        return 0.0;
    }
    let (m1, m0) = (s1 / n1, s0 / n0);
    let ss: f64 = col
        .iter()
        .zip(y)
        .map(|(&v, &c)| {
            let d = v - if c == 1 { m1 } else { m0 };
            d * d
        })
        .sum();
    let diff = m1 - m0;
    let dof = n1 + n0 - 2.0;
    if dof <= 0.0 {
        return 0.0;
    }
    let se = (ss / dof * (1.0 / n1 + 1.0 / n0)).sqrt();
    if se == 0.0 {
        return if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
    }
    diff / se
}

/// Rank features by `|t|` (descending, ties by lower index) and return the top
/// `k` 0-based column indices; rank order is preserved.
pub fn marginal_screen(data: &Dataset, k: usize) -> Vec<usize> {
    let k = if k > data.p() {
        warn!("screen size {k} exceeds {} features; keeping all", data.p());
        data.p()
    } else {
        k
    };
    let mut scored: Vec<(usize, f64)> = (0..data.p())
        .map(|j| (j, two_sample_t(data.x.column(j).as_slice(), &data.y).abs()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(j, _)| j).collect()
}

/// Sizes of the three signal groups and the trailing noise block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub group_size: usize,
    pub n_noise: usize,
}

impl GroupLayout {
    pub fn p(&self) -> usize {
        3 * self.group_size + self.n_noise
    }

    /// Group of a 1-based feature ID: 1..=3 for signal groups, 4 for noise.
    pub fn group_of(&self, feature_id: usize) -> usize {
        ((feature_id - 1) / self.group_size).min(3) + 1
    }

    pub fn groups(&self) -> Vec<usize> {
        (1..=self.p()).map(|id| self.group_of(id)).collect()
    }

    pub const INDEPENDENT_FULL: GroupLayout = GroupLayout { group_size: 50, n_noise: 1850 };
    pub const INDEPENDENT_DESK: GroupLayout = GroupLayout { group_size: 10, n_noise: 170 };
    pub const CORRELATED_FULL: GroupLayout = GroupLayout { group_size: 200, n_noise: 1400 };
    pub const CORRELATED_DESK: GroupLayout = GroupLayout { group_size: 10, n_noise: 70 };
}

/// A generated dataset with the true group of every feature (index = column).
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    pub groups: Vec<usize>,
}

fn named(x: DMatrix<f64>, y: Vec<u8>, groups: Vec<usize>) -> Generated {
    let names = groups
        .iter()
        .enumerate()
        .map(|(j, g)| format!("x{}_g{}", j + 1, g))
        .collect();
    let data = Dataset::new(x, y)
        .and_then(|d| d.with_feature_names(names))
        .expect("generator output is well formed");
    Generated { data, groups }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Two features sharing a common factor: `x_ij = mu_j^{y} + z_i + 0.1 e_ij`
/// with class means 0 and 2.
pub fn gen_toy(n: usize, seed: u64) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = u8::from(rng.random_bool(0.5));
        let mu = if label == 1 { 2.0 } else { 0.0 };
        let z = normal(&mut rng);
        for j in 0..2 {
            x[(i, j)] = mu + z + 0.1 * normal(&mut rng);
        }
        y.push(label);
    }
    named(x, y, vec![1, 1])
}

/// Three independent signal groups, each driven by its own factor, plus noise.
/// `y = 1` iff `(z1 + z2 + z3)/sqrt(3) + 0.1 e > 0`.
pub fn gen_independent_groups(n: usize, seed: u64, layout: GroupLayout) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = layout.p();
    let g = layout.group_size;
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let z = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        for j in 0..p {
            x[(i, j)] = if j < 3 * g { z[j / g] + 0.5 * normal(&mut rng) } else { normal(&mut rng) };
        }
        let score = (z[0] + z[1] + z[2]) / 3f64.sqrt() + 0.1 * normal(&mut rng);
        y.push(u8::from(score > 0.0));
    }
    named(x, y, layout.groups())
}

/// Weakly differentiated correlated groups: groups 1 and 2 share factor `z1`
/// and have small opposite class shifts; group 3 has a large shift.
///
/// Class `c = 1` maps to label 0 and `c = 2` to label 1.
pub fn gen_correlated_groups(n: usize, seed: u64, layout: GroupLayout) -> Generated {
    const MU: [[f64; 3]; 2] = [[-0.3, 0.3, 1.0], [0.3, -0.3, -1.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = layout.p();
    let g = layout.group_size;
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = u8::from(rng.random_bool(0.5));
        let mu = MU[label as usize];
        let z = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        for j in 0..p {
            let e = normal(&mut rng);
            x[(i, j)] = match j / g {
                0 => mu[0] + z[0] + 0.5 * e,
                1 => mu[1] + 0.8 * z[0] + 0.6 * z[1] + 0.5 * e,
                2 => mu[2] + z[2] + 0.5 * e,
                _ => e,
            };
        }
        y.push(label);
    }
    named(x, y, layout.groups())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn col(d: &Dataset, j: usize) -> Vec<f64> {
        d.x.column(j).iter().copied().collect()
    }

    fn class_col(d: &Dataset, j: usize, label: u8) -> Vec<f64> {
        d.y.iter()
            .enumerate()
            .filter(|(_, &c)| c == label)
            .map(|(i, _)| d.x[(i, j)])
            .collect()
    }

    // Fisher-z standard error of a correlation estimate is about 1/sqrt(n-3).
    fn corr_tol(n: usize) -> f64 {
        3.0 / ((n - 3) as f64).sqrt()
    }

    #[test]
    fn standardize_hand_example() {
        let d = Dataset::new(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]), vec![0, 1, 0]).unwrap();
        let (s, t) = standardize(&d).unwrap();
        assert_eq!(col(&s, 0), vec![-1.0, 0.0, 1.0]);
        assert_eq!(t.means, vec![2.0]);
        assert_eq!(t.sds, vec![1.0]);
        assert_eq!(t.apply(&d.x).unwrap(), s.x);
    }

    #[test]
    fn constant_column_dropped() {
        let x = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 4.0]);
        let d = Dataset::new(x, vec![0, 1, 1]).unwrap();
        let (s, t) = standardize(&d).unwrap();
        assert_eq!(s.p(), 1);
        assert_eq!(t.dropped, vec![0]);
        assert_eq!(t.kept, vec![1]);
    }

    #[test]
    fn standardize_idempotent() {
        let g = gen_independent_groups(50, 1, GroupLayout { group_size: 2, n_noise: 4 });
        let (s1, _) = standardize(&g.data).unwrap();
        let (s2, _) = standardize(&s1).unwrap();
        assert!((s1.x - s2.x).abs().max() < 1e-12);
    }

    #[test]
    fn non_binary_label_rejected() {
        let err = Dataset::new(DMatrix::zeros(3, 1), vec![0, 2, 1]).unwrap_err();
        assert!(err.to_string().contains("row 2"));
    }

    #[test]
    fn toy_moments() {
        let n = 10_000;
        let g = gen_toy(n, 7);
        let r = corr(&col(&g.data, 0), &col(&g.data, 1));
        assert!((r - 0.995).abs() < 0.002, "{r}");
        for label in 0..2u8 {
            let want = 2.0 * label as f64;
            for j in 0..2 {
                let c = class_col(&g.data, j, label);
                let m = c.iter().sum::<f64>() / c.len() as f64;
                // per-class sd ~ 1, so SE ~ 1/sqrt(n/2)
                assert!((m - want).abs() < 3.0 / (c.len() as f64).sqrt(), "{m}");
            }
        }
        assert_eq!(gen_toy(100, 3).data, gen_toy(100, 3).data);
    }

    #[test]
    fn independent_groups_moments() {
        let n = 10_000;
        let layout = GroupLayout { group_size: 3, n_noise: 3 };
        let g = gen_independent_groups(n, 11, layout);
        assert_eq!(g.data.p(), 12);
        assert_eq!(g.groups, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]);
        let tol = corr_tol(n);
        let within = corr(&col(&g.data, 0), &col(&g.data, 1));
        assert!((within - 0.8).abs() < tol, "{within}");
        let cross = corr(&col(&g.data, 0), &col(&g.data, 3));
        assert!(cross.abs() < tol, "{cross}");
        let yf: Vec<f64> = g.data.y.iter().map(|&v| v as f64).collect();
        for j in 9..12 {
            assert!(corr(&col(&g.data, j), &yf).abs() < 0.05);
        }
    }

    #[test]
    fn default_layouts_have_expected_widths() {
        assert_eq!(GroupLayout::INDEPENDENT_FULL.p(), 2000);
        assert_eq!(GroupLayout::CORRELATED_FULL.p(), 2000);
        assert_eq!(GroupLayout::INDEPENDENT_DESK.p(), 200);
        assert_eq!(GroupLayout::CORRELATED_DESK.p(), 100);
        let g = gen_correlated_groups(5, 1, GroupLayout::CORRELATED_DESK);
        assert_eq!(g.data.x.shape(), (5, 100));
    }

    #[test]
    fn correlated_groups_within_class_correlations() {
        let n = 10_000;
        let layout = GroupLayout { group_size: 2, n_noise: 2 };
        let g = gen_correlated_groups(n, 5, layout);
        for label in 0..2u8 {
            let m = g.data.y.iter().filter(|&&c| c == label).count();
            let tol = corr_tol(m);
            let g1a = class_col(&g.data, 0, label);
            let g1b = class_col(&g.data, 1, label);
            let g2 = class_col(&g.data, 2, label);
            let within = corr(&g1a, &g1b);
            assert!((within - 0.8).abs() < tol, "within {within}");
            let cross = corr(&g1a, &g2);
            assert!((cross - 0.64).abs() < tol, "cross {cross}");
        }
        assert_eq!(gen_correlated_groups(30, 2, layout).data, gen_correlated_groups(30, 2, layout).data);
    }

    #[test]
    fn screen_ranks_label_copy_first() {
        let g = gen_independent_groups(60, 4, GroupLayout { group_size: 1, n_noise: 5 });
        let mut x = g.data.x.clone();
        let yf: Vec<f64> = g.data.y.iter().map(|&v| v as f64).collect();
        x.column_mut(6).copy_from_slice(&yf);
        let d = Dataset::new(x, g.data.y.clone()).unwrap();
        let ranked = marginal_screen(&d, d.p());
        assert_eq!(ranked[0], 6);
        let mut sorted = ranked.clone();
        sorted.sort();
        assert_eq!(sorted, (0..d.p()).collect::<Vec<_>>());
        assert_eq!(marginal_screen(&d, 100).len(), d.p());
    }

    #[test]
    fn screen_prefers_signal_over_noise() {
        let mut wins = 0;
        let runs = 200;
        for seed in 0..runs {
            // one strong feature (column 0) plus noise
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 100;
            let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
            let x = DMatrix::from_fn(n, 20, |i, j| {
                let e: f64 = rng.sample(StandardNormal);
                if j == 0 { 1.5 * y[i] as f64 + e } else { e }
            });
            let d = Dataset::new(x, y).unwrap();
            if marginal_screen(&d, 1) == vec![0] {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.99 * runs as f64, "{wins}/{runs}");
    }
}
