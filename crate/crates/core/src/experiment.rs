//! Simulation experiments: configuration, one replicate end to end, and
//! aggregate tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{count_used_features, default_grid, lasso_cv_select, UsedFeatures};
use crate::datagen::{gen_correlated_groups, gen_independent_groups, gen_toy, standardize, Dataset, Generated, GroupLayout};
use crate::error::{FbrhtError, Result};
use crate::evaluator::{evaluate_reports, fit_penalized_logistic, metrics, sigmoid, MetricsTriple, PlrConfig};
use crate::io::{config_digest, ConfigDigest};
use crate::math::{RobitLink, TParams};
use crate::prediction::{predict_avg, predict_with_subset, select_opt_subset, select_top_subset, Method, PredictionReport};
use crate::sampler::{run_two_stage, ModelConfig, SampleMatrix, SamplerConfig};
use crate::subsets::{extract_subsets, mode_switch_stats, ExtractConfig, FeatureSubsetReport, ModeSwitchStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Independent,
    Correlated,
}

impl FromStr for Preset {
    type Err = FbrhtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "independent" => Ok(Preset::Independent),
            "correlated" => Ok(Preset::Correlated),
            _ => Err(FbrhtError::Config(format!("unknown generator `{s}` (toy, independent, correlated)"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Independent => "independent",
            Preset::Correlated => "correlated",
        }
    }
}

/// Every setting of an experiment. Text form is one `key = value` per line;
/// `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub generator: Preset,
    pub n_train: usize,
    pub n_test: usize,
    pub layout: GroupLayout,
    pub replicates: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub plr: PlrConfig,
    pub extract: ExtractConfig,
    /// How many of the most frequent subsets get LOOCV scores.
    pub max_cv_subsets: usize,
    pub lasso_folds: usize,
    pub lasso_grid_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for a generator.
    pub fn preset(generator: Preset) -> Self {
        let (n_train, layout) = match generator {
            Preset::Toy => (100, GroupLayout { group_size: 2, n_noise: 0 }),
            Preset::Independent => (200, GroupLayout::INDEPENDENT_DESK),
            Preset::Correlated => (200, GroupLayout::CORRELATED_DESK),
        };
        let mut sampler = SamplerConfig::default();
        if generator == Preset::Toy {
            // With two features a 10% update set holds a single feature and
            // the other one never moves.
            sampler.update_fraction = 1.0;
        }
        Self {
            generator,
            n_train,
            n_test: 1000,
            layout,
            replicates: 1,
            seed: 1,
            model: ModelConfig::default(),
            sampler,
            plr: PlrConfig::default(),
            extract: ExtractConfig::default(),
            max_cv_subsets: 10,
            lasso_folds: 10,
            lasso_grid_size: 100,
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "generator",
        "n_train",
        "n_test",
        "group_size",
        "n_noise",
        "replicates",
        "seed",
        "alpha0",
        "omega0",
        "alpha1",
        "log_omega1",
        "intercept_variance",
        "epsilon_adjust",
        "l_burnin",
        "l_sampling",
        "update_fraction",
        "n_burnin_iters",
        "n_sampling_iters",
        "thin",
        "p_star",
        "full_recompute",
        "step_rule",
        "plr_prior_df",
        "plr_prior_scale",
        "plr_intercept_scale",
        "plr_max_iters",
        "plr_tol",
        "rel_threshold",
        "min_freq",
        "max_cv_subsets",
        "lasso_folds",
        "lasso_grid_size",
    ];

    /// Set one key. `generator` resets the scale-dependent defaults, so it
    /// should come first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| FbrhtError::Config(format!("bad value `{value}` for `{key}`")))
        }
        let v = value.trim();
        match key {
            "generator" => {
                let g: Preset = v.parse()?;
                if g != self.generator {
                    let keep = self.clone();
                    *self = Self::preset(g);
                    self.seed = keep.seed;
                    self.replicates = keep.replicates;
                }
            }
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "group_size" => self.layout.group_size = parse(key, v)?,
            "n_noise" => self.layout.n_noise = parse(key, v)?,
            "replicates" => self.replicates = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "alpha0" => self.model.likelihood = TParams::new(parse(key, v)?, self.model.likelihood.omega())?,
            "omega0" => self.model.likelihood = TParams::new(self.model.likelihood.alpha(), parse(key, v)?)?,
            "alpha1" => self.model.prior = TParams::new(parse(key, v)?, self.model.prior.omega())?,
            "log_omega1" => {
                let lw: f64 = parse(key, v)?;
                self.model.prior = TParams::new(self.model.prior.alpha(), lw.exp())?;
            }
            "intercept_variance" => self.model.intercept_variance = parse(key, v)?,
            "epsilon_adjust" => self.sampler.epsilon_adjust = parse(key, v)?,
            "l_burnin" => self.sampler.l_burnin = parse(key, v)?,
            "l_sampling" => self.sampler.l_sampling = parse(key, v)?,
            "update_fraction" => self.sampler.update_fraction = parse(key, v)?,
            "n_burnin_iters" => self.sampler.n_burnin_iters = parse(key, v)?,
            "n_sampling_iters" => self.sampler.n_sampling_iters = parse(key, v)?,
            "thin" => self.sampler.thin = parse(key, v)?,
            "p_star" => self.sampler.p_star = parse(key, v)?,
            "full_recompute" => self.sampler.full_recompute = parse(key, v)?,
            "step_rule" => self.sampler.step_rule = v.parse()?,
            "plr_prior_df" => self.plr.prior_df = parse(key, v)?,
            "plr_prior_scale" => self.plr.prior_scale = parse(key, v)?,
            "plr_intercept_scale" => self.plr.intercept_scale = parse(key, v)?,
            "plr_max_iters" => self.plr.max_iters = parse(key, v)?,
            "plr_tol" => self.plr.tol = parse(key, v)?,
            "rel_threshold" => self.extract.rel_threshold = parse(key, v)?,
            "min_freq" => self.extract.min_freq = parse(key, v)?,
            "max_cv_subsets" => self.max_cv_subsets = parse(key, v)?,
            "lasso_folds" => self.lasso_folds = parse(key, v)?,
            "lasso_grid_size" => self.lasso_grid_size = parse(key, v)?,
            _ => return Err(FbrhtError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines into `(key, value)` pairs.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FbrhtError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Apply pairs, `generator` first so later keys refine its preset.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "generator") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "generator") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_pairs(&Self::parse_pairs(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        let s = &self.sampler;
        match key {
            "generator" => self.generator.name().into(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "group_size" => self.layout.group_size.to_string(),
            "n_noise" => self.layout.n_noise.to_string(),
            "replicates" => self.replicates.to_string(),
            "seed" => self.seed.to_string(),
            "alpha0" => m.likelihood.alpha().to_string(),
            "omega0" => m.likelihood.omega().to_string(),
            "alpha1" => m.prior.alpha().to_string(),
            "log_omega1" => m.prior.omega().ln().to_string(),
            "intercept_variance" => m.intercept_variance.to_string(),
            "epsilon_adjust" => s.epsilon_adjust.to_string(),
            "l_burnin" => s.l_burnin.to_string(),
            "l_sampling" => s.l_sampling.to_string(),
            "update_fraction" => s.update_fraction.to_string(),
            "n_burnin_iters" => s.n_burnin_iters.to_string(),
            "n_sampling_iters" => s.n_sampling_iters.to_string(),
            "thin" => s.thin.to_string(),
            "p_star" => s.p_star.to_string(),
            "full_recompute" => s.full_recompute.to_string(),
            "step_rule" => s.step_rule.name().into(),
            "plr_prior_df" => self.plr.prior_df.to_string(),
            "plr_prior_scale" => self.plr.prior_scale.to_string(),
            "plr_intercept_scale" => self.plr.intercept_scale.to_string(),
            "plr_max_iters" => self.plr.max_iters.to_string(),
            "plr_tol" => self.plr.tol.to_string(),
            "rel_threshold" => self.extract.rel_threshold.to_string(),
            "min_freq" => self.extract.min_freq.to_string(),
            "max_cv_subsets" => self.max_cv_subsets.to_string(),
            "lasso_folds" => self.lasso_folds.to_string(),
            "lasso_grid_size" => self.lasso_grid_size.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// All settings as `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }

    /// Digest of the settings that determine the posterior draws.
    pub fn sampling_digest(&self) -> ConfigDigest {
        const SAMPLING_KEYS: &[&str] = &[
            "alpha0",
            "omega0",
            "alpha1",
            "log_omega1",
            "intercept_variance",
            "epsilon_adjust",
            "l_burnin",
            "l_sampling",
            "update_fraction",
            "n_burnin_iters",
            "n_sampling_iters",
            "thin",
            "p_star",
            "full_recompute",
            "step_rule",
        ];
        let text: String = SAMPLING_KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect();
        config_digest(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.plr.validate()?;
        if self.n_train < 3 {
            return Err(FbrhtError::Config(format!("n_train must be at least 3, got {}", self.n_train)));
        }
        if self.replicates == 0 {
            return Err(FbrhtError::Config("replicates must be positive".into()));
        }
        if self.generator != Preset::Toy && self.layout.group_size == 0 {
            return Err(FbrhtError::Config("group_size must be positive".into()));
        }
        if !(self.model.intercept_variance > 0.0) {
            return Err(FbrhtError::Config("intercept_variance must be positive".into()));
        }
        if self.lasso_folds < 2 || self.lasso_grid_size == 0 {
            return Err(FbrhtError::Config("lasso_folds must be at least 2 and lasso_grid_size positive".into()));
        }
        if !(self.extract.rel_threshold >= 0.0 && (0.0..=1.0).contains(&self.extract.min_freq)) {
            return Err(FbrhtError::Config("rel_threshold must be nonnegative and min_freq in [0, 1]".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the simulated data for a replicate.
pub fn data_seed(seed: u64, replicate: usize) -> u64 {
    splitmix64(seed.wrapping_add(replicate as u64))
}

/// Seed of the Markov chain for a replicate.
pub fn chain_seed(seed: u64, replicate: usize) -> u64 {
    splitmix64(data_seed(seed, replicate))
}

pub fn generate(cfg: &ExperimentConfig, n: usize, seed: u64) -> Generated {
    match cfg.generator {
        Preset::Toy => gen_toy(n, seed),
        Preset::Independent => gen_independent_groups(n, seed, cfg.layout),
        Preset::Correlated => gen_correlated_groups(n, seed, cfg.layout),
    }
}

/// Standardized training and test sets with their feature groups.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Group of each retained column.
    pub groups: Vec<usize>,
}

/// Simulate `n_train + n_test` cases, standardize the training part and
/// apply the same transform to the test part.
pub fn simulate_split(cfg: &ExperimentConfig, replicate: usize) -> Result<Split> {
    let full = generate(cfg, cfg.n_train + cfg.n_test, data_seed(cfg.seed, replicate));
    let raw_train = full.data.rows(0, cfg.n_train);
    let raw_test = full.data.rows(cfg.n_train, cfg.n_train + cfg.n_test);
    let (train, st) = standardize(&raw_train)?;
    let mut test = Dataset::new(st.apply(&raw_test.x)?, raw_test.y.clone())?;
    test.feature_names = train.feature_names.clone();
    let groups = st.kept.iter().map(|&j| full.groups[j]).collect();
    Ok(Split { train, test, groups })
}

/// Per-feature-group counts of a subset, keyed by group label.
pub fn group_counts(features: &[usize], groups: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &f in features {
        *m.entry(groups[f - 1]).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineResult {
    pub method: String,
    pub metrics: MetricsTriple,
    pub used: UsedFeatures,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub data_seed: u64,
    pub accept_rate: f64,
    pub selected: Vec<usize>,
    pub subsets: Vec<FeatureSubsetReport>,
    pub predictions: Vec<PredictionReport>,
    pub baselines: Vec<BaselineResult>,
    pub mode_switching: Option<ModeSwitchStats>,
    /// Retained draws in stage 2.
    pub draws: usize,
    pub groups: Vec<usize>,
}

impl ReplicateResult {
    pub fn prediction(&self, method: Method) -> Option<&PredictionReport> {
        self.predictions.iter().find(|p| p.method == method)
    }
}

/// Draws for one replicate on already-split data.
pub fn sample_posterior(cfg: &ExperimentConfig, train: &Dataset, replicate: usize) -> Result<SampleMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(cfg.seed, replicate));
    Ok(run_two_stage(train, &cfg.model, &cfg.sampler, &mut rng)?.stage2)
}

/// Subsets from draws with LOOCV scores on the most frequent ones, plus the
/// per-draw subset sequence for mode switching.
pub fn subsets_from_samples(
    cfg: &ExperimentConfig,
    train: &Dataset,
    samples: &SampleMatrix,
) -> Result<(Vec<FeatureSubsetReport>, Option<ModeSwitchStats>)> {
    let (mut reports, ind) = extract_subsets(&samples.draws, &samples.feature_ids, &cfg.extract)?;
    evaluate_reports(train, &mut reports, cfg.max_cv_subsets, &cfg.plr)?;
    let sequence = ind.column_sets();
    let stats = mode_switch_stats(&sequence).ok();
    Ok((reports, stats))
}

/// FBRHT predictions on the test set: posterior average, top and optimal
/// subset refits.
pub fn fbrht_predictions(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    samples: &SampleMatrix,
    reports: &[FeatureSubsetReport],
) -> Result<Vec<PredictionReport>> {
    let labels = Some(test.y.as_slice());
    let link = RobitLink::new(cfg.model.likelihood);
    let mut out = vec![PredictionReport {
        method: Method::Avg,
        probs: predict_avg(samples, &test.x, &link)?,
        metrics: None,
        n_features_used: samples.p(),
        features: samples.feature_ids.clone(),
    }
    .score(labels)?];
    for (method, pick) in [(Method::Top, select_top_subset(reports)), (Method::Opt, select_opt_subset(reports))] {
        if let Some(rep) = pick {
            out.push(
                PredictionReport {
                    method,
                    probs: predict_with_subset(train, &rep.features, &test.x, &cfg.plr)?,
                    metrics: None,
                    n_features_used: rep.features.len(),
                    features: rep.features.clone(),
                }
                .score(labels)?,
            );
        }
    }
    Ok(out)
}

/// LASSO with cross-validated penalty and the t-prior logistic fit on all
/// features.
pub fn baseline_results(cfg: &ExperimentConfig, split: &Split, replicate: usize) -> Result<Vec<BaselineResult>> {
    let Split { train, test, groups } = split;
    let path = lasso_cv_select(
        &train.x,
        &train.y,
        &default_grid(cfg.lasso_grid_size),
        cfg.lasso_folds,
        chain_seed(cfg.seed, replicate) ^ 0x4C41_5353_4F00_0000,
    )?;
    let coef = path.best_coef();
    let probs: Vec<f64> = (0..test.n())
        .map(|i| sigmoid(coef[0] + (0..test.p()).map(|j| test.x[(i, j)] * coef[j + 1]).sum::<f64>()))
        .collect();
    let lasso = BaselineResult {
        method: "lasso".into(),
        metrics: metrics(&probs, &test.y)?,
        used: count_used_features(&coef[1..], cfg.extract.rel_threshold, Some(groups))?,
    };
    let fit = fit_penalized_logistic(&train.x, &train.y, &cfg.plr)?;
    let plr = BaselineResult {
        method: "plr".into(),
        metrics: metrics(&fit.predict(&test.x), &test.y)?,
        used: count_used_features(&fit.coef[1..], cfg.extract.rel_threshold, Some(groups))?,
    };
    Ok(vec![lasso, plr])
}

/// One replicate end to end.
pub fn run_replicate(cfg: &ExperimentConfig, replicate: usize) -> Result<ReplicateResult> {
    cfg.validate()?;
    let split = simulate_split(cfg, replicate)?;
    let samples = sample_posterior(cfg, &split.train, replicate)?;
    let (subsets, mode_switching) = subsets_from_samples(cfg, &split.train, &samples)?;
    let predictions = fbrht_predictions(cfg, &split.train, &split.test, &samples, &subsets)?;
    let baselines = baseline_results(cfg, &split, replicate)?;
    Ok(ReplicateResult {
        replicate,
        data_seed: data_seed(cfg.seed, replicate),
        accept_rate: samples.accept_rate,
        selected: samples.feature_ids.clone(),
        subsets,
        predictions,
        baselines,
        mode_switching,
        draws: samples.iterations_kept(),
        groups: split.groups,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "Inf".into(),
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    }
}

/// Subset table: ID, features with their groups, frequency and cv metrics.
pub fn subset_table(reports: &[FeatureSubsetReport], groups: Option<&[usize]>, max_rows: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>4}  {:<28} {:<16} {:>6} {:>7} {:>7} {:>7}", "id", "features", "groups", "freq", "cvER", "cvAMLP", "cvAUC");
    for (k, r) in reports.iter().take(max_rows).enumerate() {
        let g = groups
            .map(|g| r.features.iter().map(|&f| g[f - 1].to_string()).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{:>4}  {:<28} {:<16} {:>6.3} {:>7} {:>7} {:>7}",
            k + 1,
            r.label(),
            g,
            r.freq,
            fmt_opt(r.cv_er),
            fmt_opt(r.cv_amlp),
            fmt_opt(r.cv_auc)
        );
    }
    s
}

/// Mean metrics per method over replicates, with mean feature counts.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub er: f64,
    pub amlp: f64,
    pub auc: f64,
    pub n_features: f64,
    pub replicates: usize,
}

pub fn aggregate(results: &[ReplicateResult]) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    let mut push = |method: String, entries: Vec<(MetricsTriple, usize)>| {
        if entries.is_empty() {
            return;
        }
        let k = entries.len() as f64;
        rows.push(AggregateRow {
            method,
            er: entries.iter().map(|e| e.0.er).sum::<f64>() / k,
            amlp: entries.iter().map(|e| e.0.amlp).sum::<f64>() / k,
            auc: entries.iter().map(|e| e.0.auc).sum::<f64>() / k,
            n_features: entries.iter().map(|e| e.1 as f64).sum::<f64>() / k,
            replicates: entries.len(),
        });
    };
    for m in [Method::Avg, Method::Top, Method::Opt] {
        let entries = results
            .iter()
            .filter_map(|r| r.prediction(m).and_then(|p| p.metrics.map(|mt| (mt, p.n_features_used))))
            .collect();
        push(format!("fbrht_{}", m.name()), entries);
    }
    for name in ["lasso", "plr"] {
        let entries = results
            .iter()
            .filter_map(|r| r.baselines.iter().find(|b| b.method == name).map(|b| (b.metrics, b.used.total)))
            .collect();
        push(name.to_string(), entries);
    }
    rows
}

pub fn aggregate_table(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7} {:>9}", "method", "ER", "AMLP", "AUC", "features");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>7.3} {:>7} {:>7.3} {:>9.1}",
            r.method,
            r.er,
            fmt_opt(Some(r.amlp)),
            r.auc,
            r.n_features
        );
    }
    s
}
