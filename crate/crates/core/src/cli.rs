//! Command-line front end.
//!
//! Every command writes into `--out` (default `.`). Human-readable tables go
//! to `*.txt` files and stdout, structured records to `*.jsonl` with one JSON
//! object per line. Files written by a command that later fails are removed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::datagen::{standardize, Dataset, Standardization};
use crate::error::{FbrhtError, Result};
use crate::evaluator::evaluate_reports;
use crate::experiment::{
    aggregate, aggregate_table, chain_seed, fbrht_predictions, group_counts, run_replicate, simulate_split, subset_table,
    ExperimentConfig, ReplicateResult,
};
use crate::io::{load_csv, read_samples, save_csv, write_atomic, write_samples, SampleHeader};
use crate::prediction::{Method, PredictionReport};
use crate::sampler::{run_two_stage, SampleMatrix};
use crate::subsets::{extract_subsets, mode_switch_stats, FeatureSubsetReport};

#[derive(Debug, Parser)]
#[command(name = "fbrht", version, about = "Bayesian Robit classification with heavy-tailed priors")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "FBRHT_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub scale: ScaleArgs,
    /// Override any configuration key, e.g. `--set epsilon_adjust=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// toy, independent or correlated.
    #[arg(long, global = true)]
    pub generator: Option<String>,
    #[arg(long, global = true)]
    pub n_train: Option<usize>,
    #[arg(long, global = true)]
    pub n_test: Option<usize>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    #[arg(long, global = true)]
    pub n_noise: Option<usize>,
    #[arg(long, global = true)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a standardized train/test pair of simulated datasets.
    Simulate {
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Sample the posterior for a training CSV and store the draws.
    Fit {
        #[arg(long)]
        train: PathBuf,
    },
    /// Feature subsets from stored draws.
    Extract {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Feature subsets with leave-one-out scores on the training data.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        train: PathBuf,
    },
    /// Posterior-average, top-subset and optimal-subset predictions.
    Predict {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Simulated replicates end to end with baselines and aggregate tables.
    Benchmark,
}

/// Build the configuration: defaults, then the file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut pairs = match &cli.config {
        Some(path) => ExperimentConfig::parse_pairs(&fs::read_to_string(path)?)?,
        None => Vec::new(),
    };
    let s = &cli.scale;
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("generator", s.generator.clone());
    flag("n_train", s.n_train.map(|v| v.to_string()));
    flag("n_test", s.n_test.map(|v| v.to_string()));
    flag("group_size", s.group_size.map(|v| v.to_string()));
    flag("n_noise", s.n_noise.map(|v| v.to_string()));
    flag("replicates", s.replicates.map(|v| v.to_string()));
    flag("seed", cli.seed.map(|v| v.to_string()));
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| FbrhtError::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = ExperimentConfig::default();
    cfg.apply_pairs(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Files written so far; removed if the command fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, content: &str) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, content.as_bytes())
    }

    fn jsonl(&mut self, name: &str, records: &[serde_json::Value]) -> Result<()> {
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(r).map_err(|e| FbrhtError::Data(e.to_string()))?);
            s.push('\n');
        }
        self.text(name, &s)
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

/// Standardize `x` with a training transform, keeping every original column;
/// dropped (constant) columns become zero.
fn standardize_full(x: &DMatrix<f64>, st: &Standardization) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (k, &j) in st.kept.iter().enumerate() {
        for i in 0..x.nrows() {
            out[(i, j)] = (x[(i, j)] - st.means[k]) / st.sds[k];
        }
    }
    out
}

/// Training data standardized in place of its own columns, plus the transform.
fn prepare_train(path: &Path) -> Result<(Dataset, Standardization)> {
    let raw = load_csv(path)?;
    let (_, st) = standardize(&raw)?;
    let mut data = Dataset::new(standardize_full(&raw.x, &st), raw.y.clone())?;
    data.feature_names = raw.feature_names.clone();
    Ok((data, st))
}

fn prepare_test(path: &Path, st: &Standardization, p: usize) -> Result<Dataset> {
    let raw = load_csv(path)?;
    if raw.p() != p {
        return Err(FbrhtError::Shape(format!("test data has {} features, training data {p}", raw.p())));
    }
    Dataset::new(standardize_full(&raw.x, st), raw.y)
}

fn subset_records(reports: &[FeatureSubsetReport], replicate: Option<usize>, groups: Option<&[usize]>) -> Vec<serde_json::Value> {
    reports
        .iter()
        .enumerate()
        .map(|(k, r)| {
            json!({
                "record": "subset",
                "replicate": replicate,
                "rank": k + 1,
                "features": r.features,
                "groups": groups.map(|g| r.features.iter().map(|&f| g[f - 1]).collect::<Vec<_>>()),
                "freq": r.freq,
                "cv_er": r.cv_er,
                "cv_amlp": r.cv_amlp,
                "cv_auc": r.cv_auc,
            })
        })
        .collect()
}

fn prediction_record(p: &PredictionReport, replicate: Option<usize>) -> serde_json::Value {
    json!({
        "record": "prediction",
        "replicate": replicate,
        "method": p.method.name(),
        "features": if p.method == Method::Avg { None } else { Some(&p.features) },
        "n_features": p.n_features_used,
        "er": p.metrics.map(|m| m.er),
        "amlp": p.metrics.map(|m| m.amlp),
        "auc": p.metrics.map(|m| m.auc),
    })
}

fn prediction_table(preds: &[PredictionReport]) -> String {
    let mut s = format!("{:<10} {:>9} {:>7} {:>7} {:>7}  features\n", "method", "n_feat", "ER", "AMLP", "AUC");
    for p in preds {
        let (er, amlp, auc) = match p.metrics {
            Some(m) => (format!("{:.3}", m.er), format!("{:.3}", m.amlp), format!("{:.3}", m.auc)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let feats = if p.method == Method::Avg {
            String::new()
        } else {
            p.features.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",")
        };
        s.push_str(&format!("{:<10} {:>9} {:>7} {:>7} {:>7}  {}\n", p.method.name(), p.n_features_used, er, amlp, auc, feats));
    }
    s
}

fn read_checked(path: &Path, cfg: &ExperimentConfig) -> Result<SampleMatrix> {
    Ok(read_samples(path, Some(&cfg.sampling_digest()))?.0)
}

fn cmd_simulate(cfg: &ExperimentConfig, replicate: usize, out: &mut Outputs) -> Result<String> {
    let split = simulate_split(cfg, replicate)?;
    save_csv(&out.path("train.csv"), &split.train)?;
    save_csv(&out.path("test.csv"), &split.test)?;
    let groups: Vec<_> = split
        .groups
        .iter()
        .enumerate()
        .map(|(j, g)| json!({"record": "feature", "feature": j + 1, "group": g}))
        .collect();
    out.jsonl("groups.jsonl", &groups)?;
    Ok(format!(
        "wrote {} training and {} test cases with {} features\n",
        split.train.n(),
        split.test.n(),
        split.train.p()
    ))
}

fn cmd_fit(cfg: &ExperimentConfig, train: &Path, out: &mut Outputs) -> Result<String> {
    let (data, st) = prepare_train(train)?;
    let reduced = data.select_columns(&st.kept);
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(cfg.seed, 0));
    let result = run_two_stage(&reduced, &cfg.model, &cfg.sampler, &mut rng)?;
    let mut samples = result.stage2;
    samples.feature_ids = samples.feature_ids.iter().map(|&f| st.kept[f - 1] + 1).collect();
    write_samples(
        &out.path("samples.bin"),
        &samples,
        &SampleHeader { seed: cfg.seed, digest: cfg.sampling_digest() },
    )?;
    let summary = json!({
        "record": "fit",
        "n": data.n(),
        "p": data.p(),
        "dropped_constant": st.dropped.iter().map(|j| j + 1).collect::<Vec<_>>(),
        "stage1": result.stage1_means.is_some(),
        "selected": samples.feature_ids,
        "draws": samples.iterations_kept(),
        "accept_rate": samples.accept_rate,
    });
    out.jsonl("fit.jsonl", &[summary])?;
    Ok(format!(
        "kept {} draws of {} features, acceptance {:.3}\n",
        samples.iterations_kept(),
        samples.p(),
        samples.accept_rate
    ))
}

fn extract_with_stats(cfg: &ExperimentConfig, samples: &SampleMatrix) -> Result<(Vec<FeatureSubsetReport>, Option<serde_json::Value>)> {
    let (reports, ind) = extract_subsets(&samples.draws, &samples.feature_ids, &cfg.extract)?;
    let stats = mode_switch_stats(&ind.column_sets()).ok().map(|s| {
        json!({"record": "mode_switching", "replicate": null, "switch_count": s.switch_count,
               "n_unique_modes": s.n_unique_modes, "draws": samples.iterations_kept()})
    });
    Ok((reports, stats))
}

fn cmd_extract(cfg: &ExperimentConfig, samples: &Path, out: &mut Outputs) -> Result<String> {
    let samples = read_checked(samples, cfg)?;
    let (reports, stats) = extract_with_stats(cfg, &samples)?;
    let table = subset_table(&reports, None, reports.len());
    out.text("subsets.txt", &table)?;
    let mut records = subset_records(&reports, None, None);
    records.extend(stats);
    out.jsonl("subsets.jsonl", &records)?;
    Ok(table)
}

fn cmd_evaluate(cfg: &ExperimentConfig, samples: &Path, train: &Path, out: &mut Outputs) -> Result<String> {
    let samples = read_checked(samples, cfg)?;
    let (data, _) = prepare_train(train)?;
    let (mut reports, _) = extract_with_stats(cfg, &samples)?;
    evaluate_reports(&data, &mut reports, cfg.max_cv_subsets, &cfg.plr)?;
    let table = subset_table(&reports, None, reports.len());
    out.text("subsets_cv.txt", &table)?;
    out.jsonl("subsets_cv.jsonl", &subset_records(&reports, None, None))?;
    Ok(table)
}

fn cmd_predict(cfg: &ExperimentConfig, samples: &Path, train: &Path, test: &Path, out: &mut Outputs) -> Result<String> {
    let samples = read_checked(samples, cfg)?;
    let (data, st) = prepare_train(train)?;
    let test = prepare_test(test, &st, data.p())?;
    let (mut reports, _) = extract_with_stats(cfg, &samples)?;
    evaluate_reports(&data, &mut reports, cfg.max_cv_subsets, &cfg.plr)?;
    let preds = fbrht_predictions(cfg, &data, &test, &samples, &reports)?;
    let table = prediction_table(&preds);
    out.text("predictions.txt", &table)?;
    let mut records: Vec<_> = preds.iter().map(|p| prediction_record(p, None)).collect();
    for p in &preds {
        for (i, prob) in p.probs.iter().enumerate() {
            records.push(json!({"record": "probability", "method": p.method.name(), "case": i + 1, "p1": prob}));
        }
    }
    out.jsonl("predictions.jsonl", &records)?;
    Ok(table)
}

fn replicate_records(r: &ReplicateResult) -> Vec<serde_json::Value> {
    let mut recs = subset_records(&r.subsets, Some(r.replicate), Some(&r.groups));
    for p in &r.predictions {
        let mut rec = prediction_record(p, Some(r.replicate));
        if p.method != Method::Avg {
            rec["group_counts"] = json!(group_counts(&p.features, &r.groups));
        }
        recs.push(rec);
    }
    for b in &r.baselines {
        recs.push(json!({
            "record": "baseline", "replicate": r.replicate, "method": b.method,
            "er": b.metrics.er, "amlp": b.metrics.amlp, "auc": b.metrics.auc,
            "n_features": b.used.total, "group_counts": b.used.per_group,
        }));
    }
    if let Some(s) = r.mode_switching {
        recs.push(json!({
            "record": "mode_switching", "replicate": r.replicate, "switch_count": s.switch_count,
            "n_unique_modes": s.n_unique_modes, "draws": r.draws,
        }));
    }
    recs.push(json!({"record": "replicate", "replicate": r.replicate, "data_seed": r.data_seed, "accept_rate": r.accept_rate}));
    recs
}

#[derive(Serialize)]
struct AggregateRecord<'a> {
    record: &'static str,
    #[serde(flatten)]
    row: &'a crate::experiment::AggregateRow,
}

fn cmd_benchmark(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<String> {
    let results: Vec<ReplicateResult> =
        (0..cfg.replicates).into_par_iter().map(|r| run_replicate(cfg, r)).collect::<Result<_>>()?;
    let mut text = format!(
        "generator {}  n_train {}  n_test {}  p {}  replicates {}\n\n",
        cfg.generator.name(),
        cfg.n_train,
        cfg.n_test,
        results[0].groups.len(),
        cfg.replicates
    );
    let mut records = Vec::new();
    for r in &results {
        text.push_str(&format!("replicate {}  (acceptance {:.3})\n", r.replicate, r.accept_rate));
        text.push_str(&subset_table(&r.subsets, Some(&r.groups), cfg.max_cv_subsets));
        text.push('\n');
        text.push_str(&prediction_table(&r.predictions));
        text.push('\n');
        records.extend(replicate_records(r));
    }
    let rows = aggregate(&results);
    text.push_str("mean over replicates\n");
    text.push_str(&aggregate_table(&rows));
    for row in &rows {
        records.push(serde_json::to_value(AggregateRecord { record: "aggregate", row }).map_err(|e| FbrhtError::Data(e.to_string()))?);
    }
    out.text("benchmark.txt", &text)?;
    out.jsonl("benchmark.jsonl", &records)?;
    out.text("config.txt", &cfg.to_text())?;
    Ok(text)
}

/// Run a parsed command line; returns the text report.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli)?;
    let mut out = Outputs::new(&cli.out)?;
    let result = match &cli.command {
        Command::Simulate { replicate } => cmd_simulate(&cfg, *replicate, &mut out),
        Command::Fit { train } => cmd_fit(&cfg, train, &mut out),
        Command::Extract { samples } => cmd_extract(&cfg, samples, &mut out),
        Command::Evaluate { samples, train } => cmd_evaluate(&cfg, samples, train, &mut out),
        Command::Predict { samples, train, test } => cmd_predict(&cfg, samples, train, test, &mut out),
        Command::Benchmark => cmd_benchmark(&cfg, &mut out),
    };
    if result.is_err() {
        out.discard();
    }
    result
}

/// Install the worker pool. Only the first call in a process takes effect.
pub fn init_workers(workers: Option<usize>) -> Result<()> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(FbrhtError::Config("--workers must be positive".into()));
        }
        b = b.num_threads(n);
    }
    let _ = b.build_global();
    Ok(())
}
