//! End-to-end runs: holdout split, selection, training and evaluation,
//! repeated over derived seeds and summarized.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centrality_selector::{
    distill, ClassSelection, DistillConfig, DistilledSelection, Scalarization, SelectionMetric,
};
use crate::community_optimizer::OptimizerConfig;
use crate::distilled_trainer::{train_on_ids, Classifier, LossConfig};
use crate::embedding_io::{
    encode, generate_fixture, read_csv, read_embeddings, EmbeddingSet, FixtureSpec,
};
use crate::error::{Error, Result};
use crate::eval_metrics::EvalReport;
use crate::graph_builder::GraphConfig;
use crate::map_equation::FlowParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    InfoDist,
    Random,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::InfoDist => "infodist",
            SelectionMode::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Embedding file (binary interchange format, or `.csv`).
    pub input: Option<PathBuf>,
    pub fixture: Option<FixtureSpec>,
    pub graph: GraphConfig,
    pub teleport: f64,
    pub seed: u64,
    pub metric: SelectionMetric,
    pub scalarization: Scalarization,
    pub per_class: usize,
    pub loss: LossConfig,
    pub runs: usize,
    pub test_fraction: f64,
    pub l2_normalize: bool,
    pub parallel_runs: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: None,
            fixture: None,
            graph: GraphConfig::default(),
            teleport: FlowParams::default().teleport,
            seed: 0,
            metric: SelectionMetric::default(),
            scalarization: Scalarization::default(),
            per_class: 100,
            loss: LossConfig::default(),
            runs: 5,
            test_fraction: 0.2,
            l2_normalize: false,
            parallel_runs: false,
            output_dir: None,
        }
    }
}

impl FromStr for PipelineConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .parse()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.input, &self.fixture) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either an input file or a fixture, not both".into(),
                ))
            }
            (None, None) => return Err(Error::Config("no input file or fixture given".into())),
            _ => {}
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be positive".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.teleport) {
            return Err(Error::Config(format!(
                "teleport must be in [0, 1], got {}",
                self.teleport
            )));
        }
        self.loss.validate()
    }

    pub fn distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            graph: self.graph,
            flow: FlowParams {
                teleport: self.teleport,
                ..FlowParams::default()
            },
            optimizer: OptimizerConfig {
                seed,
                ..OptimizerConfig::default()
            },
            metric: self.metric,
            scalarization: self.scalarization,
            per_class: self.per_class,
        }
    }

    pub fn loss_config(&self, seed: u64) -> LossConfig {
        LossConfig { seed, ..self.loss }
    }

    /// Hash of the fields that determine results; where artifacts go and
    /// whether runs execute in parallel are left out.
    pub fn result_hash(&self) -> Result<String> {
        let canonical = PipelineConfig {
            output_dir: None,
            parallel_runs: false,
            ..self.clone()
        };
        Ok(short_hash(&[&json_bytes(&canonical)?]))
    }

    /// Seed used by run `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed ^ run as u64
    }

    /// The embedding pool named by the config, normalized if requested.
    pub fn load_pool(&self) -> Result<EmbeddingSet> {
        let set = match (&self.input, &self.fixture) {
            (Some(path), None) => read_pool(path)?,
            (None, Some(spec)) => generate_fixture(spec)?,
            _ => {
                self.validate()?;
                unreachable!()
            }
        };
        Ok(if self.l2_normalize {
            set.l2_normalized()
        } else {
            set
        })
    }
}

/// Reads `.csv` files as CSV and anything else as the binary format.
pub fn read_pool(path: &Path) -> Result<EmbeddingSet> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_csv(path, None),
        _ => read_embeddings(path),
    }
}

/// A stratified holdout split. `train_ids[k]` is the pool id of item `k` of
/// `train`, likewise for `test`.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

pub fn holdout_split(set: &EmbeddingSet, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    set.require_class_sizes(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for label in 0..set.num_classes {
        let mut ids = set.class_ids(label);
        ids.shuffle(&mut rng);
        let n_test = ((test_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        test_ids.extend_from_slice(&ids[..n_test]);
        train_ids.extend_from_slice(&ids[n_test..]);
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(Split {
        train: set.subset(&train_ids),
        test: set.subset(&test_ids),
        train_ids,
        test_ids,
    })
}

/// `n` ids per class drawn uniformly without replacement.
pub fn random_selection(set: &EmbeddingSet, n: usize, seed: u64) -> Result<DistilledSelection> {
    set.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    set.require_class_sizes(n)?;
    let classes = (0..set.num_classes)
        .map(|label| {
            let ids = set.class_ids(label);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ label as u64);
            let mut selected: Vec<usize> = index::sample(&mut rng, ids.len(), n)
                .into_iter()
                .map(|k| ids[k])
                .collect();
            selected.sort_unstable();
            ClassSelection {
                class_label: label,
                selected,
                quotas: vec![n],
                community_sizes: vec![ids.len()],
                codelength: 0.0,
                edges: 0,
            }
        })
        .collect();
    Ok(DistilledSelection {
        total_per_class: n,
        classes,
    })
}

/// Rewrites the ids of a selection made on `split.train` into pool ids.
fn to_pool_ids(selection: &mut DistilledSelection, train_ids: &[usize]) {
    for class in &mut selection.classes {
        class
            .selected
            .iter_mut()
            .for_each(|id| *id = train_ids[*id]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
}

impl From<&EvalReport> for MetricRow {
    fn from(r: &EvalReport) -> Self {
        MetricRow {
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            macro_auc: r.macro_auc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub selected: usize,
    pub report: EvalReport,
    pub selection_file: Option<String>,
    pub model_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: SelectionMode,
    pub config_hash: String,
    pub train_items: usize,
    pub test_items: usize,
    pub runs: Vec<RunRecord>,
    pub mean: MetricRow,
    /// Sample standard deviation, 0 for a single run.
    pub std: MetricRow,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Summary {
    pub fn rows(&self) -> Vec<MetricRow> {
        self.runs
            .iter()
            .map(|r| MetricRow::from(&r.report))
            .collect()
    }

    fn aggregate(rows: &[MetricRow]) -> (MetricRow, MetricRow) {
        let col = |f: fn(&MetricRow) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
        let (acc, f1, auc) = (
            col(|r| r.accuracy),
            col(|r| r.macro_f1),
            col(|r| r.macro_auc),
        );
        (
            MetricRow {
                accuracy: acc.0,
                macro_f1: f1.0,
                macro_auc: auc.0,
            },
            MetricRow {
                accuracy: acc.1,
                macro_f1: f1.1,
                macro_auc: auc.1,
            },
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fixed-width table of the per-run rows followed by mean and std.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        let _ = writeln!(
            out,
            "{:<6} {:>20} {:>9} {:>10} {:>10} {:>10}",
            "run", "seed", "selected", "accuracy", "macro_f1", "macro_auc"
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:<6} {:>20} {:>9} {:>10.4} {:>10.4} {:>10.4}",
                r.run, r.seed, r.selected, r.report.accuracy, r.report.macro_f1, r.report.macro_auc
            );
        }
        for (name, row) in [("mean", &self.mean), ("std", &self.std)] {
            let _ = writeln!(
                out,
                "{:<6} {:>20} {:>9} {:>10.4} {:>10.4} {:>10.4}",
                name, "", "", row.accuracy, row.macro_f1, row.macro_auc
            );
        }
        out
    }
}

fn short_hash(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(&hasher.finalize()[..16])
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(value).map_err(|e| Error::Config(e.to_string()))
}

struct Prepared {
    pool: EmbeddingSet,
    split: Split,
    pool_hash: String,
}

fn prepare(config: &PipelineConfig) -> Result<Prepared> {
    config.validate()?;
    let pool = config.load_pool().map_err(|e| e.at_stage("load", 0))?;
    let split = holdout_split(&pool, config.test_fraction, config.seed)
        .map_err(|e| e.at_stage("split", 0))?;
    let pool_hash = short_hash(&[&encode(&split.train)?, &json_bytes(&split.train_ids)?]);
    if let Some(dir) = &config.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).at_stage("load", 0))?;
    }
    Ok(Prepared {
        pool,
        split,
        pool_hash,
    })
}

fn select(
    config: &PipelineConfig,
    prep: &Prepared,
    mode: SelectionMode,
    run_seed: u64,
) -> Result<(DistilledSelection, String)> {
    let params = match mode {
        SelectionMode::InfoDist => json_bytes(&config.distill_config(run_seed))?,
        SelectionMode::Random => json_bytes(&(config.per_class, run_seed))?,
    };
    let key = short_hash(&[
        b"select",
        mode.to_string().as_bytes(),
        prep.pool_hash.as_bytes(),
        &params,
    ]);
    let cached = config
        .output_dir
        .as_ref()
        .map(|dir| dir.join(format!("selection-{key}.toml")))
        .filter(|p| p.is_file());
    if let Some(path) = cached {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return Ok((DistilledSelection::from_summary_toml(&text)?, key));
    }
    let mut selection = match mode {
        SelectionMode::InfoDist => distill(&prep.split.train, &config.distill_config(run_seed))?,
        SelectionMode::Random => random_selection(&prep.split.train, config.per_class, run_seed)?,
    };
    to_pool_ids(&mut selection, &prep.split.train_ids);
    if let Some(dir) = &config.output_dir {
        selection.write(
            dir.join(format!("selection-{key}.tsv")),
            dir.join(format!("selection-{key}.toml")),
        )?;
    }
    Ok((selection, key))
}

fn train_model(
    config: &PipelineConfig,
    prep: &Prepared,
    ids: &[usize],
    selection_key: &str,
    run_seed: u64,
) -> Result<(Classifier, String)> {
    let loss = config.loss_config(run_seed);
    let key = short_hash(&[b"train", selection_key.as_bytes(), &json_bytes(&loss)?]);
    let path = config
        .output_dir
        .as_ref()
        .map(|dir| dir.join(format!("model-{key}.bin")));
    if let Some(path) = path.as_ref().filter(|p| p.is_file()) {
        return Ok((Classifier::read(path)?, key));
    }
    let model = train_on_ids(&prep.pool, ids, &loss)?;
    if let Some(path) = &path {
        model.write(path)?;
    }
    Ok((model, key))
}

fn run_one(
    config: &PipelineConfig,
    prep: &Prepared,
    mode: SelectionMode,
    run: usize,
) -> Result<RunRecord> {
    let seed = config.run_seed(run);
    let (selection, selection_key) =
        select(config, prep, mode, seed).map_err(|e| e.at_stage("select", run))?;
    let ids = selection.ids();

    let test: BTreeSet<usize> = prep.split.test_ids.iter().copied().collect();
    if let Some(&leak) = ids.iter().find(|id| test.contains(id)) {
        return Err(
            Error::InvalidSet(format!("selected item {leak} belongs to the test split"))
                .at_stage("select", run),
        );
    }

    let (model, model_key) = train_model(config, prep, &ids, &selection_key, seed)
        .map_err(|e| e.at_stage("train", run))?;
    let probabilities = model.predict_proba(&prep.split.test);
    let report = EvalReport::from_probabilities(
        &probabilities,
        &prep.split.test.labels(),
        prep.pool.num_classes,
    )
    .map_err(|e| e.at_stage("eval", run))?;
    let stored = config.output_dir.is_some();
    Ok(RunRecord {
        run,
        seed,
        selected: ids.len(),
        report,
        selection_file: stored.then(|| format!("selection-{selection_key}.tsv")),
        model_file: stored.then(|| format!("model-{model_key}.bin")),
    })
}

/// Runs every seed of `config` with the given selection stage.
pub fn run(config: &PipelineConfig, mode: SelectionMode) -> Result<Summary> {
    let prep = prepare(config)?;
    let runs: Vec<RunRecord> = if config.parallel_runs {
        (0..config.runs)
            .into_par_iter()
            .map(|r| run_one(config, &prep, mode, r))
            .collect::<Result<_>>()?
    } else {
        (0..config.runs)
            .map(|r| run_one(config, &prep, mode, r))
            .collect::<Result<_>>()?
    };
    let rows: Vec<MetricRow> = runs.iter().map(|r| MetricRow::from(&r.report)).collect();
    let (mean, std) = Summary::aggregate(&rows);
    let summary = Summary {
        mode,
        config_hash: config.result_hash()?,
        train_items: prep.split.train_ids.len(),
        test_items: prep.split.test_ids.len(),
        runs,
        mean,
        std,
    };
    if let Some(dir) = &config.output_dir {
        let path = dir.join(format!("summary-{mode}.json"));
        fs::write(&path, summary.to_json()?)
            .map_err(|e| Error::io(&path, e).at_stage("write", 0))?;
    }
    Ok(summary)
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<Summary> {
    run(config, SelectionMode::InfoDist)
}

pub fn run_random_baseline(config: &PipelineConfig) -> Result<Summary> {
    run(config, SelectionMode::Random)
}

/// Per-seed InfoDist and random results on the same split and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub infodist: Summary,
    pub random: Summary,
    /// `InfoDist − Random` accuracy, one entry per run.
    pub accuracy_deltas: Vec<f64>,
    pub mean_delta: f64,
}

impl Comparison {
    pub fn new(infodist: Summary, random: Summary) -> Result<Self> {
        if infodist.runs.len() != random.runs.len() {
            return Err(Error::InvalidArgument(
                "summaries cover different numbers of runs".into(),
            ));
        }
        let accuracy_deltas: Vec<f64> = infodist
            .runs
            .iter()
            .zip(&random.runs)
            .map(|(a, b)| a.report.accuracy - b.report.accuracy)
            .collect();
        let mean_delta = accuracy_deltas.iter().sum::<f64>() / accuracy_deltas.len() as f64;
        Ok(Comparison {
            infodist,
            random,
            accuracy_deltas,
            mean_delta,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>10} {:>10} {:>10}",
            "run", "infodist", "random", "delta"
        );
        for ((a, b), d) in self
            .infodist
            .runs
            .iter()
            .zip(&self.random.runs)
            .zip(&self.accuracy_deltas)
        {
            let _ = writeln!(
                out,
                "{:<6} {:>10.4} {:>10.4} {:>+10.4}",
                a.run, a.report.accuracy, b.report.accuracy, d
            );
        }
        let _ = writeln!(
            out,
            "{:<6} {:>10.4} {:>10.4} {:>+10.4}",
            "mean", self.infodist.mean.accuracy, self.random.mean.accuracy, self.mean_delta
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn compare(config: &PipelineConfig) -> Result<Comparison> {
    Comparison::new(run_pipeline(config)?, run_random_baseline(config)?)
}
