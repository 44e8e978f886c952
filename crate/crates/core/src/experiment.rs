//! Config-driven experiments: data generation or loading, a 70/15/15 split,
//! training per seed and training-set size, evaluation and artifacts.
//!
//! A run directory holds `config.json`, `report.json`, `timing.json`,
//! optionally `sweep.csv`, and one `seed{s}-n{N}/` directory per trained
//! model with `model.ckpt`, `history.json` and the training split in
//! `train/`. Wall-clock times only ever appear in `timing.json` and the
//! histories, so `report.json` is byte-identical across reruns.

use crate::data::{DataSource, Dataset};
use crate::error::{EncpError, Result};
use crate::gmm::{build_spec, moons_representations, sample_moons, source_digest, MoonsSpec, SymmetricGmmSpec};
use crate::group::{data_representation, FiniteGroup, GroupRepresentation};
use crate::inference::{regress, CcdfTable, ObservableSamples, QuantileOptions};
use crate::metrics::{coverage_metrics, invariance_error, pmd_mse, regression_mse, EvalReport};
use crate::model::{fit_statistics, load_checkpoint, save_checkpoint, train, EncpModel, FittedOperator, ModelConfig, TrainConfig, TrainHistory};
use crate::rng::{digest_hex, stream};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VALID_FRACTION: f64 = 0.15;

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const TRAIN_DIR: &str = "train";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Symmetric Gaussian mixture; `spec_seed` fixes the mixture and
    /// `sample_seed` the draw of `n_samples` pairs.
    Gmm {
        group: String,
        px: usize,
        qy: usize,
        n_g: usize,
        spec_seed: u64,
        sample_seed: u64,
        n_samples: usize,
    },
    Moons {
        #[serde(default = "default_beta")]
        beta: f64,
        seed: u64,
        n_samples: usize,
    },
    /// A CSV with `x_*`/`y_*` columns, or a directory written by
    /// `gmm generate`. Without a sidecar the model group is taken to act
    /// through its default data representation.
    Csv { path: String },
}

fn default_beta() -> f64 {
    1.0
}

/// Optimizer settings; seeds are listed at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            gamma: t.gamma,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PmdMse,
    Invariance,
    Regression,
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Metrics without an oracle for the data source are skipped.
    pub metrics: Vec<Metric>,
    /// Caps the number of test points used.
    pub test_size: Option<usize>,
    pub whiten: bool,
    /// Miscoverage of the per-dimension intervals.
    pub alpha: f64,
    pub n_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::PmdMse, Metric::Invariance, Metric::Regression, Metric::Coverage],
            test_size: None,
            whiten: true,
            alpha: 0.1,
            n_bins: crate::inference::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub train_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Group of the model; `trivial` trains the symmetry-agnostic baseline.
    pub group: String,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn config_error(path: &str, message: impl Into<String>) -> EncpError {
    EncpError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates JSON; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn digest(&self) -> String {
        digest_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let group = FiniteGroup::from_label(&self.group).map_err(|e| config_error("group", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(config_error("seeds", "seeds must be distinct"));
        }
        let r = self.model.latent_dim(&group);
        if r == 0 || r % group.order() != 0 {
            return Err(config_error("model.r", format!("r = {r} must be a positive multiple of |G| = {}", group.order())));
        }
        if self.model.hidden_width == 0 {
            return Err(config_error("model.hidden_width", "must be positive"));
        }
        self.train
            .with_seed(0)
            .validate()
            .map_err(|e| config_error("train", e.to_string()))?;
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(config_error("eval.alpha", "must lie in (0, 1)"));
        }
        if self.eval.n_bins < 2 {
            return Err(config_error("eval.n_bins", "must be at least 2"));
        }
        if self.eval.test_size == Some(0) {
            return Err(config_error("eval.test_size", "must be positive"));
        }
        match &self.data {
            DataConfig::Gmm { group: g, px, qy, n_g, n_samples, .. } => {
                FiniteGroup::from_label(g).map_err(|e| config_error("data.group", e.to_string()))?;
                if *px == 0 || *qy == 0 || *n_g == 0 {
                    return Err(config_error("data", "px, qy and n_g must be positive"));
                }
                if *n_samples < 20 {
                    return Err(config_error("data.n_samples", "need at least 20 samples"));
                }
            }
            DataConfig::Moons { beta, n_samples, .. } => {
                MoonsSpec::new(*beta).map_err(|e| config_error("data.beta", e.to_string()))?;
                if *n_samples < 20 {
                    return Err(config_error("data.n_samples", "need at least 20 samples"));
                }
            }
            DataConfig::Csv { path } => {
                if path.is_empty() {
                    return Err(config_error("data.path", "must not be empty"));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.train_sizes.is_empty() || s.train_sizes.contains(&0) {
                return Err(config_error("sweep.train_sizes", "sizes must be positive and nonempty"));
            }
        }
        Ok(())
    }
}

/// Samples, the group action on them and an analytic oracle when known.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub data: Dataset,
    pub source: DataSource,
    pub group: FiniteGroup,
    pub rep_x: GroupRepresentation,
    pub rep_y: GroupRepresentation,
    pub oracle: Oracle,
}

#[derive(Debug, Clone)]
pub enum Oracle {
    Gmm(Box<SymmetricGmmSpec>),
    Moons(MoonsSpec),
    None,
}

impl Oracle {
    fn conditional_mean(&self, xs: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
        match self {
            Oracle::Gmm(spec) => {
                let mut out = DMatrix::zeros(xs.nrows(), spec.y_dim());
                for (i, row) in xs.row_iter().enumerate() {
                    let x: Vec<f64> = row.iter().copied().collect();
                    out.set_row(i, &spec.conditional_mean(&x)?.transpose());
                }
                Ok(Some(out))
            }
            Oracle::Moons(_) => Ok(Some(DMatrix::from_fn(xs.nrows(), 2, |i, j| {
                if j == 0 {
                    0.0
                } else {
                    crate::gmm::moons_conditional_mean(xs[(i, 0)])[1]
                }
            }))),
            Oracle::None => Ok(None),
        }
    }
}

/// Rebuilds the group action and oracle of a data source.
pub fn describe_source(source: &DataSource, fallback_group: &str, px: usize, qy: usize) -> Result<(FiniteGroup, GroupRepresentation, GroupRepresentation, Oracle)> {
    match source {
        DataSource::Gmm { group, px, qy, n_g, seed } => {
            let g = FiniteGroup::from_label(group)?;
            let rx = data_representation(&g, *px)?;
            let ry = data_representation(&g, *qy)?;
            let spec = build_spec(&rx, &ry, *n_g, *seed)?;
            Ok((g, rx, ry, Oracle::Gmm(Box::new(spec))))
        }
        DataSource::Moons { beta, .. } => {
            let (rx, ry) = moons_representations();
            Ok((rx.group().clone(), rx, ry, Oracle::Moons(MoonsSpec::new(*beta)?)))
        }
        DataSource::Csv { .. } => {
            let g = FiniteGroup::from_label(fallback_group)?;
            let rx = data_representation(&g, px)?;
            let ry = data_representation(&g, qy)?;
            Ok((g, rx, ry, Oracle::None))
        }
    }
}

pub fn load_data(config: &ExperimentConfig) -> Result<LoadedData> {
    let (data, source) = match &config.data {
        DataConfig::Gmm { group, px, qy, n_g, spec_seed, sample_seed, n_samples } => {
            let g = FiniteGroup::from_label(group)?;
            let spec = build_spec(&data_representation(&g, *px)?, &data_representation(&g, *qy)?, *n_g, *spec_seed)?;
            let source = spec.source().expect("generated spec records its source").clone();
            (spec.sample(*n_samples, *sample_seed)?, source)
        }
        DataConfig::Moons { beta, seed, n_samples } => {
            let source = DataSource::Moons { beta: *beta, seed: *seed };
            (sample_moons(MoonsSpec::new(*beta)?, *n_samples, *seed)?, source)
        }
        DataConfig::Csv { path } => {
            let path = Path::new(path);
            if path.is_dir() {
                let (data, meta) = Dataset::load(path)?;
                (data, meta.source)
            } else {
                let source = DataSource::Csv {
                    path: path.display().to_string(),
                };
                (Dataset::read_csv(path, 0, source_digest(&source))?, source)
            }
        }
    };
    let (group, rep_x, rep_y, oracle) = describe_source(&source, &config.group, data.x_dim(), data.y_dim())?;
    Ok(LoadedData {
        data,
        source,
        group,
        rep_x,
        rep_y,
        oracle,
    })
}

/// Deterministic 70/15/15 split of a shuffled copy of `data`.
pub fn split(data: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
    let n = data.len();
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let n_valid = (n as f64 * VALID_FRACTION).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(EncpError::InvalidParameter(format!("{n} samples are too few to split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(data.seed, "split"));
    Ok((
        data.select(&idx[..n_train]),
        data.select(&idx[n_train..n_train + n_valid]),
        data.select(&idx[n_train + n_valid..]),
    ))
}

/// Representations of the model's group on the data spaces.
pub fn model_representations(config: &ExperimentConfig, loaded: &LoadedData) -> Result<(GroupRepresentation, GroupRepresentation)> {
    let group = FiniteGroup::from_label(&config.group)?;
    if group.is_trivial() {
        Ok((
            GroupRepresentation::trivial(&group, loaded.data.x_dim()),
            GroupRepresentation::trivial(&group, loaded.data.y_dim()),
        ))
    } else if group == loaded.group {
        Ok((loaded.rep_x.clone(), loaded.rep_y.clone()))
    } else {
        Err(config_error(
            "group",
            format!("model group {} does not match the data symmetry {}", config.group, loaded.group.label()),
        ))
    }
}

fn wants(config: &EvalConfig, m: Metric) -> bool {
    config.metrics.contains(&m)
}

/// Metrics of a fitted operator on a test set.
pub fn evaluate(op: &FittedOperator, test: &Dataset, loaded: &LoadedData, eval: &EvalConfig) -> Result<EvalReport> {
    let test = match eval.test_size {
        Some(m) if m < test.len() => test.slice(0..m),
        _ => test.clone(),
    };
    let mut report = EvalReport {
        group: op.model().group().label(),
        seed: 0,
        n_train: op.fit_data().len(),
        n_valid: 0,
        n_test: test.len(),
        pmd_mse: None,
        invariance_error: 0.0,
        regression_mse: None,
        coverage: None,
        best_epoch: None,
        final_train_l0: None,
    };
    if let (true, Oracle::Gmm(spec)) = (wants(eval, Metric::PmdMse), &loaded.oracle) {
        report.pmd_mse = Some(pmd_mse(spec.as_ref(), op, &test.x, &test.y)?);
    }
    if wants(eval, Metric::Invariance) {
        report.invariance_error = invariance_error(op, &test.x, &test.y, &loaded.rep_x, &loaded.rep_y)?;
    }
    if wants(eval, Metric::Regression) {
        if let Some(truth) = loaded.oracle.conditional_mean(&test.x)? {
            let mut op = op.clone();
            let h = ObservableSamples::new(op.fit_data().y.clone(), Some(op.model().rep_y().clone()))?;
            op.register_observable("y", &h)?;
            report.regression_mse = Some(regression_mse(&regress(&op, "y", &test.x)?, &truth)?);
        }
    }
    if wants(eval, Metric::Coverage) {
        let (lower, upper) = intervals(op, &test.x, eval.alpha, eval.n_bins)?;
        report.coverage = Some(coverage_metrics(&lower, &upper, &test.y)?);
    }
    report.validate()?;
    Ok(report)
}

/// Per-dimension `[alpha/2, 1 - alpha/2]` conditional quantile intervals.
pub fn intervals(op: &FittedOperator, xs: &DMatrix<f64>, alpha: f64, n_bins: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = op.model().y_dim();
    let mut lower = DMatrix::zeros(xs.nrows(), q);
    let mut upper = DMatrix::zeros(xs.nrows(), q);
    let opts = QuantileOptions { n_bins, range: None };
    for j in 0..q {
        let table = CcdfTable::new(op, j, &opts)?;
        for (i, e) in table.quantiles(op, xs, alpha / 2.0)?.iter().enumerate() {
            lower[(i, j)] = e.value;
        }
        for (i, e) in table.quantiles(op, xs, 1.0 - alpha / 2.0)?.iter().enumerate() {
            upper[(i, j)] = e.value;
        }
    }
    Ok((lower, upper))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub n_train: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_digest: String,
    pub data_digest: String,
    pub reports: Vec<EvalReport>,
    pub failures: Vec<RunFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seed: u64,
    pub n_train: usize,
    pub train_wall_s: f64,
    pub eval_wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub config_digest: String,
    pub runs: Vec<RunTiming>,
    pub total_wall_s: f64,
}

pub fn member_dir(out: &Path, seed: u64, n_train: usize) -> PathBuf {
    out.join(format!("seed{seed}-n{n_train}"))
}

struct Member {
    report: EvalReport,
    history: TrainHistory,
    model: EncpModel,
    timing: RunTiming,
}

fn run_member(config: &ExperimentConfig, loaded: &LoadedData, splits: &(Dataset, Dataset, Dataset), seed: u64, n_train: usize) -> Result<Member> {
    let (train_all, valid, test) = splits;
    let train_set = train_all.slice(0..n_train);
    let (rep_x, rep_y) = model_representations(config, loaded)?;
    let mut model = EncpModel::new(&rep_x, &rep_y, &config.model, seed)?;
    let start = Instant::now();
    let history = train(&mut model, &train_set, Some(valid), &config.train.with_seed(seed))?;
    let train_wall_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let op = fit_statistics(&model, &train_set, config.eval.whiten)?;
    let mut report = evaluate(&op, test, loaded, &config.eval)?;
    report.seed = seed;
    report.n_valid = valid.len();
    report.best_epoch = history.best_epoch;
    report.final_train_l0 = history.final_l0();
    Ok(Member {
        report,
        history,
        model: op.model().clone(),
        timing: RunTiming {
            seed,
            n_train,
            train_wall_s,
            eval_wall_s: start.elapsed().as_secs_f64(),
        },
    })
}

/// Runs every `(seed, size)` pair of the config and writes the artifacts
/// into `out`. Training failures are recorded and the run continues.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let digest = config.digest();
    let loaded = load_data(config)?;
    let splits = split(&loaded.data)?;
    let sizes = match &config.sweep {
        Some(s) => s.train_sizes.clone(),
        None => vec![splits.0.len()],
    };
    if let Some(&too_big) = sizes.iter().find(|&&n| n > splits.0.len()) {
        return Err(config_error(
            "sweep.train_sizes",
            format!("size {too_big} exceeds the training split of {}", splits.0.len()),
        ));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_json())?;

    let mut report = ExperimentReport {
        name: config.name.clone(),
        config_digest: digest.clone(),
        data_digest: loaded.data.spec_digest.clone(),
        reports: Vec::new(),
        failures: Vec::new(),
    };
    let mut timing = TimingReport {
        config_digest: digest.clone(),
        runs: Vec::new(),
        total_wall_s: 0.0,
    };
    for &seed in &config.seeds {
        for &n in &sizes {
            log::info!("{}: seed {seed}, n_train {n}", config.name);
            match run_member(config, &loaded, &splits, seed, n) {
                Ok(m) => {
                    let dir = member_dir(out, seed, n);
                    save_checkpoint(&m.model, &dir.join(CHECKPOINT_FILE))?;
                    fs::write(dir.join(HISTORY_FILE), serde_json::to_string_pretty(&m.history)?)?;
                    splits.0.slice(0..n).save(&dir.join(TRAIN_DIR), loaded.source.clone(), &loaded.group.label())?;
                    report.reports.push(m.report);
                    timing.runs.push(m.timing);
                }
                Err(e) => {
                    log::warn!("seed {seed}, n_train {n} failed: {e}");
                    report.failures.push(RunFailure {
                        seed,
                        n_train: n,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    if config.sweep.is_some() {
        write_sweep_csv(&out.join(SWEEP_FILE), &report)?;
    }
    timing.total_wall_s = start.elapsed().as_secs_f64();
    fs::write(out.join(TIMING_FILE), serde_json::to_string_pretty(&timing)?)?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn write_sweep_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_digest",
        "seed",
        "n_train",
        "pmd_mse",
        "invariance_error",
        "regression_mse",
        "coverage",
        "relaxed_coverage",
        "mean_set_size",
    ])?;
    for r in &report.reports {
        let c = r.coverage.as_ref();
        w.write_record([
            report.config_digest.clone(),
            r.seed.to_string(),
            r.n_train.to_string(),
            opt(r.pmd_mse),
            format!("{:?}", r.invariance_error),
            opt(r.regression_mse),
            opt(c.map(|c| c.coverage)),
            opt(c.map(|c| c.relaxed_coverage)),
            opt(c.map(|c| c.mean_set_size)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A finished run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub report: ExperimentReport,
}

impl RunDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let report: ExperimentReport = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            report,
        })
    }

    /// `(seed, n_train)` of every successfully trained model.
    pub fn members(&self) -> Vec<(u64, usize)> {
        self.report.reports.iter().map(|r| (r.seed, r.n_train)).collect()
    }

    fn pick(&self, seed: Option<u64>) -> Result<(u64, usize)> {
        let members = self.members();
        let found = match seed {
            // the largest training set of the requested seed
            Some(s) => members.iter().filter(|m| m.0 == s).max_by_key(|m| m.1).copied(),
            None => members.first().copied(),
        };
        found.ok_or_else(|| EncpError::InvalidParameter(format!("{}: no trained model for seed {seed:?}", self.dir.display())))
    }

    /// Loads a checkpoint and refits its statistics on the stored training
    /// split.
    pub fn fitted(&self, seed: Option<u64>) -> Result<FittedOperator> {
        let (s, n) = self.pick(seed)?;
        let dir = member_dir(&self.dir, s, n);
        let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        let (train_set, _) = Dataset::load(&dir.join(TRAIN_DIR))?;
        fit_statistics(&model, &train_set, self.config.eval.whiten)
    }

    /// Evaluates every stored model on `test`, whose source supplies the
    /// oracle and group action.
    pub fn evaluate_on(&self, test: &Dataset, source: &DataSource) -> Result<Vec<EvalReport>> {
        let (group, rep_x, rep_y, oracle) = describe_source(source, &self.config.group, test.x_dim(), test.y_dim())?;
        let loaded = LoadedData {
            data: test.clone(),
            source: source.clone(),
            group,
            rep_x,
            rep_y,
            oracle,
        };
        let mut out = Vec::new();
        for (seed, n) in self.members() {
            let op = self.fitted_member(seed, n)?;
            let mut r = evaluate(&op, test, &loaded, &self.config.eval)?;
            r.seed = seed;
            out.push(r);
        }
        Ok(out)
    }

    fn fitted_member(&self, seed: u64, n: usize) -> Result<FittedOperator> {
        let dir = member_dir(&self.dir, seed, n);
        let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        let (train_set, _) = Dataset::load(&dir.join(TRAIN_DIR))?;
        fit_statistics(&model, &train_set, self.config.eval.whiten)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &str) -> String {
        format!(
            r#"{{"name":"tiny","group":"C2",
              "data":{{"kind":"gmm","group":"C2","px":1,"qy":1,"n_g":2,"spec_seed":1,"sample_seed":2,"n_samples":200}},
              "model":{{"hidden_layers":1,"hidden_width":4,"r":4}},
              "train":{{"epochs":2,"batch_size":32}},
              "seeds":[0,1],
              "eval":{{"n_bins":20}}{extra}}}"#
        )
    }

    fn config_path(err: EncpError) -> String {
        match err {
            EncpError::Config { path, .. } => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn config_round_trips() {
        let c = ExperimentConfig::from_json(&tiny(r#","sweep":{"train_sizes":[50,100]}"#)).unwrap();
        let again = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.digest(), again.digest());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = tiny("").replace(r#""hidden_width":4"#, r#""hidden_width":"wide""#);
        assert_eq!(config_path(ExperimentConfig::from_json(&bad).unwrap_err()), "model.hidden_width");
        let unknown = tiny("").replace(r#""epochs":2"#, r#""epochs":2,"momentum":0.9"#);
        assert!(config_path(ExperimentConfig::from_json(&unknown).unwrap_err()).starts_with("train"));
        let odd_r = tiny("").replace(r#""r":4"#, r#""r":3"#);
        assert_eq!(config_path(ExperimentConfig::from_json(&odd_r).unwrap_err()), "model.r");
        let no_seeds = tiny("").replace(r#""seeds":[0,1]"#, r#""seeds":[]"#);
        assert_eq!(config_path(ExperimentConfig::from_json(&no_seeds).unwrap_err()), "seeds");
        let missing = tiny("").replace(r#""seeds":[0,1],"#, "");
        assert!(ExperimentConfig::from_json(&missing).is_err());
    }

    #[test]
    fn split_is_seventy_fifteen_fifteen_and_deterministic() {
        let c = ExperimentConfig::from_json(&tiny("")).unwrap();
        let loaded = load_data(&c).unwrap();
        let (a, b, t) = split(&loaded.data).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (140, 30, 30));
        assert_eq!(split(&loaded.data).unwrap().0, a);
        // the three parts are a permutation of the pool
        let mut all: Vec<f64> = a.x.iter().chain(b.x.iter()).chain(t.x.iter()).copied().collect();
        let mut pool: Vec<f64> = loaded.data.x.iter().copied().collect();
        all.sort_by(f64::total_cmp);
        pool.sort_by(f64::total_cmp);
        assert_eq!(all, pool);
    }

    #[test]
    fn reruns_give_identical_reports() {
        let c = ExperimentConfig::from_json(&tiny("")).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&c, d1.path()).unwrap();
        run_experiment(&c, d2.path()).unwrap();
        let r1 = fs::read(d1.path().join(REPORT_FILE)).unwrap();
        let r2 = fs::read(d2.path().join(REPORT_FILE)).unwrap();
        assert_eq!(r1, r2);
        let report: ExperimentReport = serde_json::from_slice(&r1).unwrap();
        assert_eq!(report.config_digest, c.digest());
        assert_eq!(report.reports.len(), 2);
        for r in &report.reports {
            assert!(r.pmd_mse.is_some() && r.regression_mse.is_some() && r.coverage.is_some());
            assert!(r.invariance_error <= 1e-12);
            assert_eq!((r.n_train, r.n_valid, r.n_test), (140, 30, 30));
        }
        let ckpt = member_dir(d1.path(), 0, 140).join(CHECKPOINT_FILE);
        let a = load_checkpoint(&ckpt).unwrap();
        let b = load_checkpoint(&member_dir(d2.path(), 0, 140).join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_writes_one_row_per_seed_and_size() {
        let c = ExperimentConfig::from_json(&tiny(r#","sweep":{"train_sizes":[40,80,140]}"#)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&c, dir.path()).unwrap();
        assert_eq!(report.reports.len(), 6);
        let mut r = csv::Reader::from_path(dir.path().join(SWEEP_FILE)).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 6);
        for seed in ["0", "1"] {
            let sizes: Vec<&str> = rows.iter().filter(|r| &r[1] == seed).map(|r| r.get(2).unwrap()).collect();
            assert_eq!(sizes, ["40", "80", "140"]);
        }
        assert!(rows.iter().all(|r| r[0] == *c.digest()));
        let too_big = ExperimentConfig::from_json(&tiny(r#","sweep":{"train_sizes":[141]}"#)).unwrap();
        assert_eq!(config_path(run_experiment(&too_big, dir.path()).unwrap_err()), "sweep.train_sizes");
    }

    #[test]
    fn diverging_runs_are_recorded_and_skipped() {
        let c = ExperimentConfig::from_json(&tiny("").replace(r#""epochs":2"#, r#""epochs":2,"lr":1e300"#)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&c, dir.path()).unwrap();
        assert!(report.reports.is_empty());
        assert_eq!(report.failures.len(), 2);
        assert!(report.failures[0].error.contains("non-finite"));
        assert!(dir.path().join(REPORT_FILE).exists());
    }

    #[test]
    fn agnostic_baseline_uses_trivial_actions() {
        let c = ExperimentConfig::from_json(&tiny("").replace(r#""group":"C2","#, r#""group":"trivial","#)).unwrap();
        let loaded = load_data(&c).unwrap();
        let (rx, _) = model_representations(&c, &loaded).unwrap();
        assert!(rx.group().is_trivial());
        let c3 = tiny("").replacen(r#""group":"C2","#, r#""group":"C3","#, 1).replace(r#""r":4"#, r#""r":6"#);
        let other = ExperimentConfig::from_json(&c3).unwrap();
        assert_eq!(config_path(model_representations(&other, &loaded).unwrap_err()), "group");
    }

    #[test]
    fn stored_run_reloads() {
        let c = ExperimentConfig::from_json(&tiny("")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&c, dir.path()).unwrap();
        let run = RunDir::open(dir.path()).unwrap();
        assert_eq!(run.members(), vec![(0, 140), (1, 140)]);
        let op = run.fitted(Some(1)).unwrap();
        assert_eq!(op.fit_data().len(), 140);
        let loaded = load_data(&c).unwrap();
        let (_, _, test) = split(&loaded.data).unwrap();
        let again = run.evaluate_on(&test, &loaded.source).unwrap();
        assert_eq!(again, run.report.reports.iter().map(|r| EvalReport { n_valid: 0, best_epoch: None, final_train_l0: None, ..r.clone() }).collect::<Vec<_>>());
        assert!(run.fitted(Some(9)).is_err());
    }
}
