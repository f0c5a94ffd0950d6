//! TOML run configuration and the filter-comparison experiment driver.
//!
//! ```toml
//! [data]
//! n_samples = 2000
//! input_dim = 32
//! min_age = 1
//! max_age = 70
//!
//! [train]
//! n_workers = 4
//! max_iterations = 500
//!
//! [train.spec]
//! input_dim = 32
//! hidden_dims = [64]
//! c = 70
//!
//! [experiment]
//! filters = ["RAW", "DSU", "ASU"]
//! compute_seconds = 2.0
//!
//! [[experiment.links]]
//! name = "1gbps"
//! bandwidth_bps = 1e9
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::agemodel::Sample;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::label_dist::{AgeClassSet, DEFAULT_THETA};
use crate::netmodel::{iteration_time, speedup_ratio, IterationTiming, LinkModel};
use crate::output::write_atomic;
use crate::ps_core::{train, Execution, TrainConfig, TrainOutcome, TrainingLog, UPDATE_RULE};
use crate::synthetic::{generate_synthetic, parse_dataset};
use crate::update_filters::FilterKind;

fn default_theta() -> f64 {
    DEFAULT_THETA
}
fn default_min_age() -> u32 {
    1
}
fn default_filters() -> Vec<FilterKind> {
    FilterKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub n_samples: usize,
    pub input_dim: usize,
    #[serde(default = "default_min_age")]
    pub min_age: u32,
    pub max_age: u32,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Dataset CSVs used instead of generated data; relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
}

impl DataConfig {
    pub fn classes(&self) -> Result<AgeClassSet> {
        AgeClassSet::new(self.min_age, self.max_age)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedLink {
    pub name: String,
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub latency_s: f64,
}

impl NamedLink {
    pub fn link(&self) -> Result<LinkModel> {
        LinkModel::new(self.bandwidth_bps, self.latency_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_filters")]
    pub filters: Vec<FilterKind>,
    /// Per-iteration compute time fed to the timing model.
    #[serde(default)]
    pub compute_seconds: f64,
    #[serde(default)]
    pub links: Vec<NamedLink>,
    /// Per-filter threshold replacing `train.delta`, keyed by filter name.
    #[serde(default)]
    pub delta_overrides: BTreeMap<String, f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            filters: default_filters(),
            compute_seconds: 0.0,
            links: Vec::new(),
            delta_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

fn config_err(message: impl Into<String>) -> Error {
    Error::Config {
        line: None,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let classes = self
            .data
            .classes()
            .map_err(|e| config_err(format!("data: {e}")))?;
        self.train
            .validate()
            .map_err(|e| config_err(format!("train: {e}")))?;
        if self.train.spec.c != classes.c() {
            return Err(config_err(format!(
                "train.spec.c = {} but the age range {}..={} has {} classes",
                self.train.spec.c,
                classes.min_age(),
                classes.max_age(),
                classes.c()
            )));
        }
        if self.train.spec.input_dim != self.data.input_dim {
            return Err(config_err(format!(
                "train.spec.input_dim = {} but data.input_dim = {}",
                self.train.spec.input_dim, self.data.input_dim
            )));
        }
        if !(self.data.theta > 0.0) || !self.data.theta.is_finite() {
            return Err(config_err(format!(
                "data.theta must be positive, got {}",
                self.data.theta
            )));
        }
        if self.data.train_file.is_none() && self.data.n_samples < 2 {
            return Err(config_err(
                "data.n_samples must be >= 2 when no train_file is given",
            ));
        }
        if self.data.train_file.is_some() != self.data.test_file.is_some() {
            return Err(config_err(
                "data.train_file and data.test_file must be given together",
            ));
        }
        let exp = &self.experiment;
        if exp.filters.is_empty() {
            return Err(config_err("experiment.filters is empty"));
        }
        for (i, f) in exp.filters.iter().enumerate() {
            if exp.filters[..i].contains(f) {
                return Err(config_err(format!("experiment.filters lists {f} twice")));
            }
        }
        if !(exp.compute_seconds >= 0.0) || !exp.compute_seconds.is_finite() {
            return Err(config_err("experiment.compute_seconds must be >= 0"));
        }
        for (i, l) in exp.links.iter().enumerate() {
            if l.name.is_empty()
                || !l
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(config_err(format!(
                    "link name {:?} must be non-empty [A-Za-z0-9_-]",
                    l.name
                )));
            }
            if exp.links[..i].iter().any(|o| o.name == l.name) {
                return Err(config_err(format!("link name {:?} used twice", l.name)));
            }
            l.link()
                .map_err(|e| config_err(format!("link {}: {e}", l.name)))?;
        }
        for (k, &d) in &exp.delta_overrides {
            k.parse::<FilterKind>()
                .map_err(|e| config_err(format!("delta_overrides: {e}")))?;
            if !(d >= 0.0) || !d.is_finite() {
                return Err(config_err(format!("delta_overrides.{k} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Training config for one filter, with any per-filter delta applied.
    pub fn train_config_for(&self, filter: FilterKind) -> TrainConfig {
        let delta = self
            .experiment
            .delta_overrides
            .iter()
            .find(|(k, _)| k.parse::<FilterKind>().ok() == Some(filter))
            .map_or(self.train.delta, |(_, &d)| d);
        TrainConfig {
            filter,
            delta,
            ..self.train.clone()
        }
    }

    /// The fully resolved config as TOML, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1
}

/// Parses and validates a run config.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for f in [&mut config.data.train_file, &mut config.data.test_file]
        .into_iter()
        .flatten()
    {
        if f.is_relative() {
            *f = base.join(&*f);
        }
    }
    Ok(config)
}

/// Reads the configured dataset files, or generates synthetic data.
pub fn load_data(data: &DataConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let classes = data.classes()?;
    match (&data.train_file, &data.test_file) {
        (Some(train), Some(test)) => {
            let read = |p: &Path| -> Result<Vec<Sample>> {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_dataset(&text, &classes, data.theta)
            };
            Ok((read(train)?, read(test)?))
        }
        _ => generate_synthetic(
            data.n_samples,
            data.input_dim,
            &classes,
            data.theta,
            data.seed,
        ),
    }
}

/// Comment block placed above every output file.
pub fn header_comments(config: &RunConfig, run: Option<&TrainConfig>) -> Vec<String> {
    let mut out = vec![format!("update_rule: {UPDATE_RULE}")];
    if let Some(run) = run {
        out.push(format!(
            "run: filter={} delta={} seed={} model_seed={} data_seed={}",
            run.filter, run.delta, run.seed, run.spec.seed, config.data.seed
        ));
    }
    out.push("resolved config:".into());
    out.push(config.to_toml());
    out
}

fn comment_block(comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        for line in c.lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
    s
}

/// Timing of every iteration in `log` under `link`. Each phase is charged the
/// largest message any worker sent or received in that iteration.
pub fn simulate_comm(
    log: &TrainingLog,
    link: &LinkModel,
    compute_seconds: f64,
) -> Result<Vec<(u64, IterationTiming)>> {
    let mut out: Vec<(u64, IterationTiming)> = Vec::new();
    let mut current: Option<(u64, u64, u64)> = None;
    let mut flush = |it: u64, push: u64, pull: u64| -> Result<()> {
        out.push((it, iteration_time(compute_seconds, push, pull, link)?));
        Ok(())
    };
    for row in &log.rows {
        current = match current {
            Some((it, push, pull)) if it == row.iteration => {
                Some((it, push.max(row.push_bytes), pull.max(row.pull_bytes)))
            }
            Some((it, push, pull)) => {
                flush(it, push, pull)?;
                Some((row.iteration, row.push_bytes, row.pull_bytes))
            }
            None => Some((row.iteration, row.push_bytes, row.pull_bytes)),
        };
    }
    if let Some((it, push, pull)) = current {
        flush(it, push, pull)?;
    }
    Ok(out)
}

pub const TIMING_HEADER: &str = "iteration,compute_s,push_s,pull_s,total_s";

pub fn timing_csv(timings: &[(u64, IterationTiming)], comments: &[String]) -> String {
    let mut s = comment_block(comments);
    let _ = writeln!(s, "{TIMING_HEADER}");
    for (it, t) in timings {
        let _ = writeln!(
            s,
            "{it},{},{},{},{}",
            t.compute_seconds, t.push_seconds, t.pull_seconds, t.total_seconds
        );
    }
    s
}

fn mean_timing(timings: &[(u64, IterationTiming)]) -> IterationTiming {
    let n = timings.len().max(1) as f64;
    let sum = |f: fn(&IterationTiming) -> f64| timings.iter().map(|(_, t)| f(t)).sum::<f64>() / n;
    IterationTiming {
        compute_seconds: sum(|t| t.compute_seconds),
        push_seconds: sum(|t| t.push_seconds),
        pull_seconds: sum(|t| t.pull_seconds),
        total_seconds: sum(|t| t.total_seconds),
    }
}

/// Per-iteration means across workers for each filter, one row per filter per iteration.
pub fn comparison_csv(runs: &[(FilterKind, &TrainingLog)], comments: &[String]) -> String {
    let mut s = comment_block(comments);
    let _ = writeln!(s, "iteration,filter,train_loss,drop_fraction,test_loss");
    let iterations = runs.iter().map(|(_, l)| l.iterations()).max().unwrap_or(0);
    let mut cursors = vec![0usize; runs.len()];
    for it in 1..=iterations {
        for ((kind, log), cursor) in runs.iter().zip(&mut cursors) {
            let start = *cursor;
            while *cursor < log.rows.len() && log.rows[*cursor].iteration == it {
                *cursor += 1;
            }
            let rows = &log.rows[start..*cursor];
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let train_loss = rows.iter().map(|r| r.train_loss).sum::<f64>() / n;
            let drop = rows.iter().map(|r| r.drop_fraction).sum::<f64>() / n;
            let _ = write!(s, "{it},{kind},{train_loss},{drop},");
            if let Some(t) = rows[0].test_loss {
                let _ = write!(s, "{t}");
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub filter: FilterKind,
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub runs: Vec<FilterRun>,
    pub files: Vec<PathBuf>,
}

fn write_file(path: PathBuf, contents: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    write_atomic(&path, contents)?;
    files.push(path);
    Ok(())
}

/// Trains every configured filter and writes logs, checkpoints, the
/// comparison table, per-link timing tables and the speedup summary.
pub fn run_experiment(config: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train_set, test_set) = load_data(&config.data)?;
    let exp = &config.experiment;
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for &filter in &exp.filters {
        let run_cfg = config.train_config_for(filter);
        info!(
            "training {filter} (delta {}) for {} iterations",
            run_cfg.delta, run_cfg.max_iterations
        );
        let outcome = train(&run_cfg, &train_set, &test_set, Execution::Threaded)?;
        let comments = header_comments(config, Some(&run_cfg));
        write_file(
            out_dir.join(format!("log_{filter}.csv")),
            outcome.log.to_csv(&comments).as_bytes(),
            &mut files,
        )?;
        let ckpt = Checkpoint::new(
            run_cfg.spec.clone(),
            config.data.min_age,
            outcome.params.clone(),
        )?;
        write_file(
            out_dir.join(format!("model_{filter}.ckpt")),
            &ckpt.encode(),
            &mut files,
        )?;
        runs.push(FilterRun {
            filter,
            config: run_cfg,
            outcome,
        });
    }

    let comments = header_comments(config, None);
    let logs: Vec<(FilterKind, &TrainingLog)> =
        runs.iter().map(|r| (r.filter, &r.outcome.log)).collect();
    write_file(
        out_dir.join("comparison.csv"),
        comparison_csv(&logs, &comments).as_bytes(),
        &mut files,
    )?;

    if !exp.links.is_empty() {
        let baseline = runs
            .iter()
            .position(|r| r.filter == FilterKind::Raw)
            .unwrap_or(0);
        let mut speedup = comment_block(&comments);
        let _ = writeln!(
            speedup,
            "link,filter,mean_compute_s,mean_push_s,mean_pull_s,mean_total_s,speedup_vs_{}",
            runs[baseline].filter
        );
        for named in &exp.links {
            let link = named.link()?;
            let timings = runs
                .iter()
                .map(|r| simulate_comm(&r.outcome.log, &link, exp.compute_seconds))
                .collect::<Result<Vec<_>>>()?;
            let base = mean_timing(&timings[baseline]);
            for (run, t) in runs.iter().zip(&timings) {
                let mut c = header_comments(config, Some(&run.config));
                c.insert(
                    0,
                    format!(
                        "link: {} bandwidth_bps={} latency_s={}",
                        named.name, link.bandwidth_bps, link.latency_s
                    ),
                );
                write_file(
                    out_dir.join(format!("timing_{}_{}.csv", named.name, run.filter)),
                    timing_csv(t, &c).as_bytes(),
                    &mut files,
                )?;
                let m = mean_timing(t);
                let ratio = speedup_ratio(&base, &m)?;
                let _ = writeln!(
                    speedup,
                    "{},{},{},{},{},{},{}",
                    named.name,
                    run.filter,
                    m.compute_seconds,
                    m.push_seconds,
                    m.pull_seconds,
                    m.total_seconds,
                    ratio
                );
            }
        }
        write_file(out_dir.join("speedup.csv"), speedup.as_bytes(), &mut files)?;
    }
    Ok(ExperimentReport { runs, files })
}
