//! Report files written by the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::RunResult;

use super::compare::{ComparisonOutput, ComparisonReport, PermutationSuite, StatsMethods};
use super::config::RunConfig;
use super::leaderboard::LeaderboardReport;
use super::run::{RunFlags, RunOutput};
use super::HarnessError;

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub exemplar_seed: u64,
    pub bootstrap_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation_seed: Option<u64>,
}

impl Seeds {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            exemplar_seed: cfg.exemplar_seed,
            bootstrap_seed: cfg.bootstrap.seed,
            permutation_seed: cfg.permutations.map(|p| p.seed),
        }
    }
}

/// One file per run: configuration, seeds, version and aggregate metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub template_fingerprint: String,
    pub result: RunResult,
    pub flags: RunFlags,
}

impl RunReport {
    pub fn new(cfg: &RunConfig, out: &RunOutput) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            config: cfg.clone(),
            seeds: Seeds::of(cfg),
            template_fingerprint: out.template_fingerprint.clone(),
            result: out.result.clone(),
            flags: out.flags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonFile {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub methods: StatsMethods,
    pub report: ComparisonReport,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf, HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// File-name stem for a run: `<model>.<dataset>.<strategy>` with unsafe characters replaced.
pub fn run_stem(result: &RunResult) -> String {
    let raw = format!("{}.{}.{}", result.model_id, result.dataset_id, result.strategy.as_str());
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

/// Writes `<stem>.report.json`, `<stem>.examples.jsonl` and
/// `<stem>.reliability.csv`; returns the paths written.
pub fn write_run(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<Vec<PathBuf>, HarnessError> {
    let stem = run_stem(&out.result);
    let mut examples = String::new();
    for r in &out.records {
        examples.push_str(&serde_json::to_string(r).expect("record serializes"));
        examples.push('\n');
    }
    Ok(vec![
        write(&dir.join(format!("{stem}.report.json")), json(&RunReport::new(cfg, out)))?,
        write(&dir.join(format!("{stem}.examples.jsonl")), examples)?,
        write(&dir.join(format!("{stem}.reliability.csv")), out.result.bins.to_csv())?,
    ])
}

fn write_comparison_files(
    dir: &Path,
    cfg: &RunConfig,
    stem: &str,
    report: &ComparisonReport,
    table: String,
) -> Result<Vec<PathBuf>, HarnessError> {
    let file = ComparisonFile {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        config: cfg.clone(),
        seeds: Seeds::of(cfg),
        methods: report.methods.clone(),
        report: report.clone(),
    };
    Ok(vec![
        write(&dir.join(format!("{stem}.txt")), table)?,
        write(&dir.join(format!("{stem}.csv")), report.to_csv())?,
        write(&dir.join(format!("{stem}.json")), json(&file))?,
    ])
}

/// Writes both runs plus `comparison.{txt,csv,json}`.
pub fn write_comparison(
    dir: &Path,
    cfg: &RunConfig,
    out: &ComparisonOutput,
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut paths = write_run(dir, cfg, &out.letter)?;
    paths.extend(write_run(dir, cfg, &out.space_letter)?);
    let report = ComparisonReport::new(vec![out.row.clone()]);
    let table = report.render_table();
    paths.extend(write_comparison_files(dir, cfg, "comparison", &report, table)?);
    Ok(paths)
}

pub fn write_permutation_suite(
    dir: &Path,
    cfg: &RunConfig,
    suite: &PermutationSuite,
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut paths = write_comparison_files(dir, cfg, "permutations", &suite.report, suite.render_table())?;
    paths.push(write(&dir.join("permutations.suite.json"), json(suite))?);
    Ok(paths)
}

pub fn write_leaderboard(dir: &Path, report: &LeaderboardReport) -> Result<Vec<PathBuf>, HarnessError> {
    Ok(vec![
        write(&dir.join("leaderboard.txt"), report.render_table())?,
        write(&dir.join("leaderboard.json"), json(report))?,
    ])
}
