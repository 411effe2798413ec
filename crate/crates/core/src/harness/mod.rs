//! End-to-end orchestration: datasets, configuration, cached scoring,
//! strategy comparisons, leaderboards and report files.

pub mod cache;
pub mod compare;
pub mod config;
pub mod dataset;
pub mod leaderboard;
pub mod report;
pub mod run;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::metrics::MetricsError;
use crate::prompt::PromptError;
use crate::stats::StatsError;
use crate::tokenizer::{TokenizationStrategy, TokenizerError};

pub use cache::{CacheEntry, CacheKey, ResponseCache, ScoredCall};
pub use compare::{
    compare_strategies, run_permutation_suite, ComparisonFlags, ComparisonOutput, ComparisonReport,
    ComparisonRow, PermutationAverage, PermutationSuite,
};
pub use config::{BackendConfig, BackendKind, BootstrapConfig, PermutationSpec, RunConfig, TemplateConfig};
pub use dataset::{load_dataset, parse_dataset, DatasetError};
pub use leaderboard::{leaderboard, LeaderboardEntry, LeaderboardReport, RankedModel};
pub use run::{run_eval, Evaluator, ExampleRecord, RunFlags, RunOutput, ScoredOption};

/// One example that could not be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleFailure {
    pub example_id: String,
    pub error: String,
}

fn failure_list(failures: &[ExampleFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("{}: {}", f.example_id, f.error))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("cache: {0}")]
    Cache(String),
    #[error("{0}")]
    Io(String),
    #[error("cached responses for example {example_id:?} do not match the current prompts; clear the cache directory")]
    StaleCache { example_id: String },
    #[error("example {example_id:?}: need {need} exemplars, only {have} available")]
    NotEnoughExemplars {
        example_id: String,
        need: usize,
        have: usize,
    },
    #[error("{} example(s) failed: {}", failures.len(), failure_list(failures))]
    ExamplesFailed { failures: Vec<ExampleFailure> },
    #[error("strategies cover different examples (only letter: {only_a:?}; only space-letter: {only_b:?})")]
    PairingMismatch {
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
    #[error("model {model:?} has no {strategy} result")]
    MissingStrategy {
        model: String,
        strategy: TokenizationStrategy,
    },
    #[error("leaderboard needs at least 2 models, got {0}")]
    TooFewModels(usize),
}

impl HarnessError {
    /// Ids of the examples that failed, when this is a per-example failure.
    pub fn failed_ids(&self) -> Vec<&str> {
        match self {
            HarnessError::ExamplesFailed { failures } => {
                failures.iter().map(|f| f.example_id.as_str()).collect()
            }
            _ => Vec::new(),
        }
    }
}
