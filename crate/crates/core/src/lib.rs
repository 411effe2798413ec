//! Multiple-choice evaluation that is explicit about where the answer
//! label's token boundary falls: `"Answer: " + "X"` versus `"Answer:" + " X"`.
//!
//! The crate covers label tokenization against an exported vocabulary,
//! prompt rendering, a scoring-backend protocol with an in-process mock,
//! accuracy and calibration metrics, paired significance tests, and the
//! orchestration that ties them into cached, reproducible runs.

pub mod backend;
pub mod fingerprint;
pub mod harness;
pub mod metrics;
pub mod prompt;
pub mod selfcheck;
pub mod server;
pub mod stats;
pub mod tokenizer;

pub use backend::{MockBackend, MockBackendSpec, ScoringBackend};
pub use harness::{compare_strategies, leaderboard, run_eval, run_permutation_suite, HarnessError, RunConfig};
pub use metrics::{ece, normalize_probs, predict, RunResult};
pub use prompt::{render_prompt, PromptTemplate, Question};
pub use stats::{aggregate_deltas, mcnemar, paired_bootstrap_ece};
pub use tokenizer::{TokenizationStrategy, TokenizerModel};
