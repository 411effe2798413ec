//! Paired comparison of the two tokenization strategies.
//!
//! Side A is `letter` ("X") and side B is `space-letter` ("␣X") everywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::ScoringBackend;
use crate::prompt::{generate_permutations, permute_options, Question};
use crate::stats::{
    mcnemar, paired_bootstrap_ece, BootstrapResult, McNemarResult, PairedOutcome, Sidedness,
    SIGNIFICANCE_LEVEL,
};
use crate::tokenizer::TokenizationStrategy;

use super::config::RunConfig;
use super::run::{Evaluator, RunOutput};
use super::HarnessError;

/// Conditions worth a footnote next to a comparison row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonFlags {
    /// Every option of every example was scored with the same request under
    /// both strategies, so all numbers are equal by construction.
    pub token_identical: bool,
    pub identical_predictions: bool,
    pub multi_token_labels: bool,
    pub divergent_prefixes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_id: String,
    pub dataset_id: String,
    pub template_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub shots: usize,
    pub cot: bool,
    pub n: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub ece_a: f64,
    pub ece_b: f64,
    /// `accuracy_b - accuracy_a`, from the correct-count difference.
    pub accuracy_delta: f64,
    /// `ece_a - ece_b`; positive when B is better calibrated.
    pub ece_delta: f64,
    pub mcnemar: McNemarResult,
    pub bootstrap: BootstrapResult,
    pub accuracy_significant: bool,
    pub ece_significant: bool,
    pub flags: ComparisonFlags,
}

impl ComparisonRow {
    /// Pairs two runs by example id and attaches both significance tests.
    pub fn from_runs(
        a: &RunOutput,
        b: &RunOutput,
        shots: usize,
        cot: bool,
        iterations: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        check_pairing(a, b)?;
        let pairs: Vec<PairedOutcome> = a
            .records
            .iter()
            .zip(&b.records)
            .map(|(ra, rb)| PairedOutcome {
                example_id: ra.example_id.clone(),
                correct_a: ra.correct,
                correct_b: rb.correct,
                confidence_a: ra.confidence,
                confidence_b: rb.confidence,
                predicted_a: ra.predicted_index,
                predicted_b: rb.predicted_index,
            })
            .collect();
        let mcnemar = mcnemar(&pairs, Sidedness::OneSidedBGreater)?;
        let bootstrap = paired_bootstrap_ece(&pairs, iterations, seed, a.result.bins.num_bins())?;

        let n = pairs.len();
        let correct_a = pairs.iter().filter(|p| p.correct_a).count() as f64;
        let correct_b = pairs.iter().filter(|p| p.correct_b).count() as f64;
        let flags = ComparisonFlags {
            token_identical: a
                .records
                .iter()
                .zip(&b.records)
                .all(|(ra, rb)| ra.scored_as == rb.scored_as),
            identical_predictions: pairs.iter().all(|p| p.predicted_a == p.predicted_b),
            multi_token_labels: a.flags.multi_token_labels || b.flags.multi_token_labels,
            divergent_prefixes: a.flags.divergent_prefixes || b.flags.divergent_prefixes,
        };
        Ok(Self {
            model_id: a.result.model_id.clone(),
            dataset_id: a.result.dataset_id.clone(),
            template_id: a.result.template_id.clone(),
            variant: a.records.first().and_then(|r| r.variant.clone()),
            shots,
            cot,
            n,
            accuracy_a: a.result.accuracy,
            accuracy_b: b.result.accuracy,
            ece_a: a.result.ece,
            ece_b: b.result.ece,
            accuracy_delta: (correct_b - correct_a) / n as f64,
            ece_delta: a.result.ece - b.result.ece,
            accuracy_significant: mcnemar.significant(),
            ece_significant: bootstrap.significant(),
            mcnemar,
            bootstrap,
            flags,
        })
    }

    /// Short description of the prompting setting.
    pub fn setting(&self) -> String {
        let mut s = format!("{}-shot", self.shots);
        if self.cot {
            s.push_str("+CoT");
        }
        if let Some(v) = &self.variant {
            s.push('@');
            s.push_str(v);
        }
        s
    }
}

fn check_pairing(a: &RunOutput, b: &RunOutput) -> Result<(), HarnessError> {
    let ids_a: Vec<&str> = a.records.iter().map(|r| r.example_id.as_str()).collect();
    let ids_b: Vec<&str> = b.records.iter().map(|r| r.example_id.as_str()).collect();
    if ids_a == ids_b {
        return Ok(());
    }
    let only = |x: &[&str], y: &[&str]| -> Vec<String> {
        x.iter()
            .filter(|id| y.binary_search(id).is_err())
            .map(|s| s.to_string())
            .collect()
    };
    Err(HarnessError::PairingMismatch {
        only_a: only(&ids_a, &ids_b),
        only_b: only(&ids_b, &ids_a),
    })
}

/// How the tests attached to each row were computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsMethods {
    pub significance_level: f64,
    pub accuracy_test: String,
    pub ece_test: String,
    pub ece_p_value: String,
    pub interval: String,
}

impl Default for StatsMethods {
    fn default() -> Self {
        Self {
            significance_level: SIGNIFICANCE_LEVEL,
            accuracy_test: "exact binomial McNemar, one-sided (space-letter better)".into(),
            ece_test: "paired bootstrap over examples, ChaCha8 stream per iteration".into(),
            ece_p_value: "fraction of resampled ECE(letter) - ECE(space-letter) <= 0".into(),
            interval: "percentile 2.5/97.5 with linear interpolation".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub methods: StatsMethods,
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn signed_pct(x: f64) -> String {
    format!("{:+.2}", x * 100.0)
}

fn marked(x: f64, significant: bool) -> String {
    if significant {
        format!("{}*", pct(x))
    } else {
        pct(x)
    }
}

fn notes(flags: &ComparisonFlags) -> String {
    let mut out = Vec::new();
    if flags.token_identical {
        out.push("a");
    }
    if flags.multi_token_labels {
        out.push("b");
    }
    if flags.divergent_prefixes {
        out.push("c");
    }
    out.join(",")
}

fn render_aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = w - cell.chars().count();
            // First column left-aligned, numbers right-aligned.
            if i == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.clone()));
        out.push('\n');
    }
    out
}

const TABLE_HEADER: [&str; 12] = [
    "model", "setting", "n", "acc X", "acc ␣X", "Δacc", "ECE X", "ECE ␣X", "ΔECE", "p(McNemar)",
    "p(bootstrap)", "notes",
];

impl ComparisonReport {
    pub fn new(rows: Vec<ComparisonRow>) -> Self {
        Self {
            rows,
            methods: StatsMethods::default(),
        }
    }

    /// Aligned text table; values ×100 with two decimals. A `*` on the ␣X
    /// column marks p < 0.05 for that metric's test.
    pub fn render_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.model_id.clone(),
                    r.setting(),
                    r.n.to_string(),
                    pct(r.accuracy_a),
                    marked(r.accuracy_b, r.mcnemar.significant()),
                    signed_pct(r.accuracy_delta),
                    pct(r.ece_a),
                    marked(r.ece_b, r.bootstrap.significant()),
                    signed_pct(-r.ece_delta),
                    format!("{:.4}", r.mcnemar.p_value),
                    format!("{:.4}", r.bootstrap.p_value),
                    notes(&r.flags),
                ]
            })
            .collect();
        let mut out = render_aligned(&TABLE_HEADER, &rows);
        out.push_str(&format!(
            "\n* p < {} (accuracy: {}; ECE: {})\n",
            self.methods.significance_level, self.methods.accuracy_test, self.methods.ece_test
        ));
        let any = |f: fn(&ComparisonFlags) -> bool| self.rows.iter().any(|r| f(&r.flags));
        if any(|f| f.token_identical) {
            out.push_str("a: both strategies resolve to identical scoring requests; results are equal by construction\n");
        }
        if any(|f| f.multi_token_labels) {
            out.push_str("b: some labels span several tokens; leading tokens were appended to the prompt\n");
        }
        if any(|f| f.divergent_prefixes) {
            out.push_str("c: multi-token labels had different leading tokens; options were scored against different prompts\n");
        }
        if self.rows.iter().any(|r| r.cot) {
            out.push_str("CoT rows: the label follows generated reasoning, so accuracy and ECE significance are reported independently\n");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model",
            "dataset",
            "template",
            "setting",
            "n",
            "accuracy_a",
            "accuracy_b",
            "accuracy_b_minus_a",
            "ece_a",
            "ece_b",
            "ece_b_minus_a",
            "mcnemar_b",
            "mcnemar_c",
            "mcnemar_p",
            "accuracy_significant",
            "bootstrap_p",
            "bootstrap_ci_low",
            "bootstrap_ci_high",
            "ece_significant",
            "token_identical",
            "identical_predictions",
            "multi_token_labels",
            "divergent_prefixes",
        ])
        .expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.model_id.clone(),
                r.dataset_id.clone(),
                r.template_id.clone(),
                r.setting(),
                r.n.to_string(),
                pct(r.accuracy_a),
                pct(r.accuracy_b),
                pct(r.accuracy_delta),
                pct(r.ece_a),
                pct(r.ece_b),
                pct(-r.ece_delta),
                r.mcnemar.b.to_string(),
                r.mcnemar.c.to_string(),
                r.mcnemar.p_value.to_string(),
                r.mcnemar.significant().to_string(),
                r.bootstrap.p_value.to_string(),
                pct(r.bootstrap.ci_95.0),
                pct(r.bootstrap.ci_95.1),
                r.bootstrap.significant().to_string(),
                r.flags.token_identical.to_string(),
                r.flags.identical_predictions.to_string(),
                r.flags.multi_token_labels.to_string(),
                r.flags.divergent_prefixes.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

/// Both runs plus the paired row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutput {
    pub row: ComparisonRow,
    pub letter: RunOutput,
    pub space_letter: RunOutput,
}

fn compare_on(
    eval: &Evaluator<'_>,
    questions: &[Question],
    variant: Option<&str>,
) -> Result<ComparisonOutput, HarnessError> {
    let cfg = eval.config();
    let letter = eval.run(TokenizationStrategy::LetterOnly, questions, variant)?;
    let space_letter = eval.run(TokenizationStrategy::SpaceLetter, questions, variant)?;
    let row = ComparisonRow::from_runs(
        &letter,
        &space_letter,
        cfg.shots,
        cfg.cot,
        cfg.bootstrap.iterations,
        cfg.bootstrap.seed,
    )?;
    Ok(ComparisonOutput {
        row,
        letter,
        space_letter,
    })
}

/// Runs both strategies on the configured dataset (ignoring `cfg.strategy`)
/// and pairs the results.
pub fn compare_strategies(
    cfg: &RunConfig,
    backend: &dyn ScoringBackend,
) -> Result<ComparisonOutput, HarnessError> {
    let eval = Evaluator::new(cfg, backend)?;
    compare_on(&eval, eval.questions(), None)
}

/// Mean over permutations of the per-permutation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationAverage {
    pub count: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub ece_a: f64,
    pub ece_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationSuite {
    pub seed: u64,
    /// Permutations used for questions with each option count; question
    /// options are reordered with the k-th entry in run k.
    pub permutations: BTreeMap<usize, Vec<Vec<usize>>>,
    pub report: ComparisonReport,
    pub average: PermutationAverage,
}

impl PermutationSuite {
    pub fn render_table(&self) -> String {
        let mut out = self.report.render_table();
        let a = &self.average;
        out.push_str(&format!(
            "\naverage over {} permutations: acc X {}  acc ␣X {}  ECE X {}  ECE ␣X {}\n",
            a.count,
            pct(a.accuracy_a),
            pct(a.accuracy_b),
            pct(a.ece_a),
            pct(a.ece_b)
        ));
        out
    }
}

/// Variant label used for the k-th permutation run (1-based).
pub fn permutation_variant(k: usize) -> String {
    format!("perm{k}")
}

/// Compares strategies under `count` seeded option shufflings.
pub fn run_permutation_suite(
    cfg: &RunConfig,
    backend: &dyn ScoringBackend,
    count: usize,
    seed: u64,
) -> Result<PermutationSuite, HarnessError> {
    let eval = Evaluator::new(cfg, backend)?;
    let mut permutations = BTreeMap::new();
    for q in eval.questions() {
        let n = q.options.len();
        if let std::collections::btree_map::Entry::Vacant(e) = permutations.entry(n) {
            e.insert(generate_permutations(n, count, seed)?);
        }
    }
    let shuffle = |q: &Question, k: usize| permute_options(q, &permutations[&q.options.len()][k]);
    let mut rows = Vec::with_capacity(count);
    for k in 0..count {
        let permuted = eval
            .questions()
            .iter()
            .map(|q| shuffle(q, k))
            .collect::<Result<Vec<_>, _>>()?;
        let variant = permutation_variant(k + 1);
        rows.push(compare_on(&eval, &permuted, Some(&variant))?.row);
    }
    let mean = |f: fn(&ComparisonRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let average = PermutationAverage {
        count,
        accuracy_a: mean(|r| r.accuracy_a),
        accuracy_b: mean(|r| r.accuracy_b),
        ece_a: mean(|r| r.ece_a),
        ece_b: mean(|r| r.ece_b),
    };
    Ok(PermutationSuite {
        seed,
        permutations,
        report: ComparisonReport::new(rows),
        average,
    })
}
