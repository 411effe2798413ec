#![allow(dead_code)]

use std::path::{Path, PathBuf};

use labelspace::backend::MockBackendSpec;
use labelspace::harness::{load_dataset, BackendConfig, RunConfig};
use labelspace::prompt::{render_prompt, PromptTemplate, Question};
use labelspace::tokenizer::TokenizationStrategy;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn workspace_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(name)
}

pub fn questions20() -> Vec<Question> {
    load_dataset(fixture("questions20.jsonl")).unwrap()
}

/// A config over the 20-question fixture whose mock spec and cache live in `dir`.
pub fn config_in(dir: &Path, spec: &MockBackendSpec) -> RunConfig {
    let spec_path = dir.join("mock.json");
    spec.save(&spec_path).unwrap();
    let mut cfg = RunConfig::new(
        fixture("questions20.jsonl"),
        fixture("vocab.tsv"),
        "mock-model",
        BackendConfig::mock(&spec_path),
        dir.join("cache"),
    );
    cfg.bootstrap.iterations = 1_000;
    cfg.bootstrap.seed = 42;
    cfg
}

/// Scripts the mock so that, for the zero-shot base prompt of `q` under
/// `strategy`, option `chosen` gets logit `high` and the rest the default.
pub fn script_choice(
    spec: &mut MockBackendSpec,
    q: &Question,
    template: &PromptTemplate,
    strategy: TokenizationStrategy,
    chosen: usize,
    high: f64,
) {
    let prompt = render_prompt(q, template, strategy, &[]).unwrap();
    let candidate = strategy.candidate_surface(&prompt.labels[chosen]);
    spec.score(&prompt.text, &candidate, high);
}

pub fn placeholder_question() -> Question {
    Question {
        id: "placeholder".into(),
        stem: "{question}".into(),
        options: ["A", "B", "C", "D"]
            .iter()
            .map(|l| format!("{{option {l}}}"))
            .collect(),
        gold_index: 0,
        subject: None,
        language: None,
    }
}

/// Placeholder exemplars answered A, B, C, D, B.
pub fn placeholder_exemplars() -> Vec<Question> {
    [0usize, 1, 2, 3, 1]
        .iter()
        .enumerate()
        .map(|(k, &gold)| Question {
            id: format!("example{}", k + 1),
            stem: format!("{{example {} question}}", k + 1),
            options: ["A", "B", "C", "D"]
                .iter()
                .map(|l| format!("{{example {} option {l}}}", k + 1))
                .collect(),
            gold_index: gold,
            subject: None,
            language: None,
        })
        .collect()
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(fixture(&format!("golden/{name}.txt"))).unwrap()
}

/// Gold indices read straight from the JSONL fixture, bypassing the loader.
pub fn raw_golds(name: &str) -> Vec<(String, usize)> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["id"].as_str().unwrap().to_string(), v["answer"].as_u64().unwrap() as usize)
        })
        .collect()
}

/// Which questions each strategy answers correctly in the three-flip fixture:
/// letter-only gets q01..q10, space-letter gets q01..q13.
pub const FLIP_LETTER_CORRECT: usize = 10;
pub const FLIP_SPACE_CORRECT: usize = 13;

/// Mock where every question has one scripted winner per strategy: the gold
/// option when the question is inside that strategy's correct prefix, the
/// next option otherwise.
pub fn flip_mock() -> MockBackendSpec {
    let mut spec = MockBackendSpec::with_default(0.0);
    let base = PromptTemplate::base();
    for (i, q) in questions20().iter().enumerate() {
        for (strategy, correct) in [
            (TokenizationStrategy::LetterOnly, FLIP_LETTER_CORRECT),
            (TokenizationStrategy::SpaceLetter, FLIP_SPACE_CORRECT),
        ] {
            let chosen = if i < correct { q.gold_index } else { (q.gold_index + 1) % q.options.len() };
            // Confidence varies by question so ECE has something to measure.
            script_choice(&mut spec, q, &base, strategy, chosen, 1.0 + 0.1 * i as f64);
        }
    }
    spec
}
