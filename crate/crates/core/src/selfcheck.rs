//! Quick oracle checks runnable from the command line. Each check compares
//! library output with a small independent computation.

use crate::metrics::{ece, normalize_probs, predict, ExampleResult};
use crate::prompt::{render_prompt, PromptTemplate, Question};
use crate::stats::{mcnemar_from_counts, paired_bootstrap_ece, PairedOutcome, Sidedness};
use crate::tokenizer::{TokenizationStrategy, TokenizerModel};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, result: Result<String, String>) -> CheckOutcome {
    match result {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn result(conf: f64, correct: bool) -> ExampleResult {
    ExampleResult {
        example_id: String::new(),
        distribution: vec![conf, 1.0 - conf],
        predicted_index: 0,
        confidence: conf,
        correct,
    }
}

fn check_softmax() -> Result<String, String> {
    let p = normalize_probs(&[0.0, 3f64.ln()]).map_err(|e| e.to_string())?;
    ensure((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12, || format!("{p:?}"))?;
    let shifted = normalize_probs(&[5.0, 5.0 + 3f64.ln()]).map_err(|e| e.to_string())?;
    ensure((shifted[1] - 0.75).abs() < 1e-12, || format!("{shifted:?}"))?;
    let tie = predict(&[0.25, 0.25, 0.25, 0.25]).map_err(|e| e.to_string())?;
    ensure(tie == (0, 0.25), || format!("tie -> {tie:?}"))?;
    Ok("[0, ln 3] -> [0.25, 0.75]; ties pick index 0".into())
}

fn check_ece() -> Result<String, String> {
    let rs = [
        result(0.95, true),
        result(0.95, false),
        result(0.65, true),
        result(0.65, true),
    ];
    let (value, bins) = ece(&rs, 10).map_err(|e| e.to_string())?;
    // Two occupied bins, each holding half the examples.
    let direct = 0.5 * (0.5f64 - 0.95).abs() + 0.5 * (1.0f64 - 0.65).abs();
    ensure((value - direct).abs() < 1e-12, || format!("{value} vs {direct}"))?;
    ensure(format!("{value:.2}") == "0.40", || format!("{value}"))?;
    ensure(bins.bins[9].count == 2 && bins.bins[6].count == 2, || "bin counts".into())?;
    Ok(format!("worked example ECE = {value:.2}"))
}

fn check_mcnemar() -> Result<String, String> {
    // Pascal's triangle in u128 is exact for these sizes.
    let mut row = vec![1u128];
    for n in 1..=60u64 {
        let mut next = vec![1u128; n as usize + 1];
        for k in 1..n as usize {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
        for b in 0..=n {
            let tail: u128 = row[b as usize..].iter().sum();
            let oracle = tail as f64 / 2f64.powi(n as i32);
            let got = mcnemar_from_counts(b, n - b, Sidedness::OneSidedBGreater).p_value;
            ensure(got == oracle, || format!("b={b} n={n}: {got} vs {oracle}"))?;
        }
    }
    let p = mcnemar_from_counts(10, 2, Sidedness::OneSidedBGreater).p_value;
    ensure(p == 79.0 / 4096.0, || format!("(10,2) -> {p}"))?;
    Ok("exact for all b + c <= 60; (10, 2) -> 79/4096".into())
}

fn check_bootstrap() -> Result<String, String> {
    let pairs: Vec<PairedOutcome> = (0..30)
        .map(|i| PairedOutcome {
            example_id: format!("e{i:02}"),
            correct_a: i % 3 == 0,
            correct_b: i % 2 == 0,
            confidence_a: 0.4 + 0.02 * i as f64,
            confidence_b: 0.5 + 0.01 * i as f64,
            predicted_a: 0,
            predicted_b: 0,
        })
        .collect();
    let first = paired_bootstrap_ece(&pairs, 500, 7, 10).map_err(|e| e.to_string())?;
    let mut reversed = pairs.clone();
    reversed.reverse();
    let second = paired_bootstrap_ece(&reversed, 500, 7, 10).map_err(|e| e.to_string())?;
    ensure(first == second, || "result depends on input order".into())?;
    Ok(format!("seeded and order-independent (p = {})", first.p_value))
}

fn check_tokenizer() -> Result<String, String> {
    let entries = [("A", 0u32), ("␣A", 1), ("␣", 2), ("B", 3), ("AB", 4)];
    let tok = TokenizerModel::from_entries(entries, "␣", Some(vec![
        vec![1.0, 0.0],
        vec![1.0, 1.0],
        vec![0.0, 1.0],
        vec![1.0, 2.0],
        vec![2.0, 1.0],
    ]))
    .map_err(|e| e.to_string())?;
    for text in ["AB A", " AB", "BA A B"] {
        let ids = tok.encode(text).map_err(|e| e.to_string())?;
        let back = tok.decode(&ids).map_err(|e| e.to_string())?;
        ensure(back == text, || format!("{text:?} -> {back:?}"))?;
    }
    ensure(tok.encode(" A").map_err(|e| e.to_string())? == vec![1], || "\" A\" is not fused".into())?;
    let sim = tok.embedding_similarity(&[0, 1]).map_err(|e| e.to_string())?;
    let expected = std::f64::consts::FRAC_1_SQRT_2;
    ensure((sim[0][1] - expected).abs() < 1e-9, || format!("cos = {}", sim[0][1]))?;
    Ok("round trips; longest match; cos((1,0),(1,1)) = 0.70710678".into())
}

fn check_prompt() -> Result<String, String> {
    let q = Question {
        id: "q".into(),
        stem: "2 + 2 = ?".into(),
        options: vec!["3".into(), "4".into()],
        gold_index: 1,
        subject: None,
        language: None,
    };
    let t = PromptTemplate::base();
    let letter = render_prompt(&q, &t, TokenizationStrategy::LetterOnly, &[]).map_err(|e| e.to_string())?;
    let expected = "The following are multiple choice questions (with answers).\nQuestion: 2 + 2 = ?\nA. 3\nB. 4\nAnswer: ";
    ensure(letter.text == expected, || format!("{:?}", letter.text))?;
    let space = render_prompt(&q, &t, TokenizationStrategy::SpaceLetter, &[]).map_err(|e| e.to_string())?;
    ensure(space.text == expected.trim_end_matches(' '), || format!("{:?}", space.text))?;
    ensure(space.candidate_surfaces == [" A".to_string(), " B".to_string()], || {
        format!("{:?}", space.candidate_surfaces)
    })?;
    Ok("base prompt bytes for both strategies".into())
}

/// Runs every check; never panics.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome("softmax and argmax", check_softmax()),
        outcome("ECE worked example", check_ece()),
        outcome("exact McNemar", check_mcnemar()),
        outcome("bootstrap determinism", check_bootstrap()),
        outcome("tokenizer", check_tokenizer()),
        outcome("prompt rendering", check_prompt()),
    ]
}
