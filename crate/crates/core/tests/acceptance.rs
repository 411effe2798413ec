//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    config_in, fixture, flip_mock, golden, placeholder_exemplars, placeholder_question, FLIP_LETTER_CORRECT,
    FLIP_SPACE_CORRECT,
};
use labelspace::backend::{MockBackend, MockBackendSpec};
use labelspace::harness::leaderboard::load_leaderboard_csv;
use labelspace::harness::{compare_strategies, leaderboard, ComparisonReport};
use labelspace::metrics::{ece, normalize_probs, predict, ExampleResult};
use labelspace::prompt::{apply_variation, render_prompt, PromptTemplate, RoleWrappers, Variation};
use labelspace::stats::{mcnemar_from_counts, paired_bootstrap_ece, PairedOutcome, Sidedness};
use labelspace::tokenizer::{TokenizationStrategy, TokenizerModel};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn example(conf: f64, correct: bool) -> ExampleResult {
    ExampleResult {
        example_id: String::new(),
        distribution: vec![conf, 1.0 - conf],
        predicted_index: 0,
        confidence: conf,
        correct,
    }
}

/// Brute-force ECE: visit every bin, collect its members, sum the weighted gaps.
fn ece_oracle(items: &[(f64, bool)], bins: usize) -> f64 {
    let n = items.len() as f64;
    (1..=bins)
        .filter_map(|m| {
            let lo = (m - 1) as f64 / bins as f64;
            let hi = m as f64 / bins as f64;
            let members: Vec<_> = items
                .iter()
                .filter(|(c, _)| (*c > lo || m == 1) && (*c <= hi || m == bins))
                .collect();
            if members.is_empty() {
                return None;
            }
            let k = members.len() as f64;
            let acc = members.iter().filter(|(_, ok)| *ok).count() as f64 / k;
            let conf = members.iter().map(|(c, _)| c).sum::<f64>() / k;
            Some(k / n * (acc - conf).abs())
        })
        .sum()
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(1..=1000);
        let bins = [1, 5, 10][case % 3];
        let items: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let conf = if rng.random_bool(0.1) {
                    rng.random_range(1..=10) as f64 / 10.0
                } else {
                    rng.random_range(0.1..=1.0)
                };
                (conf, rng.random_bool(conf))
            })
            .collect();
        let results: Vec<ExampleResult> = items.iter().map(|&(c, ok)| example(c, ok)).collect();
        let (got, _) = ece(&results, bins).map_err(|e| e.to_string())?;
        let diff = (got - ece_oracle(&items, bins)).abs();
        worst = worst.max(diff);
        ensure(diff < 1e-12, || format!("case {case} (N={n}, M={bins}) off by {diff}"))?;
    }

    // Worked case: two examples at 0.95 (one right) and two at 0.65 (both right).
    let worked = [example(0.95, true), example(0.95, false), example(0.65, true), example(0.65, true)];
    let (v, _) = ece(&worked, 10).map_err(|e| e.to_string())?;
    // Both inputs lie in [0.5, 1), so each is m * 2^-53 for an integer m, and
    // the exact ECE 1/4 + (a - b)/2 equals (2^52 + m_a - m_b) * 2^-54.
    let mantissa = |x: f64| (x * 2f64.powi(53)) as u64;
    let exact = ((1u64 << 52) + mantissa(0.95) - mantissa(0.65)) as f64 * 2f64.powi(-54);
    ensure(v.to_bits() == exact.to_bits(), || format!("worked case {v:?}, exact value {exact:?}"))?;
    ensure(format!("{:.2}", v) == "0.40", || format!("worked case prints {v:.2}"))?;
    Ok(format!(
        "200 instances within {worst:.1e}; worked case = {v:?} (exact for the binary inputs), reported as {v:.2}"
    ))
}

fn criterion_2() -> Check {
    let mut row = vec![1u128];
    let mut checked = 0;
    for n in 0..=60u64 {
        if n > 0 {
            let mut next = vec![1u128; n as usize + 1];
            for k in 1..n as usize {
                next[k] = row[k - 1] + row[k];
            }
            row = next;
        }
        for b in 0..=n {
            let tail: u128 = row[b as usize..].iter().sum();
            // tail < 2^61, so the quotient by a power of two is exact.
            let oracle = tail as f64 / 2f64.powi(n as i32);
            let got = mcnemar_from_counts(b, n - b, Sidedness::OneSidedBGreater).p_value;
            ensure(got.to_bits() == oracle.to_bits(), || format!("b={b}, c={}: {got} vs {oracle}", n - b))?;
            checked += 1;
        }
    }
    let p = mcnemar_from_counts(10, 2, Sidedness::OneSidedBGreater).p_value;
    ensure(p == 79.0 / 4096.0, || format!("(10, 2) gave {p}"))?;
    Ok(format!("{checked} (b, c) cells exact; (10, 2) -> {p} = 79/4096"))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<PairedOutcome> = (0..200)
        .map(|i| PairedOutcome {
            example_id: format!("ex{i:03}"),
            correct_a: rng.random_bool(0.6),
            correct_b: rng.random_bool(0.65),
            confidence_a: rng.random_range(0.25..=1.0),
            confidence_b: rng.random_range(0.25..=1.0),
            predicted_a: 0,
            predicted_b: 0,
        })
        .collect();
    let (iterations, seed) = (10_000, 20_240_901);
    let first = paired_bootstrap_ece(&pairs, iterations, seed, 10).map_err(|e| e.to_string())?;
    let again = paired_bootstrap_ece(&pairs, iterations, seed, 10).map_err(|e| e.to_string())?;
    ensure(first == again, || "rerun differs".into())?;
    for k in 0..3 {
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        let other = paired_bootstrap_ece(&shuffled, iterations, seed, 10).map_err(|e| e.to_string())?;
        ensure(
            other.p_value.to_bits() == first.p_value.to_bits()
                && other.ci_95.0.to_bits() == first.ci_95.0.to_bits()
                && other.ci_95.1.to_bits() == first.ci_95.1.to_bits()
                && other == first,
            || format!("shuffle {k} differs"),
        )?;
    }
    let mirrored: Vec<PairedOutcome> = pairs
        .iter()
        .map(|p| PairedOutcome {
            correct_b: p.correct_a,
            confidence_b: p.confidence_a,
            ..p.clone()
        })
        .collect();
    let null = paired_bootstrap_ece(&mirrored, iterations, seed, 10).map_err(|e| e.to_string())?;
    ensure(null.observed_delta == 0.0, || format!("identical sides delta {}", null.observed_delta))?;
    Ok(format!(
        "bit-identical over rerun and 3 shuffles (p = {}); identical sides -> delta 0, p = {}",
        first.p_value, null.p_value
    ))
}

fn criterion_4() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut spec = MockBackendSpec::with_default(0.0);
    spec.candidate_logits.insert("3".into(), 1.4);
    spec.candidate_logits.insert("1".into(), 0.6);
    // Would separate the strategies if " 4" were ever scored as one token.
    spec.candidate_logits.insert(" 4".into(), 5.0);
    let mut cfg = config_in(dir.path(), &spec);
    cfg.template.variation = Some(Variation::Numbers);
    let out = compare_strategies(&cfg, &MockBackend::new(spec)).map_err(|e| e.to_string())?;
    let row = &out.row;
    let same = out
        .letter
        .records
        .iter()
        .zip(&out.space_letter.records)
        .all(|(a, b)| a.predicted_index == b.predicted_index);
    ensure(same, || "predictions differ".into())?;
    ensure(row.accuracy_delta == 0.0 && row.ece_delta == 0.0, || {
        format!("deltas {} / {}", row.accuracy_delta, row.ece_delta)
    })?;
    ensure(row.flags.token_identical, || "identity flag not set".into())?;
    Ok(format!(
        "n = {}, accuracy {:.2} under both, deltas exactly 0, identity flag set",
        row.n,
        row.accuracy_a * 100.0
    ))
}

fn criterion_5() -> Check {
    let entries = load_leaderboard_csv(fixture("table1_accuracy.csv")).map_err(|e| e.to_string())?;
    ensure(entries.len() == 15, || format!("{} models", entries.len()))?;
    let board = leaderboard(&entries).map_err(|e| e.to_string())?;
    let (top_a, top_b) = board.tops.clone().ok_or("no rank flip reported")?;
    ensure(board.rank_flip, || "rank_flip false".into())?;
    ensure(top_a == "Llama 3.1 70B Instruct", || format!("top_A {top_a}"))?;
    ensure(top_b == "Qwen 2.5 72B", || format!("top_B {top_b}"))?;
    ensure(board.letter[0].accuracy == 82.31 && board.space_letter[0].accuracy == 83.24, || {
        "top accuracies".into()
    })?;
    Ok(format!("top_A = {top_a} (82.31), top_B = {top_b} (83.24), rank_flip = true"))
}

fn criterion_6() -> Check {
    let wrappers = RoleWrappers {
        system: "{system token}".into(),
        user: "{user token}".into(),
        assistant: "{assistant token}".into(),
    };
    let base = PromptTemplate::base();
    let variant = |v| apply_variation(&base, v).map_err(|e| e.to_string());
    let templates = [
        ("base", base.clone()),
        ("instruct", PromptTemplate::instruct(wrappers)),
        ("space_in_option_list", variant(Variation::SpaceInOptionList)?),
        ("parentheses", variant(Variation::Parentheses)?),
        ("numbers", variant(Variation::Numbers)?),
        ("choices_before_question", variant(Variation::ChoicesBeforeQuestion)?),
    ];
    let q = placeholder_question();
    let mut files = 0;
    for (name, t) in &templates {
        for s in TokenizationStrategy::BOTH {
            let r = render_prompt(&q, t, s, &[]).map_err(|e| e.to_string())?;
            ensure(r.text == golden(&format!("{name}.{}", s.as_str())), || format!("{name} {s} differs"))?;
            files += 1;
        }
    }
    let exemplars = placeholder_exemplars();
    for s in TokenizationStrategy::BOTH {
        let r = render_prompt(&q, &base, s, &exemplars).map_err(|e| e.to_string())?;
        ensure(r.text == golden(&format!("base_5shot.{}", s.as_str())), || format!("5-shot {s} differs"))?;
        let answered = r.text.matches("Answer: ").count() - usize::from(s == TokenizationStrategy::LetterOnly);
        ensure(answered == 5, || format!("5-shot {s}: {answered} answered blocks"))?;
        files += 1;
    }
    Ok(format!("{files} golden files byte-identical (5-shot has 5 answered blocks)"))
}

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = flip_mock();
    let cfg = config_in(dir.path(), &spec);
    let mock = MockBackend::new(spec);
    let cold = compare_strategies(&cfg, &mock).map_err(|e| e.to_string())?;
    let row = &cold.row;
    let expected_gain = (FLIP_SPACE_CORRECT - FLIP_LETTER_CORRECT) as f64 / 20.0;
    ensure(row.accuracy_delta == 0.15 && expected_gain == 0.15, || {
        format!("delta {}", row.accuracy_delta)
    })?;
    ensure(row.mcnemar.b == 3 && row.mcnemar.c == 0, || format!("b={}, c={}", row.mcnemar.b, row.mcnemar.c))?;
    ensure(row.mcnemar.p_value == 0.125 && !row.accuracy_significant, || {
        format!("p = {}", row.mcnemar.p_value)
    })?;

    mock.reset_counters();
    let warm = compare_strategies(&cfg, &mock).map_err(|e| e.to_string())?;
    ensure(mock.total_calls() == 0, || format!("{} calls on warm rerun", mock.total_calls()))?;
    let report = |r: &labelspace::harness::ComparisonRow| {
        let rep = ComparisonReport::new(vec![r.clone()]);
        (rep.render_table(), rep.to_csv())
    };
    ensure(warm.row == cold.row && report(&warm.row) == report(&cold.row), || "warm report differs".into())?;
    Ok(format!(
        "delta +{:.2}, b=3, c=0, p = {}; warm rerun: 0 backend calls, identical report",
        row.accuracy_delta, row.mcnemar.p_value
    ))
}

/// The cosine as written in the criterion, kept as a literal on purpose.
#[allow(clippy::approx_constant)]
const LITERAL_COS: f64 = 0.70710678;

/// Greedy longest match written out directly over the surface list.
fn longest_match_oracle(surfaces: &[&str], text: &str, marker: &str) -> Vec<u32> {
    let normalized = text.replace(' ', marker);
    let mut rest = normalized.as_str();
    let mut ids = Vec::new();
    while !rest.is_empty() {
        let (id, s) = surfaces
            .iter()
            .enumerate()
            .filter(|(_, s)| rest.starts_with(**s))
            .max_by_key(|(_, s)| s.len())
            .expect("vocabulary covers every character");
        ids.push(id as u32);
        rest = &rest[s.len()..];
    }
    ids
}

fn criterion_8() -> Check {
    let marker = "Ġ";
    let surfaces = [
        "a", "b", "c", "d", "Ġ", "aa", "aaa", "aaaa", "ab", "aab", "abc", "bc", "bcd", "cd", "Ġa", "Ġaa", "Ġab",
        "Ġabc", "ĠĠ", "da", "dab",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 6;
    let embeddings: Vec<Vec<f64>> = surfaces
        .iter()
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let tok = TokenizerModel::from_entries(
        surfaces.iter().enumerate().map(|(i, s)| (*s, i as u32)),
        marker,
        Some(embeddings),
    )
    .map_err(|e| e.to_string())?;

    let alphabet = ['a', 'b', 'c', 'd', ' '];
    for case in 0..1000 {
        let len = rng.random_range(0..40);
        let text: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        let ids = tok.encode(&text).map_err(|e| format!("{text:?}: {e}"))?;
        let back = tok.decode(&ids).map_err(|e| e.to_string())?;
        ensure(back == text, || format!("case {case}: {text:?} -> {back:?}"))?;
        let oracle = longest_match_oracle(&surfaces, &text, marker);
        ensure(ids == oracle, || format!("case {case}: {text:?} gives {ids:?}, longest match {oracle:?}"))?;
    }

    let all: Vec<u32> = (0..surfaces.len() as u32).collect();
    let sim = tok.embedding_similarity(&all).map_err(|e| e.to_string())?;
    for (i, row) in sim.iter().enumerate() {
        ensure((row[i] - 1.0).abs() < 1e-12, || format!("diagonal {i}: {}", row[i]))?;
        for (j, v) in row.iter().enumerate() {
            ensure((v - sim[j][i]).abs() < 1e-12, || format!("asymmetric at ({i}, {j})"))?;
        }
    }
    let unit = TokenizerModel::from_entries([("x", 0u32), ("y", 1)], marker, Some(vec![vec![1.0, 0.0], vec![1.0, 1.0]]))
        .map_err(|e| e.to_string())?;
    let cos = unit.embedding_similarity(&[0, 1]).map_err(|e| e.to_string())?[0][1];
    // 0.70710678 is 1/sqrt(2) cut to eight places; the cut alone is 1.19e-9,
    // so the tolerance is applied to 1/sqrt(2) and the eight places are compared as text.
    let exact = std::f64::consts::FRAC_1_SQRT_2;
    ensure((cos - exact).abs() < 1e-9, || format!("cos = {cos}, 1/sqrt(2) = {exact}"))?;
    ensure(format!("{cos:.8}") == LITERAL_COS.to_string(), || format!("cos = {cos:.8}"))?;
    Ok(format!(
        "1000 round trips, all longest-match; {n}x{n} similarity symmetric with unit diagonal; \
         cos = {cos:.8} (|cos - 1/sqrt(2)| = {:.1e}; literal 0.70710678 is {:.2e} away)",
        (cos - exact).abs(),
        (cos - LITERAL_COS).abs(),
        n = all.len()
    ))
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let k = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let p = normalize_probs(&logits).map_err(|e| e.to_string())?;
        let q = normalize_probs(&shifted).map_err(|e| e.to_string())?;
        let diff = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        ensure(diff < 1e-9, || format!("case {case}: shift {shift} moves probabilities by {diff}"))?;
        let (ip, _) = predict(&p).map_err(|e| e.to_string())?;
        let (iq, _) = predict(&q).map_err(|e| e.to_string())?;
        ensure(ip == iq, || format!("case {case}: argmax {ip} vs {iq}"))?;
    }
    Ok(format!("1000 vectors; largest probability change {worst:.1e}; argmax unchanged"))
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = flip_mock();
    let cfg = config_in(dir.path(), &spec);
    let base = compare_strategies(&cfg, &MockBackend::new(spec)).map_err(|e| e.to_string())?.row;
    let fixtures = [("p0499", 0.0499, true), ("p0500", 0.05, false), ("p0501", 0.0501, false)];
    let rows: Vec<_> = fixtures
        .iter()
        .map(|&(id, p, _)| {
            let mut r = base.clone();
            r.model_id = id.into();
            r.mcnemar.p_value = p;
            r.bootstrap.p_value = p;
            r
        })
        .collect();
    let report = ComparisonReport::new(rows);
    let table = report.render_table();
    for &(id, _, want) in &fixtures {
        let line = table.lines().find(|l| l.starts_with(id)).ok_or(format!("{id} missing from table"))?;
        let stars = line.matches('*').count();
        ensure(stars == if want { 2 } else { 0 }, || format!("{id}: {stars} marks in {line:?}"))?;
    }
    let csv_text = report.to_csv();
    let mut csv = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = csv.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("no {name} column"));
    let (acc, ece_col) = (col("accuracy_significant")?, col("ece_significant")?);
    for (rec, &(id, _, want)) in csv.records().zip(&fixtures) {
        let rec = rec.map_err(|e| e.to_string())?;
        let flags = (&rec[acc] == "true", &rec[ece_col] == "true");
        ensure(flags == (want, want), || format!("{id}: csv flags {flags:?}"))?;
    }
    Ok("p = 0.0499 marked; p = 0.05 and 0.0501 unmarked, in table and CSV".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("ECE oracle equivalence", criterion_1),
        ("McNemar exactness", criterion_2),
        ("bootstrap reproducibility", criterion_3),
        ("numeric-label identity", criterion_4),
        ("rank-flip fixture", criterion_5),
        ("golden prompt bytes", criterion_6),
        ("end-to-end scripted delta", criterion_7),
        ("tokenizer properties", criterion_8),
        ("softmax/argmax invariance", criterion_9),
        ("significance threshold wiring", criterion_10),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
