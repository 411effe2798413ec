use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn labelspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelspace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_ok(args: &[&str]) -> String {
    let o = labelspace(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

/// Demo config plus per-test cache and output directories.
fn demo_args<'a>(cmd: &'a str, dir: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        cmd.into(),
        "--config".into(),
        repo("configs/demo.toml").display().to_string(),
        "--cache-dir".into(),
        dir.join("cache").display().to_string(),
        "--out".into(),
        dir.join("out").display().to_string(),
        "--iterations".into(),
        "200".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn run_demo(cmd: &str, dir: &Path, extra: &[&str]) -> String {
    let args = demo_args(cmd, dir, extra);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn selfcheck_passes() {
    let out = run_ok(&["selfcheck"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn compare_writes_reports_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_demo("compare", dir.path(), &[]);
    assert!(first.contains("acc ␣X"));
    for name in ["comparison.txt", "comparison.csv", "comparison.json", "demo-mock.questions20.letter.report.json"] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    let second = run_demo("compare", dir.path(), &[]);
    let table = |s: &str| s.lines().take_while(|l| !l.starts_with("wrote")).collect::<Vec<_>>().join("\n");
    assert_eq!(table(&first), table(&second));
}

#[test]
fn run_honours_strategy_and_seed_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_demo("run", dir.path(), &["--strategy", "letter", "--seed", "5", "--shots", "2"]);
    assert!(out.contains("letter: n=20"), "{out}");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/demo-mock.questions20.letter.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["seeds"]["exemplar_seed"], 5);
    assert_eq!(report["seeds"]["bootstrap_seed"], 5);
    assert_eq!(report["config"]["shots"], 2);
    assert_eq!(report["config"]["strategy"], "letter");
}

#[test]
fn cot_run_records_reasoning() {
    let dir = tempfile::tempdir().unwrap();
    run_demo("run", dir.path(), &["--cot"]);
    let examples =
        std::fs::read_to_string(dir.path().join("out/demo-mock.questions20.space-letter.examples.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(examples.lines().next().unwrap()).unwrap();
    assert_eq!(first["reasoning"], "The second option fits best. ");
}

#[test]
fn render_dumps_both_strategies_without_a_backend() {
    let dir = tempfile::tempdir().unwrap();
    run_demo("render", dir.path(), &[]);
    let out = dir.path().join("out");
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 40);
    let letter = std::fs::read_to_string(out.join("q01.letter.txt")).unwrap();
    let space = std::fs::read_to_string(out.join("q01.space-letter.txt")).unwrap();
    assert_eq!(letter, format!("{space} "));
    assert!(space.ends_with("\nAnswer:"));
    assert!(!dir.path().join("cache").exists() || std::fs::read_dir(dir.path().join("cache")).unwrap().count() == 0);
}

#[test]
fn permute_reports_each_shuffle_and_the_average() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_demo("permute", dir.path(), &["--count", "3"]);
    for k in 1..=3 {
        assert!(out.contains(&format!("@perm{k}")), "{out}");
    }
    assert!(out.contains("average over 3 permutations"));
    assert!(dir.path().join("out/permutations.suite.json").exists());
}

#[test]
fn leaderboard_reports_the_flip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = repo("crates/core/tests/fixtures/table1_accuracy.csv");
    let out = run_ok(&[
        "leaderboard",
        csv.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.contains("Qwen 2.5 72B"), "{out}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("leaderboard.json")).unwrap()).unwrap();
    assert_eq!(json["rank_flip"], true);
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let missing = labelspace(&["run", "--config", "/nonexistent/config.toml"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.csv");
    std::fs::write(&one, "model,letter,space_letter\nsolo,50,51\n").unwrap();
    let single = labelspace(&["leaderboard", one.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!single.status.success());
    assert!(String::from_utf8_lossy(&single.stderr).contains("at least 2 models"));
}

#[test]
fn endpoint_backend_matches_the_in_process_mock() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut server = Command::new(env!("CARGO_BIN_EXE_labelspace"))
        .args(["serve-mock", repo("configs/demo_mock.json").to_str().unwrap(), "--addr", &addr])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.contains("serving mock backend"), "{line}");

    let local = run_demo("run", &dir.path().join("local"), &[]);
    let remote = run_demo("run", &dir.path().join("remote"), &["--endpoint", &format!("http://{addr}")]);
    server.kill().unwrap();
    let _ = server.wait();
    let summary = |s: &str| s.lines().next().unwrap().split(" (backend").next().unwrap().to_string();
    assert_eq!(summary(&local), summary(&remote));
    let read = |sub: &str| {
        std::fs::read_to_string(dir.path().join(sub).join("out/demo-mock.questions20.space-letter.examples.jsonl"))
            .unwrap()
    };
    assert_eq!(read("local"), read("remote"));
}
