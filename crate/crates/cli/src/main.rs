use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use labelspace::backend::{MockBackend, MockBackendSpec, ScoringBackend};
use labelspace::harness::leaderboard::load_leaderboard_csv;
use labelspace::harness::report::{write_comparison, write_leaderboard, write_permutation_suite, write_run};
use labelspace::harness::{
    compare_strategies, leaderboard, run_eval, run_permutation_suite, BackendKind, ComparisonReport,
    Evaluator, PermutationSpec, RunConfig,
};
use labelspace::prompt::{render_cot_prompt, render_prompt};
use labelspace::tokenizer::TokenizationStrategy;
use labelspace::{selfcheck, server};

#[derive(Parser)]
#[command(name = "labelspace", version, about = "Multiple-choice evaluation under both answer-label tokenizations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one strategy and write the run report.
    Run(RunArgs),
    /// Evaluate both strategies and write the paired comparison.
    Compare(RunArgs),
    /// Rank models under each strategy from a `model,letter,space_letter` CSV.
    Leaderboard {
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare strategies under seeded option shufflings.
    Permute {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write the exact prompt bytes for each question.
    Render(RunArgs),
    /// Run the built-in oracle checks.
    Selfcheck,
    /// Serve a mock score table over HTTP.
    ServeMock {
        spec: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Letter,
    SpaceLetter,
}

impl From<StrategyArg> for TokenizationStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Letter => TokenizationStrategy::LetterOnly,
            StrategyArg::SpaceLetter => TokenizationStrategy::SpaceLetter,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Endpoint,
    /// OpenAI-style `/v1/completions` server with `top_logprobs`.
    Completions,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed for exemplar selection, bootstrap and permutations.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    cot: bool,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Endpoint base URL (implies an endpoint backend unless --backend says otherwise).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    mock_spec: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.exemplar_seed = seed;
            cfg.bootstrap.seed = seed;
            if let Some(p) = &mut cfg.permutations {
                p.seed = seed;
            }
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s.into();
        }
        if let Some(n) = self.shots {
            cfg.shots = n;
        }
        if self.cot {
            cfg.cot = true;
        }
        if let Some(url) = &self.endpoint {
            cfg.backend.endpoint = Some(url.clone());
            if self.backend.is_none() {
                cfg.backend.kind = BackendKind::Endpoint;
            }
        }
        if let Some(p) = &self.mock_spec {
            cfg.backend.mock_spec = Some(p.clone());
        }
        match self.backend {
            Some(BackendArg::Mock) => cfg.backend.kind = BackendKind::Mock,
            Some(BackendArg::Endpoint) => cfg.backend.kind = BackendKind::Endpoint,
            Some(BackendArg::Completions) => cfg.backend.kind = BackendKind::Completions,
            None => {}
        }
        if let Some(n) = self.iterations {
            cfg.bootstrap.iterations = n;
        }
        if let Some(n) = self.parallelism {
            cfg.parallelism = n;
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let backend = cfg.build_backend()?;
    let out = run_eval(&cfg, backend.as_ref())?;
    let r = &out.result;
    println!(
        "{} {} {}: n={} accuracy={:.2} ECE={:.2} (backend calls {}, cache hits {})",
        r.model_id,
        r.dataset_id,
        r.strategy,
        r.n,
        r.accuracy * 100.0,
        r.ece * 100.0,
        out.backend_calls,
        out.cache_hits
    );
    print_written(&write_run(&args.out, &cfg, &out)?);
    Ok(())
}

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let backend = cfg.build_backend()?;
    let out = compare_strategies(&cfg, backend.as_ref())?;
    print!("{}", ComparisonReport::new(vec![out.row.clone()]).render_table());
    print_written(&write_comparison(&args.out, &cfg, &out)?);
    Ok(())
}

fn cmd_permute(args: &RunArgs, count: Option<usize>) -> Result<()> {
    let cfg = args.config()?;
    let spec = match (count, cfg.permutations) {
        (Some(count), Some(p)) => PermutationSpec { count, ..p },
        (Some(count), None) => PermutationSpec {
            count,
            seed: cfg.bootstrap.seed,
        },
        (None, Some(p)) => p,
        (None, None) => bail!("set --count or a [permutations] section in the config"),
    };
    let backend = cfg.build_backend()?;
    let suite = run_permutation_suite(&cfg, backend.as_ref(), spec.count, spec.seed)?;
    print!("{}", suite.render_table());
    print_written(&write_permutation_suite(&args.out, &cfg, &suite)?);
    Ok(())
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn cmd_render(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    // Rendering never contacts the backend.
    let backend = MockBackend::new(MockBackendSpec::default());
    let eval = Evaluator::new(&cfg, &backend)?;
    let strategies: Vec<TokenizationStrategy> = match args.strategy {
        Some(s) => vec![s.into()],
        None => TokenizationStrategy::BOTH.to_vec(),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut written = Vec::new();
    for q in eval.questions() {
        let exemplars = eval.exemplars_for(q)?;
        for &s in &strategies {
            let prompt = if cfg.cot {
                render_cot_prompt(q, eval.template(), s, &exemplars)?
            } else {
                render_prompt(q, eval.template(), s, &exemplars)?
            };
            let path = args.out.join(format!("{}.{}.txt", safe_name(&q.id), s.as_str()));
            fs::write(&path, &prompt.text).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
    }
    print_written(&written);
    Ok(())
}

fn cmd_leaderboard(input: &Path, out: &Path) -> Result<()> {
    let entries = load_leaderboard_csv(input)?;
    let report = leaderboard(&entries)?;
    print!("{}", report.render_table());
    print_written(&write_leaderboard(out, &report)?);
    Ok(())
}

fn cmd_selfcheck() -> Result<()> {
    let outcomes = selfcheck::run_all();
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} check(s) failed");
    }
    Ok(())
}

fn cmd_serve_mock(spec: &Path, addr: SocketAddr) -> Result<()> {
    let spec = MockBackendSpec::load(spec)?;
    let backend: Arc<dyn ScoringBackend> = Arc::new(MockBackend::new(spec));
    let handle = server::spawn(backend, addr).with_context(|| format!("binding {addr}"))?;
    println!("serving mock backend at {}", handle.base_url());
    handle.wait();
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Leaderboard { input, out } => cmd_leaderboard(input, out),
        Command::Permute { run, count } => cmd_permute(run, *count),
        Command::Render(args) => cmd_render(args),
        Command::Selfcheck => cmd_selfcheck(),
        Command::ServeMock { spec, addr } => cmd_serve_mock(spec, *addr),
    }
}
