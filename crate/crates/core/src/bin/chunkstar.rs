use std::fmt::Write as _;
use std::io::{ErrorKind, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chunkstar::config::ScenarioConfig;
use chunkstar::memory::oracle::{exhaustive_check, oracle_min_transfers, simulate_policy_fetches};
use chunkstar::memory::PolicyRegistry;
use chunkstar::report;
use chunkstar::scenario::{explain_plan, run_scenario, sweep_max_scale, write_bundle, Overrides};
use chunkstar::Result;

/// Simulates chunk-based CPU/GPU memory management for transformer training.
#[derive(Debug, Parser)]
#[command(name = "chunkstar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every selected strategy and write the report bundle.
    Run(ScenarioArgs),
    /// Find the largest feasible model and batch per strategy and GPU count.
    Sweep(ScenarioArgs),
    /// Print the chunk layout and placement plan without simulating.
    ExplainPlan(ScenarioArgs),
    /// Compare an eviction policy with the optimal schedule on small instances.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; CHUNKSTAR_OUT takes precedence.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations including warm-up.
    #[arg(long)]
    iterations: Option<u32>,
    /// Write a JSON-lines moment trace per strategy.
    #[arg(long)]
    trace: bool,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value = "latest-next-use")]
    policy: String,
    /// One access sequence, e.g. `0,1,2,0,1`. Without it every instance up
    /// to the size limits is checked.
    #[arg(long, value_delimiter = ',')]
    sequence: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    capacity: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    max_chunks: u32,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::load(&self.config)?;
        Overrides {
            strategies: self.strategy.clone(),
            seed: self.seed,
            iterations: self.iterations,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        match std::env::var_os("CHUNKSTAR_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match dispatch(cli.command) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        _ => ExitCode::SUCCESS,
    }
}

/// Runs one verb and returns what it prints.
fn dispatch(command: Command) -> Result<String> {
    let mut text = String::new();
    match command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let out = run_scenario(&cfg, args.trace)?;
            let dir = args.out_dir();
            write_bundle(&out, &dir)?;
            for s in &out.summary.strategies {
                let v = &s.verdict;
                writeln!(
                    text,
                    "{:<8} feasible={:<5} reason={:?} cpu_gpu_bytes={} peak_gpu={} peak_cpu={}",
                    s.name,
                    v.feasible,
                    v.failure_reason,
                    v.per_iteration_cpu_gpu_bytes,
                    v.peak_gpu_bytes,
                    v.peak_cpu_bytes
                )
                .ok();
            }
            writeln!(text, "wrote {}", dir.display()).ok();
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            let rows = sweep_max_scale(&cfg)?;
            let dir = args.out_dir();
            std::fs::create_dir_all(&dir)?;
            report::write_sweep(&dir.join("sweep.csv"), &rows)?;
            for r in &rows {
                writeln!(
                    text,
                    "{:<8} gpus={} max_scale={} max_batch={}",
                    r.strategy,
                    r.gpu_count,
                    r.max_scale.as_deref().unwrap_or("-"),
                    r.max_batch.map_or("-".to_string(), |b| b.to_string())
                )
                .ok();
            }
            writeln!(text, "wrote {}", dir.join("sweep.csv").display()).ok();
        }
        Command::ExplainPlan(args) => {
            let cfg = args.load()?;
            let (explanation, layout) = explain_plan(&cfg)?;
            let dir = args.out_dir();
            std::fs::create_dir_all(&dir)?;
            report::write_layout(&dir.join("layout.csv"), &layout)?;
            writeln!(text, "{}", serde_json::to_string_pretty(&explanation)?).ok();
        }
        Command::Oracle(args) => {
            let policy = PolicyRegistry::with_builtins().get(&args.policy)?;
            match &args.sequence {
                Some(seq) => {
                    for &cap in &args.capacity {
                        let best = oracle_min_transfers(seq, cap)?;
                        let got = simulate_policy_fetches(seq, cap, policy.as_ref());
                        writeln!(
                            text,
                            "capacity={cap} oracle={best} {}={got} optimal={}",
                            policy.name(),
                            got == best
                        )
                        .ok();
                    }
                }
                None => {
                    let check = exhaustive_check(
                        policy.as_ref(),
                        args.max_chunks,
                        args.max_len,
                        &args.capacity,
                    )?;
                    writeln!(text, "{}", serde_json::to_string_pretty(&check)?).ok();
                }
            }
        }
    }
    Ok(text)
}
