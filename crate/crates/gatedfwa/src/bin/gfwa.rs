//! Benchmark and verification CLI.
//!
//! Exit codes: 0 all checks pass / command succeeded, 1 check failure,
//! 2 usage error (bad flags, unknown suite, unreadable fixture or config).

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gatedfwa::cli::{
    self, run_bench, run_check, write_bench_csv, write_check_csv, BenchOptions, Kernel, Suite,
};

#[derive(Parser)]
#[command(name = "gfwa", about = "Gated windowed attention: checks, benchmarks, dumps")]
struct Cli {
    /// Seed for every randomized trial.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output CSV path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config file; flags take precedence over its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. Benchmarks pin to one thread unless given.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an invariant suite and emit one CSV row per check.
    Check {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// Time kernels across sequence lengths and emit count/time rows.
    Bench {
        /// Kernels to run.
        #[arg(long, value_delimiter = ',')]
        kernels: Option<Vec<Kernel>>,
        /// Ascending sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        dhead: Option<usize>,
        #[arg(long)]
        br: Option<usize>,
        #[arg(long)]
        bc: Option<usize>,
        /// Repetitions per measurement; the median is reported.
        #[arg(long)]
        reps: Option<usize>,
        /// Run `check all` first and refuse to benchmark on any failure.
        #[arg(long)]
        require_checks: bool,
    },
    /// Export gate histograms or attention heatmaps from fixtures.
    Dump {
        #[arg(value_enum)]
        what: DumpKind,
        /// Fixture directory (see README for the expected tensor files).
        #[arg(long)]
        fixture: PathBuf,
        /// Window for the heatmap mask.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Train the toy recall task and emit the loss curve.
    Demo {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DumpKind {
    #[value(name = "gate-hist")]
    GateHist,
    #[value(name = "attn-heatmap")]
    AttnHeatmap,
}

/// Optional config-file fields; flags override, defaults fill the rest.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    kernels: Option<Vec<String>>,
    n: Option<Vec<usize>>,
    window: Option<usize>,
    heads: Option<usize>,
    dhead: Option<usize>,
    br: Option<usize>,
    bc: Option<usize>,
    reps: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, String> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("config {p:?}: {e}"))?;
            serde_json::from_str(&text).map_err(|e| format!("config {p:?}: {e}"))
        }
    }
}

fn parse_kernels(names: &[String]) -> Result<Vec<Kernel>, String> {
    names
        .iter()
        .map(|n| Kernel::from_str(n, true).map_err(|e| format!("kernel {n:?}: {e}")))
        .collect()
}

fn open_out(out: &Option<PathBuf>) -> Result<Box<dyn Write>, String> {
    match out {
        None => Ok(Box::new(std::io::stdout().lock())),
        Some(p) => File::create(p)
            .map(|f| Box::new(f) as Box<dyn Write>)
            .map_err(|e| format!("out {p:?}: {e}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let file = load_config(&cli.config)?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);

    // Benchmarks pin to a single thread for stable medians unless --threads
    // or the config asks otherwise; other commands use the default pool.
    let threads = cli.threads.or(file.threads);
    let pinned = match (&cli.cmd, threads) {
        (_, Some(t)) => Some(t.max(1)),
        (Cmd::Bench { .. }, None) => Some(1),
        _ => None,
    };
    if let Some(t) = pinned {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| format!("thread pool: {e}"))?;
    }

    match cli.cmd {
        Cmd::Check { suite } => {
            let rows = run_check(suite, seed);
            let mut out = open_out(&cli.out)?;
            write_check_csv(&mut out, &rows).map_err(|e| e.to_string())?;
            let failed = rows.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", rows.len());
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Cmd::Bench {
            kernels,
            n,
            window,
            heads,
            dhead,
            br,
            bc,
            reps,
            require_checks,
        } => {
            if require_checks {
                let rows = run_check(Suite::All, seed);
                let failed = rows.iter().filter(|r| !r.pass).count();
                if failed > 0 {
                    eprintln!("--require-checks: {failed} checks failed; not benchmarking");
                    return Ok(ExitCode::from(1));
                }
            }
            let defaults = BenchOptions::default();
            let file_kernels = match &file.kernels {
                Some(names) => Some(parse_kernels(names)?),
                None => None,
            };
            let opts = BenchOptions {
                kernels: kernels.or(file_kernels).unwrap_or(defaults.kernels),
                n_list: n.or(file.n).unwrap_or(defaults.n_list),
                window: window.or(file.window).unwrap_or(defaults.window),
                heads: heads.or(file.heads).unwrap_or(defaults.heads),
                head_dim: dhead.or(file.dhead).unwrap_or(defaults.head_dim),
                block_rows: br.or(file.br).unwrap_or(defaults.block_rows),
                block_cols: bc.or(file.bc).unwrap_or(defaults.block_cols),
                reps: reps.or(file.reps).unwrap_or(defaults.reps),
                seed,
            };
            let records = run_bench(&opts).map_err(|e| e.to_string())?;
            let mut out = open_out(&cli.out)?;
            write_bench_csv(&mut out, &records).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Dump {
            what,
            fixture,
            window,
        } => {
            let mut out = open_out(&cli.out)?;
            let result = match what {
                DumpKind::GateHist => cli::dump_gate_hist(&fixture, &mut out),
                DumpKind::AttnHeatmap => {
                    let w = window.or(file.window).unwrap_or(4);
                    cli::dump_attn_heatmap(&fixture, w, &mut out)
                }
            };
            result.map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Demo { steps, lr } => {
            let steps = steps.or(file.steps).unwrap_or(500);
            let lr = lr.or(file.lr).unwrap_or(0.5);
            let mut out = open_out(&cli.out)?;
            cli::dump_demo_csv(steps, lr, seed, &mut out).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
