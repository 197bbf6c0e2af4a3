use std::io::IsTerminal;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dsbad::fixtures::{write_fixtures, FixtureSpec};
use dsbad::pipeline::{oracle_path_for, run_sweep_files, CellStatus, Pipeline, RewarmPolicy};
use dsbad::protocol::{serve, Client, Loopback, TcpTransport, Transport};
use dsbad::{read_oracle, read_stream, DensityMetric, OracleLabels, Strategy};
use tracing::info;
use tracing_subscriber::EnvFilter;

mod config;

use config::{Overlay, Settings};

const PARTIAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "dsbad",
    version,
    about = "Confidence-gated, budgeted frame selection for edge annotation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run annotation rounds over one stream file.
    Run(RunArgs),
    /// Run the gamma x budget x strategy grid over many streams.
    Sweep(SweepArgs),
    /// Serve teacher labels from an oracle file over TCP.
    Serve(ServeArgs),
    /// Write seeded synthetic streams and matching oracle files.
    GenFixtures(GenArgs),
    /// Check a stream file and report the first violation.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gate quantile level alpha, in (0, 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Warm-up length w in frames.
    #[arg(long)]
    warmup: Option<usize>,
    /// Seed for every random choice in the invocation.
    #[arg(long)]
    seed: Option<u64>,
    /// Density similarity for farthest-first: inner or cosine.
    #[arg(long)]
    density_metric: Option<DensityMetric>,
    /// Print the merged configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

impl Common {
    fn overlay(&self) -> Overlay {
        let mut o = Overlay::default();
        o.gate.alpha = self.alpha;
        o.gate.warmup = self.warmup;
        o.round.seed = self.seed;
        o.filter.density_metric = self.density_metric;
        o
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Frame-record stream (NDJSON).
    stream: PathBuf,
    /// Teacher labels; defaults to the oracle_* file next to a stream_* file.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Buffer factor gamma; the candidate set holds gamma * budget frames.
    #[arg(long)]
    gamma: Option<usize>,
    /// Frames sent per round.
    #[arg(long)]
    budget: Option<usize>,
    /// ff, tfdp, moderate, least-confidence or random.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Number of rounds to run.
    #[arg(long)]
    rounds: Option<usize>,
    /// Gate re-estimation: per-round or once.
    #[arg(long)]
    rewarm: Option<RewarmPolicy>,
    /// Annotation server address; an in-process server is used otherwise.
    #[arg(long)]
    connect: Option<String>,
    /// Directory for round reports and labeled sets.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Stream files, or directories holding stream_*.ndjson files.
    #[arg(required = true)]
    streams: Vec<PathBuf>,
    /// Buffer factors, comma separated.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<usize>>,
    /// Budgets, comma separated.
    #[arg(long, value_delimiter = ',')]
    budget: Option<Vec<usize>>,
    /// Strategies, comma separated.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<Strategy>>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for sweep.csv and sweep_summary.json.
    #[arg(long, default_value = "sweep_out")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Teacher label file.
    #[arg(long)]
    oracle: PathBuf,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    streams: usize,
    /// Frames per stream.
    #[arg(long, default_value_t = 2000)]
    frames: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Scene clusters per stream.
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Frame-record stream (NDJSON).
    stream: PathBuf,
    /// Also check a teacher label file against the stream.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

fn load_oracle(explicit: Option<&Path>, stream: &Path) -> Result<OracleLabels> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match oracle_path_for(stream) {
            Some(p) if p.exists() => p,
            _ => {
                info!("no oracle file; frames will come back unlabeled");
                return Ok(OracleLabels::new());
            }
        },
    };
    read_oracle(&path).with_context(|| format!("reading oracle {}", path.display()))
}

fn cmd_run(args: RunArgs) -> Result<u8> {
    let mut flags = args.common.overlay();
    flags.round.gamma = args.gamma;
    flags.round.budget = args.budget;
    flags.round.rounds = args.rounds;
    flags.filter.strategy = args.strategy;
    flags.gate.rewarm = args.rewarm;
    let settings = Settings::resolve(args.common.config.as_deref(), flags)?;
    if args.common.print_config {
        print!("{}", settings.to_toml()?);
        return Ok(0);
    }
    let cfg = settings.round_config()?;
    let frames =
        read_stream(&args.stream).with_context(|| format!("reading {}", args.stream.display()))?;

    let transport: Box<dyn Transport> = match &args.connect {
        Some(addr) => Box::new(
            TcpTransport::connect(addr.as_str())
                .with_context(|| format!("connecting to {addr}"))?,
        ),
        None => Box::new(Loopback::new(Arc::new(load_oracle(
            args.oracle.as_deref(),
            &args.stream,
        )?))),
    };
    let client = Client::connect(transport, "dsbad")?;
    let mut pipeline = Pipeline::new(&frames, cfg, client)?;
    let reports = pipeline.run(args.out.as_deref())?;
    for r in &reports {
        println!(
            "round {}: {} of {} candidates sent ({} bytes), threshold {:.6}{}",
            r.round_id,
            r.selected_count,
            r.candidate_count,
            r.bytes_sent,
            r.gate_threshold,
            if r.partial { ", partial" } else { "" }
        );
    }
    let short = reports.len() < cfg.rounds || reports.iter().any(|r| r.partial);
    if reports.len() < cfg.rounds {
        eprintln!(
            "stream supported {} of {} rounds",
            reports.len(),
            cfg.rounds
        );
    }
    Ok(if short { PARTIAL } else { 0 })
}

fn stream_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| {
                f.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("stream") && n.ends_with(".ndjson"))
            });
            found.sort();
            if found.is_empty() {
                bail!("no stream_*.ndjson files in {}", p.display());
            }
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_sweep(args: SweepArgs) -> Result<u8> {
    let mut flags = args.common.overlay();
    flags.sweep.gammas = args.gamma;
    flags.sweep.budgets = args.budget;
    flags.sweep.strategies = args.strategy;
    flags.sweep.jobs = args.jobs;
    let settings = Settings::resolve(args.common.config.as_deref(), flags)?;
    if args.common.print_config {
        print!("{}", settings.to_toml()?);
        return Ok(0);
    }
    let cfg = settings.sweep_config()?;
    let paths = stream_files(&args.streams)?;
    let rows = run_sweep_files(&paths, &cfg, &args.out)?;
    let count = |s: CellStatus| rows.iter().filter(|r| r.status == s).count();
    println!(
        "{} cells over {} streams: {} ok, {} partial, {} infeasible; results in {}",
        rows.len(),
        paths.len(),
        count(CellStatus::Ok),
        count(CellStatus::Partial),
        count(CellStatus::Infeasible),
        args.out.display()
    );
    Ok(0)
}

fn cmd_serve(args: ServeArgs) -> Result<u8> {
    let oracle = read_oracle(&args.oracle)
        .with_context(|| format!("reading oracle {}", args.oracle.display()))?;
    let listener =
        TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    eprintln!("listening on {}", listener.local_addr()?);
    serve(listener, Arc::new(oracle))?;
    Ok(0)
}

fn cmd_gen(args: GenArgs) -> Result<u8> {
    let spec = FixtureSpec {
        streams: args.streams,
        frames: args.frames,
        dim: args.dim,
        clusters: args.clusters,
        seed: args.seed,
        ..FixtureSpec::default()
    };
    let paths = write_fixtures(&spec, &args.out)?;
    println!("wrote {} streams to {}", paths.len(), args.out.display());
    Ok(0)
}

fn cmd_validate(args: ValidateArgs) -> Result<u8> {
    let frames = match read_stream(&args.stream) {
        Ok(f) => f,
        Err(e) => {
            println!("{}: {e}", args.stream.display());
            return Ok(1);
        }
    };
    if let Some(path) = &args.oracle {
        let checked = read_oracle(path).and_then(|o| o.check_against(&frames));
        if let Err(e) = checked {
            println!("{}: {e}", path.display());
            return Ok(1);
        }
    }
    let dim = frames.first().map_or(0, |f| f.embedding.dim());
    println!(
        "{}: ok, {} frames, dimension {dim}",
        args.stream.display(),
        frames.len()
    );
    Ok(0)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Serve(a) => cmd_serve(a),
        Command::GenFixtures(a) => cmd_gen(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
