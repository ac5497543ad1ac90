use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gstuda::config::ExperimentConfig;
use gstuda::{experiment, plot, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "gstuda", version, about = "Uncertainty-aware self-training for domain-adaptive image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target datasets.
    Gen(Common),
    /// Run the method x seed grid and write the reports.
    Run(Common),
    /// Render figures from a run directory.
    Plot(Common),
    /// Re-evaluate the checkpoints of a run directory.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output (or run) directory, overriding the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory written by a previous run.
    #[arg(long)]
    force: bool,
    /// Comma-separated seeds, overriding the config.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated methods, overriding the config.
    #[arg(long)]
    methods: Option<String>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::OutputExists(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn resolve(args: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        None => ExperimentConfig::default(),
    };
    for (key, value) in [("seeds", &args.seeds), ("methods", &args.methods)] {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|m| Failure::Config(format!("--{key}: {m}")))?;
        }
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("GSTUDA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("GSTUDA_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("cannot size the worker pool: {e}")))
}

fn report_run(summary: &experiment::RunSummary) -> Result<(), Failure> {
    println!("{}", summary.report.to_markdown());
    println!("artifacts in {}", summary.out.display());
    if summary.failures.is_empty() {
        return Ok(());
    }
    for f in &summary.failures {
        eprintln!("cell {} seed {} failed: {}", f.label, f.seed, f.message);
    }
    Err(Failure::Runtime(format!("{} cell(s) failed", summary.failures.len())))
}

fn run_dir(args: &Common) -> Result<PathBuf, Failure> {
    match (&args.out, &args.config) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(_)) => Ok(resolve(args)?.output_dir),
        (None, None) => Err(Failure::Config("give the run directory with --out or --config".into())),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Gen(args) => {
            let cfg = resolve(&args)?;
            let manifest = experiment::cmd_gen(&cfg, &cfg.output_dir, args.force)?;
            println!("{manifest}");
            println!("datasets written to {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Run(args) => {
            let cfg = resolve(&args)?;
            report_run(&experiment::cmd_run(&cfg, args.force)?)
        }
        Command::Eval(args) => report_run(&experiment::cmd_eval(&run_dir(&args)?)?),
        Command::Plot(args) => {
            let dir = run_dir(&args)?;
            let summary = plot::cmd_plot(Path::new(&dir))?;
            for p in &summary.written {
                println!("wrote {}", p.display());
            }
            for t in &summary.trends {
                println!("{t}");
            }
            for m in &summary.missing {
                eprintln!("missing: {m}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
