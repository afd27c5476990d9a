use std::path::PathBuf;
use std::process::ExitCode;

use argmamba_cli::{
    cmd_ablate, cmd_bench_scan, cmd_eval, cmd_generate_data, cmd_gradcheck, cmd_train, parse_threads, CliError, CliResult,
    RunConfig, THREADS_VAR,
};
use argmamba::gradcheck::CheckReport;
use argmamba_cli::commands::{BENCH_FILE, GRADCHECK_FILE};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "argm", version, about = "Optical + elevation segmentation with selective-scan blocks")]
struct Args {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `data.root`.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Overrides the training and dataset seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to `data.root`.
    GenerateData {
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train and keep the best checkpoint.
    Train,
    /// Score a checkpoint.
    Eval {
        /// Defaults to `<output_dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Time MS-SSM and ARGFM forwards across token counts.
    BenchScan,
    /// Train and score the four MS-SSM / ARGFM combinations.
    Ablate,
}

fn run(args: Args) -> CliResult<()> {
    if let Some(n) = parse_threads(std::env::var(THREADS_VAR).ok().as_deref())? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.output_dir {
        cfg.output_dir = d;
    }
    if let Some(d) = args.data_root {
        cfg.data.root = d;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    match args.command {
        Command::GenerateData { force } => {
            let manifest = cmd_generate_data(&cfg, force)?;
            for (split, ids) in &manifest.splits {
                println!("{split}: {} samples", ids.len());
            }
            Ok(())
        }
        Command::Train => {
            let out = cmd_train(&cfg)?;
            println!(
                "best epoch {} (val mIoU {}), checkpoint {}",
                out.best_epoch,
                out.best_miou.map_or("n/a".into(), |m| format!("{m:.4}")),
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint } => {
            let report = cmd_eval(&cfg, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("metrics serialize"));
            Ok(())
        }
        Command::Gradcheck => {
            // print every report, including the failing ones
            let reports = match cmd_gradcheck(&cfg) {
                Ok(r) => r,
                Err(e @ CliError::Verification(_)) => {
                    print_reports(&cfg)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            reports.iter().for_each(print_report);
            Ok(())
        }
        Command::BenchScan => {
            let report = cmd_bench_scan(&cfg);
            if let Ok(csv) = std::fs::read_to_string(cfg.output_dir.join(BENCH_FILE)) {
                print!("{csv}");
            }
            report.map(drop)
        }
        Command::Ablate => {
            print!("{}", cmd_ablate(&cfg)?.to_markdown());
            Ok(())
        }
    }
}

fn print_report(r: &CheckReport) {
    println!(
        "{:<24} {:>5} coords  max rel {:.2e}  tol {:.0e}  {}",
        r.name,
        r.coordinates,
        r.max_rel_err,
        r.tolerance,
        if r.passed { "ok" } else { "FAILED" }
    );
}

fn print_reports(cfg: &RunConfig) -> CliResult<()> {
    let text = std::fs::read_to_string(cfg.output_dir.join(GRADCHECK_FILE)).map_err(argmamba::Error::from)?;
    let reports: Vec<CheckReport> = serde_json::from_str(&text).map_err(argmamba::Error::from)?;
    reports.iter().for_each(print_report);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
