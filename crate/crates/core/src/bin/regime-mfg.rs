use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use regime_mfg::cli_io::{
    cmd_export, cmd_solve, cmd_validate, Artifact, CliError, ExitStatus, ExportFormat, SolveFlags, ValidateFlags,
};

#[derive(Parser)]
#[command(name = "regime-mfg", version, about = "Closed-loop mean-field equilibria under regime switching")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MFG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario and write a run directory.
    Solve {
        scenario: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        damping: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a solved run: local optimality and, optionally, a finite population.
    Validate {
        run: PathBuf,
        /// Agents per simulated chain path.
        #[arg(long)]
        nplayer: Option<usize>,
        /// Chain paths to simulate.
        #[arg(long, default_value_t = 20)]
        chains: usize,
        /// Random local-optimality probes.
        #[arg(long, default_value_t = 5)]
        local_opt: usize,
        /// Test this strategy dump instead of the run's own.
        #[arg(long)]
        strategy_override: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print an artifact of a run to stdout or a file.
    Export {
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Theta,
    Strategy,
    Zeta,
    Convergence,
}

fn run(cli: Cli, argv: Vec<String>) -> Result<ExitStatus, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Solve { scenario, out, tol, max_iter, damping, seed } => {
            let flags = SolveFlags { tol, max_iter, damping, seed };
            let r = cmd_solve(&scenario, &out, &flags, &argv)?;
            eprintln!(
                "{:?} after {} iterations, last step {:.3e}, contraction {:.3}",
                r.result.outcome,
                r.result.iterations,
                r.result.distance_history.last().copied().unwrap_or(f64::NAN),
                r.result.empirical_contraction
            );
            Ok(r.status)
        }
        Command::Validate { run, nplayer, chains, local_opt, strategy_override, seed } => {
            let flags = ValidateFlags { nplayer, chains, local_opt, strategy_override, seed };
            let (status, report) = cmd_validate(&run, &flags)?;
            let failed = report.local_optimality.iter().filter(|r| !r.pass).count();
            eprintln!("local optimality: {}/{} deviation tests pass", report.local_optimality.len() - failed, report.local_optimality.len());
            if let Some(sim) = &report.nplayer {
                eprintln!("n-player: median terminal W2 {:.4e} over {} paths", sim.median_terminal_w2, sim.records.len());
            }
            Ok(status)
        }
        Command::Export { run, format, what, out } => {
            let format = match format {
                Format::Csv => ExportFormat::Csv,
                Format::Binary => ExportFormat::Binary,
            };
            let what = match what {
                What::Theta => Artifact::Theta,
                What::Strategy => Artifact::Strategy,
                What::Zeta => Artifact::Zeta,
                What::Convergence => Artifact::Convergence,
            };
            match out {
                Some(p) => {
                    let mut f = std::fs::File::create(&p).map_err(|source| CliError::Io { path: p.clone(), source })?;
                    cmd_export(&run, format, what, &mut f)?;
                }
                None => {
                    let stdout = io::stdout();
                    let mut lock = stdout.lock();
                    cmd_export(&run, format, what, &mut lock)?;
                    let _ = lock.flush();
                }
            }
            Ok(ExitStatus::Ok)
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli, argv) {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(CliError::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_status().code() as u8)
        }
    }
}
