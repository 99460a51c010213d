use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frontlab::config::Kind;

#[derive(Parser)]
#[command(
    name = "frontlab",
    version,
    about = "Front speeds in periodic flows at large amplitude"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimal speed at one amplitude.
    Speed(Args),
    /// Minimal speed over a list of amplitudes.
    Sweep(Args),
    /// Sweep plus an estimate of lim c*/M.
    Limit(Args),
    /// The variational limit of c*/M.
    Varlimit(Args),
    /// Transition energies of the two-ball problem.
    H1dim(Args),
    /// Property suite for the configured flow.
    Check(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads; 0 means one per core.
    #[arg(long, value_name = "K", env = "FRONTLAB_WORKERS")]
    workers: Option<usize>,
    /// Overrides the seed in the config.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Speed(a) => (Kind::Speed, a),
        Command::Sweep(a) => (Kind::Sweep, a),
        Command::Limit(a) => (Kind::Limit, a),
        Command::Varlimit(a) => (Kind::Varlimit, a),
        Command::H1dim(a) => (Kind::H1dim, a),
        Command::Check(a) => (Kind::Check, a),
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start workers: {e}");
            return ExitCode::from(frontlab::EXIT_FAILURE as u8);
        }
    };
    let code = pool.install(|| frontlab::execute(kind, &args.config, &args.out, args.seed));
    ExitCode::from(code as u8)
}
