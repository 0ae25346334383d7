use std::process::ExitCode;

use brau_cli::attention::{dump, DumpArgs};
use brau_cli::gradcheck::{gradcheck, GradCheckArgs};
use brau_cli::report::{report, ReportArgs};
use brau_cli::run::{eval, infer, train, EvalArgs, InferArgs, TrainArgs};
use brau_cli::scaling::{scaling, ScalingArgs};
use brau_cli::{set_threads, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "braunet",
    version,
    about = "Train, evaluate and inspect a routing-attention U-Net"
)]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config, writing logs and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predicted masks.
    Eval(EvalArgs),
    /// Predict a mask for one image.
    Infer(InferArgs),
    /// Per-module parameters and MACs against the published sizes.
    Report(ReportArgs),
    /// Attention cost against resolution, with fitted exponents.
    BenchScaling(ScalingArgs),
    /// Routed regions and attention weights for one query pixel.
    DumpAttention(DumpArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradCheckArgs),
}

fn run(cli: Cli) -> Result<()> {
    set_threads(cli.threads)?;
    match cli.cmd {
        Cmd::Train(a) => println!("{}", train(&a)?),
        Cmd::Eval(a) => println!("{}", eval(&a)?),
        Cmd::Infer(a) => infer(&a)?,
        Cmd::Report(a) => print!("{}", report(&a)?),
        Cmd::BenchScaling(a) => print!("{}", scaling(&a)?),
        Cmd::DumpAttention(a) => {
            let d = dump(&a)?;
            println!(
                "routed regions {:?} around query region {}",
                d.routed, d.query_region
            );
        }
        Cmd::Gradcheck(a) => gradcheck(&a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
