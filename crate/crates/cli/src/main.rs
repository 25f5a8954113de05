//! Metal-conscious projection inpainting, end to end: simulate CBCT scans
//! of implant phantoms, train inpainting variants, apply checkpoints, and
//! score them in the projection and reconstruction domains.
//!
//! Exit codes: 0 ok, 1 usage, 2 data or configuration error, 3 numeric
//! failure (non-finite values).

mod config;
mod data;
mod evalcmd;
mod infer;
mod simulate;
mod sweep;
mod traincmd;

use clap::Parser;
use mcfill_core::Error;

#[derive(Parser)]
#[command(name = "mcfill", version, about = "CBCT metal-shadow inpainting pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Subcommand)]
enum Cmd {
    /// Simulate phantom scans into a dataset directory.
    Simulate(simulate::Args),
    /// Train one inpainting variant on a dataset.
    Train(traincmd::Args),
    /// Apply a checkpoint to a dataset, writing inpainted scans.
    Infer(infer::Args),
    /// Score variants against ground truth, writing report.csv.
    Eval(evalcmd::Args),
    /// Train and score every variant under one seed.
    Sweep(sweep::Args),
}

/// MCFILL_THREADS caps the rayon pool; unset or invalid keeps the default.
fn init_threads() {
    if let Some(n) = std::env::var("MCFILL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; only real usage errors are
            // failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_threads();
    let result = match cli.cmd {
        Cmd::Simulate(a) => simulate::run(&a),
        Cmd::Train(a) => traincmd::run(&a),
        Cmd::Infer(a) => infer::run(&a),
        Cmd::Eval(a) => evalcmd::run(&a),
        Cmd::Sweep(a) => sweep::run(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = if matches!(e, Error::NonFinite(_)) { 3 } else { 2 };
        std::process::exit(code);
    }
}
