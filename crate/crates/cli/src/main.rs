use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maect_cli::{run, Command, RunArgs};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// MAE pre-training, NNCLR head initialisation, contrastive tuning and
/// frozen-embedding evaluation, one stage per invocation.
#[derive(Parser)]
#[command(name = "maect", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured dataset as containers under <out>/data.
    GenData(Common),
    /// Masked-autoencoder pre-training (optionally combined with NNCLR).
    Pretrain(Common),
    /// Train the NNCLR head on the frozen pre-trained encoder.
    HeadInit(Common),
    /// Contrastive tuning of the upper encoder blocks.
    Ct(Common),
    /// Full measurement battery and report.
    Eval(Common),
    /// Colour-histogram shortcut probe.
    ProbeHist(Common),
    /// k-means clustering metrics and silhouette.
    Cluster(Common),
    /// Effective invariance of a linear probe.
    Ei(Common),
    /// Rebuild report.json and curves.csv from an evaluated run.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Contrastive tuning with a randomly initialised head.
    #[arg(long)]
    skip_init: bool,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Joint MAE + lambda * NNCLR objective.
    #[arg(long)]
    combined: bool,
    #[arg(long, requires = "combined")]
    lambda: Option<f64>,
    /// Stop the NNCLR gradient at the encoder.
    #[arg(long, requires = "combined")]
    detached: bool,
    /// Checkpoint stage to evaluate: pretrain, ct or ct-skip-init.
    #[arg(long)]
    from: Option<String>,
    /// No per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, c) = match cli.cmd {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::HeadInit(c) => (Command::HeadInit, c),
        Cmd::Ct(c) => (Command::Ct, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::ProbeHist(c) => (Command::ProbeHist, c),
        Cmd::Cluster(c) => (Command::Cluster, c),
        Cmd::Ei(c) => (Command::Ei, c),
        Cmd::Report(c) => (Command::Report, c),
    };
    let args = RunArgs {
        config: c.config,
        out: c.out,
        seed: c.seed,
        skip_init: c.skip_init,
        mask_ratio: c.mask_ratio,
        combined: c.combined,
        lambda: c.lambda,
        detached: c.detached,
        from: c.from,
        quiet: c.quiet,
    };
    match run(cmd, &args) {
        Ok(o) => {
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} (run {})", o.dir.display(), o.run_id);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
