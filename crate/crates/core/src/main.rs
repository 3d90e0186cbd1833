use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use neufrac::run::{execute, Mode, Overrides, RunConfig};
use neufrac::Error;

#[derive(Parser)]
#[command(name = "neufrac", version, about = "Nonlocal Neumann laboratory runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One critical-point solve from a config file.
    Solve(Common),
    /// Level sweep over the config's eps_list.
    Sweep(Common),
    /// Estimate audits over the configured domain.
    Audit {
        #[arg(long, value_enum)]
        which: AuditKind,
        #[command(flatten)]
        common: Common,
    },
    /// Configuration diagnostics; failures are listed, not thrown.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key-value JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides NEUFRAC_OUT and the config key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed; overrides the config key.
    #[arg(long)]
    seed: Option<u64>,
    /// Length scale; overrides the config key.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Interior mesh pitch; overrides the config key.
    #[arg(long)]
    h: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy)]
enum AuditKind {
    Phi,
    Green,
    Integrability,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, common) = match cli.cmd {
        Cmd::Solve(c) => (Mode::Solve, c),
        Cmd::Sweep(c) => (Mode::Sweep, c),
        Cmd::Audit { which, common } => (
            match which {
                AuditKind::Phi => Mode::AuditPhi,
                AuditKind::Green => Mode::AuditGreen,
                AuditKind::Integrability => Mode::AuditIntegrability,
            },
            common,
        ),
        Cmd::Validate(c) => (Mode::Validate, c),
    };
    let ov = Overrides {
        mode: Some(mode),
        out: common.out,
        seed: common.seed,
        epsilon: common.epsilon,
        h: common.h,
    };
    let raw = match RunConfig::from_path(&common.config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&raw, &ov) {
        Ok(rep) => {
            for c in &rep.checks {
                println!("[{}] {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            println!("results in {}", rep.out.display());
            if rep.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Error::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
