mod commands;
mod reproduce;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crsim_core::propagate::{Frame, Method};
use crsim_core::pulse::CrLayout;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "crsim", version, about = "Pulse-level simulation and CNOT calibration for resonator-coupled transmons")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = run::OUT_ENV, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimArgs {
    #[arg(long)]
    pub device: PathBuf,
    #[arg(long)]
    pub pulse: PathBuf,
    /// Record to use when the pulse file holds several.
    #[arg(long)]
    pub gate: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub tau_ps: f64,
    #[arg(long, default_value = "trotter2")]
    pub method: Method,
    #[arg(long, default_value = "eigen")]
    pub frame: Frame,
    /// Overrides the record's flat-top layout.
    #[arg(long)]
    pub layout: Option<CrLayout>,
}

#[derive(Args, Debug, Clone, Copy, Serialize)]
pub struct MetricArgs {
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Haar-random samples for the average fidelity.
    #[arg(long = "M", default_value_t = 10_000)]
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum IdealKind {
    Cnot,
    Identity,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transmon frequencies, anharmonicities and detunings of a device.
    Spectrum {
        #[arg(long)]
        device: PathBuf,
    },
    /// Average fidelity of a pulse record.
    Fidelity {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        metric: MetricArgs,
        /// Exit with status 1 when F falls below this value.
        #[arg(long)]
        min_f: Option<f64>,
        #[arg(long, value_enum, default_value = "cnot")]
        ideal: IdealKind,
    },
    /// Basis-state success probabilities and the transition grid.
    Success {
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Bloch-vector trajectories from one basis state.
    Bloch {
        #[command(flatten)]
        sim: SimArgs,
        /// Initial label `k,m0m1..`, resonator level first.
        #[arg(long)]
        initial: String,
        /// Record every this many steps.
        #[arg(long, default_value_t = 100)]
        stride: usize,
    },
    /// Propagator dump.
    Evolve {
        #[command(flatten)]
        sim: SimArgs,
        /// Propagate every basis column instead of the computational subspace.
        #[arg(long)]
        full: bool,
    },
    /// Nelder-Mead calibration of an asymmetric CNOT record.
    Optimize {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        metric: MetricArgs,
        /// Comma-separated parameters to free (f1,f2,TX,TS,OmegaX,OmegaS,rho,gamma1,gamma2,theta0..2).
        #[arg(long, value_delimiter = ',')]
        free: Vec<String>,
        #[arg(long, default_value_t = 2000)]
        max_evals: usize,
        /// Samples per inner-loop fidelity estimate.
        #[arg(long, default_value_t = 512)]
        inner_m: usize,
        /// Step used inside the optimizer; defaults to --tau-ps.
        #[arg(long)]
        inner_tau_ps: Option<f64>,
        #[arg(long)]
        min_f: Option<f64>,
    },
    /// One-parameter sweep of a full asymmetric CNOT.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Scored grid over cross-resonance parameters.
    SeedSearch {
        #[command(flatten)]
        sim: SimArgs,
        /// `name=v1,v2,...`; repeat for a multi-axis grid, first axis slowest.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Re-optimizes shipped table rows from their reference parameters and summarizes.
    Reproduce(reproduce::ReproduceArgs),
    /// Parses device and pulse files and checks that they round-trip.
    Validate {
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
}

/// How a command finished when it did not error.
pub enum Outcome {
    Ok,
    BelowThreshold(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone();
    let result = match cli.command {
        Command::Spectrum { device } => commands::spectrum(&out, &device),
        Command::Fidelity { sim, metric, min_f, ideal } => commands::fidelity(&out, &sim, metric, min_f, ideal),
        Command::Success { sim } => commands::success(&out, &sim),
        Command::Bloch { sim, initial, stride } => commands::bloch(&out, &sim, &initial, stride),
        Command::Evolve { sim, full } => commands::evolve(&out, &sim, full),
        Command::Optimize { sim, metric, free, max_evals, inner_m, inner_tau_ps, min_f } => {
            commands::optimize(&out, &sim, metric, &free, max_evals, inner_m, inner_tau_ps, min_f)
        }
        Command::Sweep { sim, metric, param, values } => commands::sweep(&out, &sim, metric, &param, &values),
        Command::SeedSearch { sim, axes } => commands::seed_search(&out, &sim, &axes),
        Command::Reproduce(args) => reproduce::run(&out, &args),
        Command::Validate { device, pulse } => commands::validate(device.as_deref(), pulse.as_deref()),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::BelowThreshold(msg)) => {
            eprintln!("threshold not met: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
