//! Command-line surface for reproducible maximization runs.
//!
//! Subcommands: `calibrate` records per-unit maximum activations,
//! `maximize` runs activation-maximization jobs into result bundles,
//! `render` turns bundles into PPM frames, and `gradcheck` cross-checks
//! every analytic gradient against finite differences.
//!
//! Machine-readable summaries go to standard output as TSV; human-oriented
//! progress text goes to standard error. Exit codes: 0 success,
//! 2 configuration error, 3 I/O error, 4 numeric failure.

mod commands;
mod runconfig;

use clap::{Parser, Subcommand};

use actmax_core::Error;

#[derive(Parser)]
#[command(name = "actmax", version, about = "Two-stream activation maximization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record per-unit maximum activations over a calibration set.
    Calibrate {
        /// Network spec file or weight directory.
        #[arg(long)]
        net: Option<String>,
        /// Weight seed when --net is a spec file.
        #[arg(long)]
        seed: Option<u64>,
        /// Calibration inputs: noise:<count>:<seed> or a directory of
        /// input NNNN.app.stt / NNNN.mot.stt pairs.
        #[arg(long)]
        source: Option<String>,
        /// Output table path.
        #[arg(long)]
        out: Option<String>,
        /// key=value config file providing defaults for the flags above.
        #[arg(long)]
        config: Option<String>,
    },
    /// Maximize one or more units into result bundles.
    Maximize {
        #[arg(long)]
        net: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Calibration table written by `calibrate`.
        #[arg(long)]
        calib: Option<String>,
        /// Output directory (one bundle subdirectory per job).
        #[arg(long)]
        out: Option<String>,
        /// Target unit as layer:channel; repeatable.
        #[arg(long = "unit")]
        units: Vec<String>,
        /// Spatial TV weight for the motion stream.
        #[arg(long)]
        kappa: Option<f64>,
        /// Temporal TV weight (slowness) for the motion stream; repeatable,
        /// one job per value.
        #[arg(long = "chi")]
        chis: Vec<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        eta0: Option<f64>,
        /// Disable the random spatial jitter.
        #[arg(long = "no-jitter", default_value_t = false)]
        no_jitter: bool,
        /// Plain gradient steps instead of ADAM.
        #[arg(long = "plain-ascent", default_value_t = false)]
        plain_ascent: bool,
        /// Worker threads across jobs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Overwrite existing bundles.
        #[arg(long, default_value_t = false)]
        force: bool,
        #[arg(long)]
        config: Option<String>,
    },
    /// Render bundles into PPM frames.
    Render {
        /// Result bundle directories.
        #[arg(required = true)]
        bundles: Vec<String>,
        /// Flow encoder: rgb (horizontal, vertical, magnitude) or hsv.
        #[arg(long, default_value = "rgb")]
        encoder: String,
    },
    /// Check analytic gradients of every layer kind and regularizer against
    /// finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corrupt the analytic network gradients first (negative control;
        /// the check must then fail).
        #[arg(long, default_value_t = false)]
        corrupt: bool,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 3,
        Error::OutsideBall { .. }
        | Error::NonFiniteValue { .. }
        | Error::NonFiniteObjective { .. } => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Calibrate {
            net,
            seed,
            source,
            out,
            config,
        } => commands::calibrate(net, seed, source, out, config),
        Command::Maximize {
            net,
            seed,
            calib,
            out,
            units,
            kappa,
            chis,
            iterations,
            eta0,
            no_jitter,
            plain_ascent,
            jobs,
            force,
            config,
        } => commands::maximize(commands::MaximizeArgs {
            net,
            seed,
            calib,
            out,
            units,
            kappa,
            chis,
            iterations,
            eta0,
            no_jitter,
            plain_ascent,
            jobs,
            force,
            config,
        }),
        Command::Render { bundles, encoder } => commands::render(&bundles, &encoder),
        Command::Gradcheck { seed, corrupt } => commands::gradcheck(seed, corrupt),
    };
    if let Err(err) = outcome {
        eprintln!("actmax: {err}");
        std::process::exit(exit_code(&err));
    }
}
