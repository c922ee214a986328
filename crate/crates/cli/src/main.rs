//! `flowgeo`: train a flow prior plus posterior from corrupted measurements,
//! query the learned geometry, build the tangent autoencoder, and run
//! decoder-prior or TV inversion.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data/schema, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use flowgeo_cli::{commands, config};
use std::path::PathBuf;
use std::process::ExitCode;

use commands::{resolve_out_dir, Tier};
use config::RunConfig;
use flowgeo_core::error::Error;

#[derive(Parser)]
#[command(name = "flowgeo", version, about = "Flow-pullback geometry from corrupted data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a run config JSON.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (`sinusoid`, `mnist14`).
    #[arg(long)]
    preset: Option<String>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `$FLOWGEO_OUT/<experiment>` or `runs/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => RunConfig::from_path(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            _ => {
                return Err(Error::invalid("cli", "pass exactly one of --config / --preset"));
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the prior and posterior on the configured dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Validate the config and exit without training.
        #[arg(long)]
        dry_run: bool,
        /// `quick` truncates the iteration budget for smoke runs.
        #[arg(long, default_value = "full")]
        tier: String,
    },
    /// Draw samples from a flow checkpoint.
    Sample {
        /// Flow checkpoint path.
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a PGM grid (square image dims only).
        #[arg(long)]
        pgm: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the tangent autoencoder from a trained flow.
    Rae {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        flow: PathBuf,
    },
    /// Sample a pullback geodesic between two points as CSV.
    Geodesic {
        #[arg(long)]
        flow: PathBuf,
        /// JSON array, e.g. `[0.1, 0.2, 0.3]`.
        #[arg(long, conflicts_with = "index_a")]
        point_a: Option<String>,
        #[arg(long, conflicts_with = "index_b")]
        point_b: Option<String>,
        /// Clean-reference row index (requires --config/--preset).
        #[arg(long)]
        index_a: Option<usize>,
        #[arg(long)]
        index_b: Option<usize>,
        /// Config supplying the dataset for index lookups.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient-descent inversion through the autoencoder decoder.
    Invert {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        rae: PathBuf,
        /// Measurement: array manifest or bare JSON array.
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        alpha: f64,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        /// Also emit the convergence certificate report.
        #[arg(long)]
        certificate: bool,
    },
    /// Empirical isometry checks and the convergence certificate.
    Check {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        rae: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 10_000)]
        quadruples: usize,
        #[arg(long, default_value_t = 1e-2)]
        alpha: f64,
    },
    /// Total-variation baseline reconstruction.
    Tv {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        lambda: f64,
        /// Step size; default `0.2 / ||A||^2`.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
    },
    /// Recoverability report on a trained synthetic run.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        rae: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument { .. } | Error::NotScalar { .. } | Error::ShapeMismatch { .. } => 1,
        Error::Data { .. } | Error::Schema { .. } | Error::Io(_) | Error::Json(_) => 2,
        Error::Numeric { .. } | Error::Singular { .. } => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { cfg, dry_run, tier } => {
            let config = cfg.load()?;
            let tier = match tier.as_str() {
                "quick" => Tier::Quick,
                "full" => Tier::Full,
                other => {
                    return Err(Error::invalid("cli", format!("unknown tier `{other}`")));
                }
            };
            let out_dir = resolve_out_dir(cfg.out.as_deref(), &config.experiment);
            commands::cmd_train(&commands::TrainArgs { config, out_dir, dry_run, tier })
        }
        Command::Sample { flow, count, seed, pgm, out } => {
            let out_dir = resolve_out_dir(out.as_deref(), "sample");
            commands::cmd_sample(&commands::SampleArgs { flow, count, seed, pgm }, &out_dir)
        }
        Command::Rae { cfg, flow } => {
            let config = cfg.load()?;
            let out_dir =
                resolve_out_dir(cfg.out.as_deref(), &format!("{}-rae", config.experiment));
            let seed = config.seed;
            commands::cmd_rae(&config, &commands::RaeArgs { flow, seed }, &out_dir)
        }
        Command::Geodesic { flow, point_a, point_b, index_a, index_b, config, preset, steps, out } => {
            let lookup = |point: &Option<String>, index: Option<usize>| -> Result<Vec<f64>, Error> {
                match (point, index) {
                    (Some(json), None) => Ok(serde_json::from_str(json)?),
                    (None, Some(i)) => {
                        let cfg = ConfigArgs {
                            config: config.clone(),
                            preset: preset.clone(),
                            seed: None,
                            out: None,
                        }
                        .load()?;
                        let (ds, _) = cfg.build_data()?;
                        if i >= ds.clean_reference.rows() {
                            return Err(Error::invalid(
                                "geodesic",
                                format!("index {i} outside clean reference set"),
                            ));
                        }
                        Ok(ds.clean_reference.row(i).to_vec())
                    }
                    _ => Err(Error::invalid(
                        "geodesic",
                        "give each endpoint as --point-X or --index-X",
                    )),
                }
            };
            let pa = lookup(&point_a, index_a)?;
            let pb = lookup(&point_b, index_b)?;
            let out_dir = resolve_out_dir(out.as_deref(), "geodesic");
            commands::cmd_geodesic(
                &commands::GeodesicArgs { flow, point_a: pa, point_b: pb, steps },
                &out_dir,
            )
        }
        Command::Invert { cfg, flow, rae, measurement, alpha, iters, certificate } => {
            let config = cfg.load()?;
            let out_dir =
                resolve_out_dir(cfg.out.as_deref(), &format!("{}-invert", config.experiment));
            let seed = config.seed;
            commands::cmd_invert(
                &config,
                &commands::InvertArgs { flow, rae, measurement, alpha, iters, certificate, seed },
                &out_dir,
            )
        }
        Command::Check { cfg, flow, rae, pairs, quadruples, alpha } => {
            let config = cfg.load()?;
            let out_dir =
                resolve_out_dir(cfg.out.as_deref(), &format!("{}-check", config.experiment));
            let seed = config.seed;
            commands::cmd_check(
                &config,
                &commands::CheckArgs { flow, rae, pairs, quadruples, alpha, seed },
                &out_dir,
            )
        }
        Command::Tv { cfg, measurement, lambda, alpha, iters } => {
            let config = cfg.load()?;
            let out_dir =
                resolve_out_dir(cfg.out.as_deref(), &format!("{}-tv", config.experiment));
            commands::cmd_tv(
                &config,
                &commands::TvArgs { measurement, lambda, alpha, iters },
                &out_dir,
            )
        }
        Command::Verify { cfg, flow, rae, samples } => {
            let config = cfg.load()?;
            let out_dir =
                resolve_out_dir(cfg.out.as_deref(), &format!("{}-verify", config.experiment));
            let seed = config.seed;
            commands::cmd_verify(
                &config,
                &commands::VerifyArgs { flow, rae, samples, seed },
                &out_dir,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit 0; anything else is a usage error.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
