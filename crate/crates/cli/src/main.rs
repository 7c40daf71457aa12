//! `altpred`: command-line front end for the landing-time pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use alt_core::CoreError;
use clap::{Args, Parser, Subcommand};

/// Exit status for each failure class.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "ALTPRED_THREADS";

#[derive(Parser, Debug)]
#[command(name = "altpred", version, about = "Aircraft landing-time prediction pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON pipeline config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the simulator, split, weight init, shuffling and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

/// Input locations and geometry shared by the data subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct Inputs {
    /// ADS-B CSV with columns id,time,lat,lon,alt,gs,trk.
    #[arg(long)]
    pub adsb: Option<PathBuf>,
    /// METAR CSV.
    #[arg(long)]
    pub metar: Option<PathBuf>,
    /// Flight-plan CSV (aircraft_id,actype).
    #[arg(long)]
    pub fpl: Option<PathBuf>,
    /// Aircraft type to RECAT-EU code CSV.
    #[arg(long)]
    pub recat: Option<PathBuf>,
    /// Runway threshold JSON; defaults to the built-in Changi layout.
    #[arg(long)]
    pub runways: Option<PathBuf>,
    /// Airport reference point as LAT,LON.
    #[arg(long, value_parser = parse_latlon)]
    pub center: Option<(f64, f64)>,
    /// Research circle radius, NM.
    #[arg(long)]
    pub trc_nm: Option<f64>,
    /// Extended boundary radius, NM.
    #[arg(long)]
    pub tbx_nm: Option<f64>,
    /// Largest gap filled by imputation, seconds.
    #[arg(long)]
    pub max_gap: Option<i64>,
    /// Holding detector window, seconds.
    #[arg(long)]
    pub holding_window_s: Option<i64>,
    /// Holding detector turn threshold, degrees.
    #[arg(long)]
    pub holding_deg: Option<f64>,
}

fn parse_latlon(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LAT,LON")?;
    let lat = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let lon = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lat, lon))
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scenario (ADS-B, METAR, flight plans, truth).
    Simulate {
        #[arg(long)]
        hours: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        /// Fraction of ADS-B rows to drop after generation.
        #[arg(long, default_value_t = 0.0)]
        gap_rate: f64,
    },
    /// Impute and split tracks, then extract labeled arrivals.
    Ingest {
        #[command(flatten)]
        inputs: Inputs,
        /// Keep label outliers instead of removing them.
        #[arg(long)]
        keep_outliers: bool,
    },
    /// Build images, feature vectors and the manifest.
    BuildDataset {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        tau_s: Option<i64>,
        #[arg(long)]
        delta_min: Option<i64>,
        #[arg(long)]
        img_size: Option<u32>,
    },
    /// Render trajectory images without building features.
    Rasterize {
        #[command(flatten)]
        inputs: Inputs,
        /// Only this aircraft; default is every arrival.
        #[arg(long)]
        id: Option<String>,
        /// Reference time; default is the aircraft's TRC arrival.
        #[arg(long)]
        t_ref: Option<i64>,
        #[arg(long)]
        tau: Option<i64>,
        #[arg(long)]
        img_size: Option<u32>,
    },
    /// Train on a dataset directory and score the test split.
    Train {
        /// Directory written by build-dataset.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Drop the holding branch.
        #[arg(long)]
        ablate_holding: bool,
        /// f32 or f64.
        #[arg(long)]
        precision: Option<String>,
    },
    /// Metrics from a prediction file against truth.
    Evaluate {
        /// CSV with columns id,pred_s.
        #[arg(long)]
        pred: PathBuf,
        /// CSV with columns id,label_s (or aircraft_id,label).
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Metrics, APE CDF, feature analysis and curves for a trained run.
    Report {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by train.
        #[arg(long)]
        run: PathBuf,
        /// Optional baseline run (e.g. the ablated model) to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Sweep capture windows and emit a tau x delta MAE matrix.
    Grid {
        #[command(flatten)]
        inputs: Inputs,
        /// Comma-separated tau values, seconds.
        #[arg(long, value_delimiter = ',', default_values_t = [30, 60, 90, 120])]
        taus: Vec<i64>,
        /// Comma-separated delta values, minutes.
        #[arg(long, value_delimiter = ',', default_values_t = [10, 15, 20, 25, 30])]
        deltas: Vec<i64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ablate_holding: bool,
    },
}

/// Maps a pipeline error to its exit status.
pub fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::Model(_) => EXIT_CONFIG,
        CoreError::Diverged { .. } => EXIT_DIVERGED,
        CoreError::Io { .. }
        | CoreError::Csv(_)
        | CoreError::Json(_)
        | CoreError::Schema(_)
        | CoreError::Data(_)
        | CoreError::Geometry(_)
        | CoreError::Png(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
