//! `crowdlens`: generate synthetic CDRs, detect unusual crowd events, score
//! detections and serve runs over HTTP.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdlens_core::synth::SynthConfig;
use crowdlens_core::Params;

#[derive(Debug, Parser)]
#[command(name = "crowdlens", version, about = "Unusual crowd event detection from call detail records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic city: calls.csv, antennas.csv, ground_truth.json.
    Synth(SynthArgs),
    /// Run detection and write events, crowds and the time series.
    Detect(DetectArgs),
    /// Build mobility profiles from a call history.
    ProfileBuild(ProfileArgs),
    /// Score detected events against planted ones.
    Eval(EvalArgs),
    /// Serve runs over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long, env = "CROWDLENS_CALLS")]
    calls: PathBuf,
    #[arg(long, env = "CROWDLENS_ANTENNAS")]
    antennas: PathBuf,
}

#[derive(Debug, Args)]
struct ParamArgs {
    /// Minimum users in a cluster.
    #[arg(long, env = "CROWDLENS_EPSILON_N", default_value_t = Params::default().scale)]
    epsilon_n: usize,
    /// Minimum crowd lifetime in timestamps.
    #[arg(long, env = "CROWDLENS_EPSILON_LT", default_value_t = Params::default().lifetime)]
    epsilon_lt: usize,
    /// Minimum committed users.
    #[arg(long, env = "CROWDLENS_EPSILON_CI", default_value_t = Params::default().commitment)]
    epsilon_ci: usize,
    /// Existence probability a committed user must keep.
    #[arg(long, env = "CROWDLENS_EPSILON_P", default_value_t = Params::default().commitment_probability)]
    epsilon_p: f64,
    /// Crowds below this mean profile similarity are unusual.
    #[arg(long, env = "CROWDLENS_EPSILON_SI", default_value_t = Params::default().similarity)]
    epsilon_si: f64,
    /// Minimum distinct antennas visited by a crowd.
    #[arg(long, env = "CROWDLENS_MIN_LOCATIONS", default_value_t = Params::default().min_locations)]
    min_locations: usize,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Debug, Args)]
struct WindowArgs {
    /// Half width of the window around each hourly timestamp.
    #[arg(long, env = "CROWDLENS_WINDOW_MINUTES", default_value_t = Params::default().half_window_secs / 60)]
    window_minutes: i64,
}

impl ParamArgs {
    fn params(&self) -> Params {
        Params {
            scale: self.epsilon_n,
            lifetime: self.epsilon_lt,
            commitment: self.epsilon_ci,
            commitment_probability: self.epsilon_p,
            similarity: self.epsilon_si,
            min_locations: self.min_locations,
            half_window_secs: self.window.secs(),
        }
    }
}

impl WindowArgs {
    fn secs(&self) -> i64 {
        self.window_minutes.saturating_mul(60)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, env = "CROWDLENS_OUT")]
    out: PathBuf,
    #[arg(long, env = "CROWDLENS_SEED", default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, env = "CROWDLENS_USERS", default_value_t = SynthConfig::default().n_users)]
    users: usize,
    #[arg(long, env = "CROWDLENS_ANTENNAS_COUNT", default_value_t = SynthConfig::default().n_antennas)]
    antennas_count: usize,
    #[arg(long, env = "CROWDLENS_DAYS", default_value_t = SynthConfig::default().n_days)]
    days: usize,
    /// Planted events.
    #[arg(long, env = "CROWDLENS_EVENTS", default_value_t = SynthConfig::default().n_events)]
    events: usize,
    /// Participants per planted event.
    #[arg(long, env = "CROWDLENS_PARTICIPANTS", default_value_t = SynthConfig::default().event_participants)]
    participants: usize,
    /// Keep only the earliest calls.
    #[arg(long, env = "CROWDLENS_MAX_CALLS")]
    max_calls: Option<usize>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, env = "CROWDLENS_OUT")]
    out: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
    /// Profiles from `profile-build`; the input's own calls otherwise.
    #[arg(long, env = "CROWDLENS_PROFILES")]
    profiles: Option<PathBuf>,
    /// Score crowds against profiles that still include the crowd's own calls.
    #[arg(long, env = "CROWDLENS_NO_HOLDOUT")]
    no_holdout: bool,
    /// `antenna_id,name` rows listed with event clusters.
    #[arg(long, env = "CROWDLENS_POIS")]
    pois: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Directory receiving profiles.json.
    #[arg(long, env = "CROWDLENS_OUT")]
    out: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// ground_truth.json from `synth`.
    #[arg(long, env = "CROWDLENS_TRUTH", required_unless_present = "counts")]
    truth: Option<PathBuf>,
    /// events.json from `detect`.
    #[arg(long, env = "CROWDLENS_DETECTED", required_unless_present = "counts")]
    detected: Option<PathBuf>,
    /// JSON `{matched, detected, truth}` scored as is.
    #[arg(long, env = "CROWDLENS_COUNTS", conflicts_with_all = ["truth", "detected"])]
    counts: Option<PathBuf>,
    /// Also write the result as JSON here.
    #[arg(long, env = "CROWDLENS_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Directory with calls.csv, antennas.csv and optionally pois.csv.
    #[arg(long, env = "CROWDLENS_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "CROWDLENS_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "CROWDLENS_PORT", default_value_t = 8080)]
    port: u16,
    /// Static UI assets.
    #[arg(long, env = "CROWDLENS_UI_DIR", default_value = "ui/dist")]
    ui_dir: PathBuf,
    #[arg(long, env = "CROWDLENS_NO_UI_ASSETS")]
    no_ui_assets: bool,
    #[command(flatten)]
    window: WindowArgs,
}

/// Bad input from the caller, exit 2; anything else exits 1.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::ProfileBuild(a) => commands::profile_build(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Serve(a) => commands::serve(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
