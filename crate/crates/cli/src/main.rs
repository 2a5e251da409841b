use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mortvi::hmd::SexColumn;

mod commands;
mod config;

use config::{ConfigError, ModelChoice, Settings, Variant};

/// Poisson latent-factor mortality models fitted by variational inference.
#[derive(Debug, Parser)]
#[command(name = "mortvi", version)]
struct Cli {
    /// JSON or TOML settings; a sidecar from an earlier run also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Default location of HMD tables and `panel.csv`.
    #[arg(long, global = true, env = "MORTVI_DATA_DIR")]
    data_dir: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads for `evaluate` and `compare`.
    #[arg(long, short, global = true)]
    jobs: Option<usize>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a panel CSV from HMD deaths and exposures tables.
    Ingest(IngestArgs),
    /// Fit one model on a training window and write a checkpoint.
    Fit {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        lee_carter: LeeCarterArgs,
    },
    /// Forecast rates from a checkpoint.
    Forecast {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Latent paths drawn for the predictive.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rolling-window scores of one model family, sweeping hyperparameters.
    Evaluate {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        lee_carter: LeeCarterArgs,
    },
    /// Rolling-window scores of several models side by side.
    Compare {
        #[command(flatten)]
        panel: PanelArgs,
        /// Comma-separated, e.g. `affine-d3,rbf-d4-p15,lee-carter`.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelChoice>>,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        lee_carter: LeeCarterArgs,
    },
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    deaths: Option<PathBuf>,
    #[arg(long)]
    exposures: Option<PathBuf>,
    /// female, male or total.
    #[arg(long)]
    sex: Option<SexColumn>,
    #[arg(long)]
    age_cap: Option<u32>,
    #[arg(long)]
    first_year: Option<i32>,
    #[arg(long)]
    last_year: Option<i32>,
}

#[derive(Debug, Args)]
struct PanelArgs {
    #[arg(long)]
    panel: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    model: Option<Variant>,
    #[arg(long, value_delimiter = ',')]
    latent_dim: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    rbf_count: Option<Vec<usize>>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Per-step learning-rate factor.
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    convergence_window: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct WindowArgs {
    #[arg(long)]
    first_train_year: Option<i32>,
    #[arg(long)]
    train_len: Option<usize>,
    #[arg(long)]
    eval_len: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// First training year of the earliest window.
    #[arg(long)]
    sweep_start: Option<i32>,
    #[arg(long)]
    sweep_end: Option<i32>,
    /// Keep going when a window fails.
    #[arg(long)]
    skip_failed: bool,
}

#[derive(Debug, Args)]
struct LeeCarterArgs {
    #[arg(long)]
    lee_carter_max_iter: Option<usize>,
    #[arg(long)]
    lee_carter_tol: Option<f64>,
}

fn set<T>(slot: &mut T, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
    if value.is_some() {
        *slot = value.clone();
    }
}

impl PanelArgs {
    fn apply(&self, s: &mut Settings) {
        set_opt(&mut s.panel, &self.panel);
    }
}

impl ModelArgs {
    fn apply(&self, s: &mut Settings) {
        set(&mut s.model, &self.model);
        set(&mut s.latent_dim, &self.latent_dim);
        set(&mut s.rbf_count, &self.rbf_count);
        set(&mut s.tau, &self.tau);
    }
}

impl TrainArgs {
    fn apply(&self, s: &mut Settings) {
        if self.steps.is_some() && self.lr_decay.is_none() {
            s.lr_decay = None;
        }
        set(&mut s.steps, &self.steps);
        set(&mut s.learning_rate, &self.learning_rate);
        set_opt(&mut s.lr_decay, &self.lr_decay);
        set(&mut s.mc_samples, &self.mc_samples);
        set(&mut s.convergence_window, &self.convergence_window);
        set(&mut s.samples, &self.samples);
        set(&mut s.seed, &self.seed);
    }
}

impl WindowArgs {
    fn apply(&self, s: &mut Settings) {
        set(&mut s.first_train_year, &self.first_train_year);
        set(&mut s.train_len, &self.train_len);
        set(&mut s.eval_len, &self.eval_len);
    }
}

impl SweepArgs {
    fn apply(&self, s: &mut Settings) {
        set(&mut s.sweep_start, &self.sweep_start);
        set(&mut s.sweep_end, &self.sweep_end);
        s.skip_failed |= self.skip_failed;
    }
}

impl LeeCarterArgs {
    fn apply(&self, s: &mut Settings) {
        set(&mut s.lee_carter_max_iter, &self.lee_carter_max_iter);
        set(&mut s.lee_carter_tol, &self.lee_carter_tol);
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Fit { .. } => "fit",
            Command::Forecast { .. } => "forecast",
            Command::Evaluate { .. } => "evaluate",
            Command::Compare { .. } => "compare",
        }
    }

    fn apply(&self, s: &mut Settings) {
        match self {
            Command::Ingest(a) => {
                set_opt(&mut s.deaths, &a.deaths);
                set_opt(&mut s.exposures, &a.exposures);
                set(&mut s.sex, &a.sex);
                set(&mut s.age_cap, &a.age_cap);
                set_opt(&mut s.first_year, &a.first_year);
                set_opt(&mut s.last_year, &a.last_year);
            }
            Command::Fit { panel, model, train, window, lee_carter } => {
                panel.apply(s);
                model.apply(s);
                train.apply(s);
                window.apply(s);
                lee_carter.apply(s);
            }
            Command::Forecast { panel, checkpoint, horizon, samples, seed } => {
                panel.apply(s);
                set_opt(&mut s.checkpoint, checkpoint);
                set(&mut s.horizon, horizon);
                set(&mut s.samples, samples);
                set(&mut s.seed, seed);
            }
            Command::Evaluate { panel, model, train, window, sweep, lee_carter } => {
                panel.apply(s);
                model.apply(s);
                train.apply(s);
                window.apply(s);
                sweep.apply(s);
                lee_carter.apply(s);
            }
            Command::Compare { panel, models, tau, train, window, sweep, lee_carter } => {
                panel.apply(s);
                set(&mut s.compare, models);
                set(&mut s.tau, tau);
                train.apply(s);
                window.apply(s);
                sweep.apply(s);
                lee_carter.apply(s);
            }
        }
    }
}

fn settings(cli: &Cli) -> Result<Settings, ConfigError> {
    let mut s = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    cli.command.apply(&mut s);
    commands::fill_paths(cli.command.name(), &mut s, cli.data_dir.as_deref(), &cli.out);
    s.resolved()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || matches!(c.downcast_ref::<mortvi::Error>(), Some(mortvi::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = settings(&cli)
        .map_err(anyhow::Error::from)
        .and_then(|s| commands::run(cli.command.name(), &s, &cli.out, cli.jobs));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
