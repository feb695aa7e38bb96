//! `ien` command-line front end: dataset generation, training, ablation
//! evaluation and the live inference server.

pub mod server;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ien::dataset::{build_dataset, derive_seed, Dataset, DatasetConfig};
use ien::decision::{
    run_ablation, test_trials, traces_to_jsonl, AblationCase, CaseInput, TABLE_FRAMES, TABLE_THRESHOLDS,
};
use ien::model::{init_params, load_checkpoint, save_checkpoint, IenConfig};
use ien::motion::RenderMode;
use ien::scene::DetectorNoise;
use ien::trainer::{evaluate_loss, train_with, DatasetWindows, Samples, TrainConfig, TrainEvent};
use ien::Error;
use tracing::info;

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::ConfigMismatch(_)) => EXIT_USAGE,
            CliError::Core(Error::InvalidArgument(_)) => EXIT_USAGE,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ien", version, about = "Early intention estimation from hand motion and affordances")]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Network configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path; relative paths resolve under IEN_DATA_DIR when set.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    /// Default output root.
    #[arg(long, env = "IEN_DATA_DIR", hide = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate trials and write a dataset archive.
    GenData(GenDataArgs),
    /// Train a network on a dataset archive.
    Train(TrainArgs),
    /// Evaluate ablation checkpoints on fresh test trials.
    Eval(EvalArgs),
    /// Serve live inference sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Depth,
    Rgb,
    RgbExtracted,
}

impl From<ModeArg> for RenderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Depth => RenderMode::DepthLike,
            ModeArg::Rgb => RenderMode::RgbLike,
            ModeArg::RgbExtracted => RenderMode::RgbHandExtracted,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, value_enum, default_value = "depth")]
    pub mode: ModeArg,
    /// Square grid side in pixels.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.05)]
    pub mask_dropout: f64,
    #[arg(long, default_value_t = 2)]
    pub boundary_jitter: usize,
    #[arg(long, default_value_t = 0.02)]
    pub false_negative: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Train without affordance features.
    #[arg(long)]
    pub no_affordance: bool,
    /// Overfit the first window of the first N trials (smoke test).
    #[arg(long)]
    pub overfit: Option<usize>,
    /// Step budget in overfit mode.
    #[arg(long, default_value_t = 500)]
    pub max_steps: usize,
    /// Training log (JSON lines); defaults to the checkpoint path plus `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub depth_ao: Option<PathBuf>,
    #[arg(long)]
    pub depth_o: Option<PathBuf>,
    #[arg(long)]
    pub rgb_ao: Option<PathBuf>,
    #[arg(long)]
    pub rgb_o: Option<PathBuf>,
    /// Comma-separated subset of cases to evaluate.
    #[arg(long, value_delimiter = ',')]
    pub cases: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub test_trials: usize,
    /// Also write per-trial probability traces.
    #[arg(long)]
    pub traces: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
    /// Idle seconds before a session expires.
    #[arg(long, default_value_t = 300)]
    pub idle_timeout: u64,
    /// Directory of web assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

impl Cli {
    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.resolve(self.out.as_deref().unwrap_or(Path::new(default)))
    }

    fn model_config(&self, hand_channels: usize) -> CliResult<IenConfig> {
        match &self.config {
            Some(p) => Ok(serde_json::from_slice(&std::fs::read(p)?).map_err(Error::from)?),
            None => Ok(IenConfig::reference(hand_channels)),
        }
    }
}

/// Runs a parsed command line; returns a one-line summary for stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Serve(a) => serve_cmd(cli, a),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CliResult<String> {
    let mut cfg = DatasetConfig::new(a.trials as usize, a.mode.into(), cli.seed);
    cfg.grid = ien::scene::Grid::new(a.grid, a.grid);
    cfg.sigma *= a.grid as f64 / 64.0;
    cfg.noise = DetectorNoise {
        mask_dropout: a.mask_dropout,
        boundary_jitter: a.boundary_jitter,
        false_negative: a.false_negative,
    };
    let ds = build_dataset(&cfg)?;
    let out = cli.out_or("data.ien");
    ds.save(&out)?;
    info!(path = %out.display(), "wrote dataset");
    Ok(format!(
        "trials={} windows={} window_length={} mode={:?} grid={}x{} seed={} out={}",
        ds.manifest.trial_count,
        ds.window_count(),
        cfg.window.length,
        cfg.mode,
        cfg.grid.height,
        cfg.grid.width,
        cfg.seed,
        out.display()
    ))
}

fn check_data_matches(ds: &Dataset, cfg: &IenConfig) -> CliResult<()> {
    let dc = ds.config();
    if dc.grid != cfg.grid {
        return Err(Error::ConfigMismatch(format!(
            "dataset grid {}x{} but config grid {}x{}",
            dc.grid.height, dc.grid.width, cfg.grid.height, cfg.grid.width
        ))
        .into());
    }
    if dc.mode.channels() != cfg.hand_channels {
        return Err(Error::ConfigMismatch(format!(
            "dataset has {} hand channels but config expects {}",
            dc.mode.channels(),
            cfg.hand_channels
        ))
        .into());
    }
    if dc.window.length > cfg.max_sequence {
        return Err(Error::ConfigMismatch(format!(
            "window length {} exceeds max sequence {}",
            dc.window.length, cfg.max_sequence
        ))
        .into());
    }
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CliResult<String> {
    let ds = Dataset::load(cli.resolve(&a.data))?;
    let mut cfg = cli.model_config(ds.config().mode.channels())?;
    if a.no_affordance {
        cfg.use_affordance = false;
    }
    cfg.validate()?;
    check_data_matches(&ds, &cfg)?;
    let samples = match a.overfit {
        Some(0) => return Err(CliError::Usage("--overfit needs at least one trial".into())),
        Some(n) if n > ds.trials.len() => {
            return Err(CliError::Usage(format!("--overfit {n} but dataset has {} trials", ds.trials.len())))
        }
        Some(n) => DatasetWindows::pairs(&ds, (0..n).map(|t| (t, 0)).collect()),
        None => DatasetWindows::all(&ds),
    };
    let tc = match a.overfit {
        Some(_) => {
            let steps_per_epoch = samples.len().div_ceil(a.batch_size.max(1));
            TrainConfig {
                epochs: (a.max_steps / steps_per_epoch.max(1)).max(1),
                batch_size: a.batch_size,
                learning_rate: a.lr,
                seed: cli.seed,
                ..TrainConfig::default()
            }
        }
        None => TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            seed: cli.seed,
            ..TrainConfig::default()
        },
    };
    let init = init_params(&cfg, derive_seed(cli.seed, 0x1417))?;
    let (params, log) = train_with(&samples, &cfg, &tc, init, &mut |e| match e {
        TrainEvent::Step { step, loss } => info!(step, loss, "train"),
        TrainEvent::Epoch { epoch, mean_loss } => info!(epoch, mean_loss, "epoch"),
    })?;
    let out = cli.out_or("model.ckpt");
    save_checkpoint(&params, &cfg, &out)?;
    let log_path = a
        .log
        .as_ref()
        .map(|p| cli.resolve(p))
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
    std::fs::write(&log_path, log.to_jsonl()?)?;
    let final_kl = evaluate_loss(&params, &cfg, &samples, tc.loss_eps)?;
    Ok(format!(
        "steps={} final_kl={final_kl:.6} out={} log={}",
        log.step_losses.len(),
        out.display(),
        log_path.display()
    ))
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> CliResult<String> {
    let wanted: Vec<AblationCase> = if a.cases.is_empty() {
        AblationCase::ALL.to_vec()
    } else {
        a.cases
            .iter()
            .map(|c| AblationCase::parse(c.trim()))
            .collect::<Result<_, _>>()?
    };
    let paths = [
        (AblationCase::DepthAO, &a.depth_ao),
        (AblationCase::DepthO, &a.depth_o),
        (AblationCase::RgbAO, &a.rgb_ao),
        (AblationCase::RgbO, &a.rgb_o),
    ];
    let mut models = Vec::new();
    for (case, path) in paths {
        if !wanted.contains(&case) {
            continue;
        }
        match path {
            Some(p) => models.push((case, load_checkpoint(cli.resolve(p))?)),
            None if a.cases.is_empty() => {}
            None => {
                return Err(CliError::Usage(format!(
                    "--cases {} needs --{}",
                    case.name(),
                    case.name()
                )))
            }
        }
    }
    if models.is_empty() {
        return Err(CliError::Usage("no checkpoints given".into()));
    }
    if a.test_trials == 0 {
        return Err(CliError::Usage("--test-trials must be at least 1".into()));
    }
    let mut test_sets = Vec::new();
    for (case, (_, cfg)) in &models {
        test_sets.push(test_trials(cfg.grid, case.mode(), a.test_trials, cli.seed)?);
    }
    let inputs: Vec<CaseInput> = models
        .iter()
        .zip(&test_sets)
        .map(|((case, (params, cfg)), trials)| CaseInput { case: *case, params, config: cfg, trials })
        .collect();
    let (table, traces) = run_ablation(&inputs, &TABLE_FRAMES, &TABLE_THRESHOLDS)?;
    let out = cli.out_or("eval");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("fscores.csv"), table.to_csv())?;
    let text = table.to_text();
    std::fs::write(out.join("fscores.txt"), &text)?;
    if a.traces {
        std::fs::write(out.join("traces.jsonl"), traces_to_jsonl(&traces)?)?;
    }
    Ok(text)
}

fn serve_cmd(cli: &Cli, a: &ServeArgs) -> CliResult<String> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold must lie in (0, 1), got {}", a.threshold)));
    }
    let (params, cfg) = load_checkpoint(cli.resolve(&a.checkpoint))?;
    let state = Arc::new(server::AppState::new(
        params,
        cfg,
        server::ServerConfig {
            threshold: a.threshold,
            idle_timeout: Duration::from_secs(a.idle_timeout),
            static_dir: a.static_dir.clone(),
        },
    ));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr).await?;
        info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok("server stopped".into())
}
