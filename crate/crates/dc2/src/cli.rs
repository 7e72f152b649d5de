//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Settings come
//! from flags, then environment variables, then a JSON config file given
//! with `--config` whose keys are flag names.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dc2_core::dfnet::ModelConfig;
use dc2_core::eval::{EvalOptions, Task};
use dc2_core::loss::PerceptualBackend;
use dc2_core::optics::DepthMap;
use dc2_core::spec::{DefocusSpec, TileConfig, TiltShift};
use dc2_core::synth::{CameraRig, SceneConfig};
use dc2_core::train::TrainConfig;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{self, GenConfig};
use crate::error::{io_err, Error, Result};
use crate::evaluation;
use crate::formats::{encode_png, read_png, read_raw, read_warp, write_bytes};
use crate::repro::{config_hash, Header};
use crate::service::{self, ServiceConfig, ENV_CKPT, ENV_PORT, ENV_STORE};
use crate::session::{Session, SessionInput, UwInput};
use crate::training::{self, Ablation, TrainRun};
use crate::wire::{Provenance, WireSpec};

#[derive(Debug, Parser, Serialize)]
#[command(name = "dc2", version, about = "Dual-camera defocus control")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// JSON file of defaults keyed by flag name; flags and environment win.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Render a synthetic focus-stack dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint and baselines.
    Eval(EvalArgs),
    /// Render one capture at a new focus distance and aperture.
    Refocus(RefocusArgs),
    /// Render one capture with a preset effect.
    Effect(EffectArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Print the metadata of a checkpoint, scene or session.
    Inspect(InspectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    #[arg(long, default_value_t = 10)]
    pub slices: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub baseline_mm: f64,
    #[arg(long, default_value_t = 0.05)]
    pub color_jitter: f32,
    #[arg(long, default_value_t = 192)]
    pub width: usize,
    #[arg(long, default_value_t = 192)]
    pub height: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Scene worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModelSize {
    /// 16 base channels, full ASPP widths.
    Default,
    /// 4 base channels, narrow ASPP stages.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Perceptual {
    RandomConv,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum AblationArg {
    WOnly,
    UwOnly,
    NoOcclusion,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::WOnly => Ablation::WOnly,
            AblationArg::UwOnly => Ablation::UwOnly,
            AblationArg::NoOcclusion => Ablation::NoOcclusion,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps1: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps2: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub crop: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr1: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lr2: f64,
    #[arg(long, value_enum, default_value_t = ModelSize::Default)]
    pub model: ModelSize,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long, value_enum, default_value_t = Perceptual::RandomConv)]
    pub perceptual: Perceptual,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum TaskArg {
    Deblur,
    Bokeh,
    Refocus,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct TileArgs {
    #[arg(long, default_value_t = 512)]
    pub max_tile: usize,
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
    #[arg(long, default_value_t = 64)]
    pub halo: usize,
}

impl TileArgs {
    fn tiles(&self) -> TileConfig {
        TileConfig {
            max_tile: self.max_tile,
            overlap: self.overlap,
            halo: self.halo,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, env = ENV_CKPT)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub pairs_per_scene: usize,
    /// Score raw predictions without field-of-view alignment.
    #[arg(long)]
    pub no_align: bool,
    #[command(flatten)]
    pub tiles: TileArgs,
}

/// A capture to render from, as files.
#[derive(Debug, Args, Serialize)]
pub struct CaptureArgs {
    #[arg(long, env = ENV_CKPT)]
    pub ckpt: PathBuf,
    /// Wide image (PNG).
    #[arg(long)]
    pub w: PathBuf,
    /// Raw ultra-wide frame (PNG); aligned by block matching unless
    /// `--warp` is given.
    #[arg(long, conflicts_with = "uw_warped")]
    pub uw: Option<PathBuf>,
    /// Displacement field (raw warp format) from the wide grid into `--uw`.
    #[arg(long, requires = "uw")]
    pub warp: Option<PathBuf>,
    /// Ultra-wide frame already on the wide grid (PNG); needs `--occlusion`.
    #[arg(long, requires = "occlusion")]
    pub uw_warped: Option<PathBuf>,
    #[arg(long)]
    pub occlusion: Option<PathBuf>,
    /// Depth in millimetres (raw float format).
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Rig JSON, or a dataset `meta.json` holding one under `rig`.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Focus distance the wide image was captured at.
    #[arg(long)]
    pub ref_focus_mm: Option<f64>,
    #[arg(long)]
    pub ref_aperture_mm: Option<f64>,
    #[arg(long, default_value_t = dc2_core::spec::DEFAULT_MAX_RADIUS_PX)]
    pub max_radius_px: f32,
    #[command(flatten)]
    pub tiles: TileArgs,
    /// Output PNG; provenance goes to the same path with `.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RefocusArgs {
    #[arg(long)]
    pub focus_mm: f64,
    #[arg(long)]
    pub aperture_mm: f64,
    #[command(flatten)]
    pub capture: CaptureArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EffectArgs {
    #[command(subcommand)]
    pub effect: Effect,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Effect {
    /// Sharp band along a line, blur growing with distance from it.
    Tiltshift {
        #[arg(long)]
        slope: f64,
        #[arg(long, default_value_t = 0.0)]
        angle_deg: f64,
        /// Point on the in-focus line; the image centre if absent.
        #[arg(long, num_args = 2, value_names = ["X", "Y"])]
        point: Option<Vec<f64>>,
        #[arg(long, default_value_t = 16.0)]
        max_radius: f64,
        #[command(flatten)]
        capture: CaptureArgs,
    },
    /// Everything in focus.
    Aif {
        #[command(flatten)]
        capture: CaptureArgs,
    },
    /// Per-region blur from a mask.
    Mask {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        fg_radius: f32,
        #[arg(long, default_value_t = 8.0)]
        bg_radius: f32,
        #[command(flatten)]
        capture: CaptureArgs,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, env = ENV_CKPT)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, env = ENV_STORE, default_value = "dc2-sessions")]
    pub store: PathBuf,
    #[arg(long, env = ENV_PORT, default_value_t = service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub tiles: TileArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    /// A checkpoint file, a scene folder or a session folder.
    pub path: PathBuf,
}

/// Usage errors exit with 1, everything else with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn env_for(key: &str) -> Option<&'static str> {
    match key {
        "ckpt" => Some(ENV_CKPT),
        "store" => Some(ENV_STORE),
        "port" => Some(ENV_PORT),
        _ => None,
    }
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Appends `--key value` for every config-file entry that is set neither
/// on the command line nor through its environment variable.
pub fn apply_config_file(argv: Vec<OsString>, config: &serde_json::Value) -> std::result::Result<Vec<OsString>, CliError> {
    let obj = config
        .as_object()
        .ok_or_else(|| CliError::Usage("config file must hold a JSON object".into()))?;
    let mut out = argv;
    for (key, value) in obj {
        let flag_name = key.replace('_', "-");
        if flag_name == "config" {
            continue;
        }
        let flag = format!("--{flag_name}");
        let given = out.iter().any(|a| {
            let a = a.to_string_lossy();
            a == flag || a.starts_with(&format!("{flag}="))
        });
        let from_env = env_for(&flag_name).is_some_and(|v| std::env::var_os(v).is_some());
        if given || from_env {
            continue;
        }
        let scalar = |v: &serde_json::Value| -> std::result::Result<String, CliError> {
            match v {
                serde_json::Value::String(s) => Ok(s.clone()),
                serde_json::Value::Number(n) => Ok(n.to_string()),
                _ => Err(CliError::Usage(format!("config key {key:?}: unsupported value {v}"))),
            }
        };
        match value {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Array(items) => {
                out.push(flag.into());
                for v in items {
                    out.push(scalar(v)?.into());
                }
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

/// Parses `argv` (program name first) with config-file defaults applied.
pub fn parse(argv: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let argv = match config_path(&argv) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                clap::Error::raw(clap::error::ErrorKind::Io, format!("config {}: {e}\n", path.display()))
            })?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
                clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("config {}: {e}\n", path.display()))
            })?;
            apply_config_file(argv, &value)
                .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")))?
        }
        None => argv,
    };
    Cli::try_parse_from(argv)
}

/// Runs the CLI and returns the process exit code. Results go to `out`,
/// the reproducibility header and progress to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let cli = match parse(args.into_iter().map(Into::into).collect()) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Refocus(_) => "refocus",
        Command::Effect(_) => "effect",
        Command::Serve(_) => "serve",
        Command::Inspect(_) => "inspect",
    }
}

fn header(cli: &Cli, checkpoint: Option<String>) -> Result<Header> {
    Ok(Header {
        command: command_name(&cli.command).into(),
        seed: cli.seed,
        config_hash: config_hash(cli)?,
        checkpoint,
    })
}

fn emit(err: &mut dyn Write, line: impl std::fmt::Display) {
    let _ = writeln!(err, "{line}");
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, out, err),
        Command::Train(a) => train(cli, a, out, err),
        Command::Eval(a) => eval(cli, a, out, err),
        Command::Refocus(a) => {
            let spec = WireSpec::Physical {
                aperture_mm: a.aperture_mm,
                focus_distance_mm: a.focus_mm,
            };
            render_capture(cli, &a.capture, spec, out, err)
        }
        Command::Effect(a) => {
            let (spec, capture) = effect_spec(&a.effect)?;
            render_capture(cli, capture, spec, out, err)
        }
        Command::Serve(a) => serve(cli, a, err),
        Command::Inspect(a) => inspect(cli, a, out, err),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), CliError> {
    let cfg = GenConfig {
        scenes: a.scenes,
        slices: a.slices,
        seed: cli.seed,
        scene: SceneConfig {
            width: a.width,
            height: a.height,
            n_layers: a.layers,
            ..SceneConfig::default()
        },
        baseline_mm: a.baseline_mm,
        color_jitter: a.color_jitter,
        workers: a
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        ..GenConfig::default()
    };
    if cfg.scenes == 0 || cfg.slices < 2 {
        return Err(CliError::Usage("--scenes must be positive and --slices at least 2".into()));
    }
    emit(err, header(cli, None)?);
    let dirs = dataset::generate_dataset(&a.out, &cfg)?;
    for d in dirs {
        let _ = writeln!(out, "{}", d.display());
    }
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), CliError> {
    let mut model = match a.model {
        ModelSize::Default => ModelConfig::default(),
        ModelSize::Tiny => ModelConfig::tiny(),
    };
    model.seed = cli.seed;
    let mut train = TrainConfig {
        batch_size: a.batch,
        crop: a.crop,
        steps1: a.steps1,
        lr_phase1: a.lr1,
        steps2: a.steps2,
        lr_phase2: a.lr2,
        seed: cli.seed,
        log_every: a.log_every,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    train.loss.perceptual = match a.perceptual {
        Perceptual::RandomConv => PerceptualBackend::default(),
        Perceptual::Off => PerceptualBackend::Off,
    };
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if train.total_steps() == 0 {
        return Err(CliError::Usage("--steps1 + --steps2 must be positive".into()));
    }
    let run = TrainRun {
        model,
        train,
        ablation: a.ablation.map(Ablation::from),
    };
    emit(err, header(cli, None)?);
    let scenes: Vec<_> = dataset::load_dataset(&a.data)?.into_iter().map(|s| s.stack).collect();
    let verbose = cli.verbose;
    let log_every = run.train.log_every.max(1);
    let outcome = training::train_on_scenes(&scenes, &run, &a.out, |r| {
        if verbose && r.step % log_every == 0 {
            emit(err, training::describe(r));
        }
    })?;
    emit(err, header(cli, Some(outcome.checkpoint_id.clone()))?);
    let _ = writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&outcome).map_err(Error::from)?
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), CliError> {
    let tasks: Vec<Task> = match a.task {
        TaskArg::Deblur => vec![Task::Deblur],
        TaskArg::Bokeh => vec![Task::Bokeh],
        TaskArg::Refocus => vec![Task::Refocus],
        TaskArg::All => Task::ALL.to_vec(),
    };
    let tiles = a.tiles.tiles();
    tiles.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ckpt = checkpoint::load(&a.ckpt)?;
    emit(err, header(cli, Some(ckpt.id.clone()))?);
    let scenes: Vec<_> = dataset::load_dataset(&a.data)?.into_iter().map(|s| s.stack).collect();
    let opts = EvalOptions {
        align: if a.no_align { None } else { EvalOptions::default().align },
        refocus_pairs_per_scene: a.pairs_per_scene,
        seed: cli.seed,
        ..EvalOptions::default()
    };
    let reports = evaluation::evaluate(&ckpt, &scenes, &tasks, &opts, tiles)?;
    let md = evaluation::write_reports(&a.out, &reports)?;
    let _ = write!(out, "{}", std::fs::read_to_string(&md).map_err(io_err(&md))?);
    Ok(())
}

fn effect_spec(e: &Effect) -> std::result::Result<(WireSpec, &CaptureArgs), CliError> {
    Ok(match e {
        Effect::Tiltshift {
            slope,
            angle_deg,
            point,
            max_radius,
            capture,
        } => {
            let point = point.as_ref().map(|p| [p[0], p[1]]);
            let t = TiltShift {
                point,
                angle_deg: *angle_deg,
                slope_px_per_px: *slope,
                max_radius_px: *max_radius,
            };
            (WireSpec::Tiltshift(t), capture)
        }
        Effect::Aif { capture } => (WireSpec::Zeros, capture),
        Effect::Mask {
            mask,
            fg_radius,
            bg_radius,
            capture,
        } => {
            let bytes = std::fs::read(mask).map_err(io_err(mask))?;
            (
                WireSpec::Masked {
                    mask_png: crate::wire::b64_encode(&bytes),
                    fg_radius_px: *fg_radius,
                    bg_radius_px: *bg_radius,
                },
                capture,
            )
        }
    })
}

/// Reads a rig from its own JSON or from a dataset `meta.json`.
pub fn read_rig(path: &Path) -> Result<CameraRig> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let v: serde_json::Value = serde_json::from_slice(&bytes)?;
    let rig = v.get("rig").cloned().unwrap_or(v);
    Ok(serde_json::from_value(rig)?)
}

/// Builds the in-memory session a capture renders from.
pub fn capture_session(c: &CaptureArgs) -> std::result::Result<Session, CliError> {
    let uw = match (&c.uw, &c.warp, &c.uw_warped, &c.occlusion) {
        (Some(uw), None, None, _) if c.occlusion.is_none() => UwInput::Raw(read_png(uw)?),
        (Some(uw), Some(field), None, occ) => UwInput::Field {
            frame: read_png(uw)?,
            field: read_warp(field)?,
            occlusion: occ.as_deref().map(read_png).transpose()?,
        },
        (None, None, Some(warped), Some(occ)) => UwInput::Prewarped {
            warped: read_png(warped)?,
            occlusion: read_png(occ)?,
        },
        _ => {
            return Err(CliError::Usage(
                "give --uw, --uw with --warp [--occlusion], or --uw-warped with --occlusion".into(),
            ))
        }
    };
    let depth = match &c.depth {
        Some(p) => {
            let img = read_raw(p)?;
            let (w, h) = img.dims();
            Some(DepthMap::new(w, h, img.into_vec()).map_err(Error::from)?)
        }
        None => None,
    };
    let input = SessionInput {
        w: read_png(&c.w)?,
        uw,
        depth,
        rig: c.rig.as_deref().map(read_rig).transpose()?,
        ref_focus_mm: c.ref_focus_mm,
        ref_aperture_mm: c.ref_aperture_mm,
    };
    Ok(Session::build("local".into(), 0, input)?)
}

/// Renders `spec` for a capture through the same path as the service and
/// returns the PNG bytes with provenance.
pub fn render_capture_bytes(
    ckpt: &Checkpoint,
    session: &Session,
    spec: &WireSpec,
    max_radius_px: f32,
    tiles: &TileConfig,
) -> Result<Vec<u8>> {
    let spec: DefocusSpec = spec.to_spec()?;
    encode_png(&session.render(&ckpt.model, &spec, max_radius_px, tiles)?)
}

fn render_capture(
    cli: &Cli,
    c: &CaptureArgs,
    spec: WireSpec,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::result::Result<(), CliError> {
    let tiles = c.tiles.tiles();
    tiles.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let start = std::time::Instant::now();
    let ckpt = checkpoint::load(&c.ckpt)?;
    emit(err, header(cli, Some(ckpt.id.clone()))?);
    let session = capture_session(c)?;
    let png = render_capture_bytes(&ckpt, &session, &spec, c.max_radius_px, &tiles)?;
    write_bytes(&c.out, &png)?;
    let provenance = Provenance {
        checkpoint_id: ckpt.id.clone(),
        session_id: session.meta.id.clone(),
        spec,
        max_radius_px: c.max_radius_px,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    let sidecar = c.out.with_extension("json");
    write_bytes(&sidecar, &serde_json::to_vec_pretty(&provenance).map_err(Error::from)?)?;
    let _ = writeln!(out, "{}", c.out.display());
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs, err: &mut dyn Write) -> std::result::Result<(), CliError> {
    let cfg = ServiceConfig {
        ckpt: a.ckpt.clone(),
        store: a.store.clone(),
        port: a.port,
        workers: a.workers,
        tiles: a.tiles.tiles(),
    };
    cfg.tiles.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let id = cfg.ckpt.as_deref().map(checkpoint::load).transpose()?.map(|c| c.id);
    emit(err, header(cli, id)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io_err("tokio runtime"))?;
    rt.block_on(service::serve(&cfg))?;
    Ok(())
}

fn inspect(cli: &Cli, a: &InspectArgs, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), CliError> {
    let p = &a.path;
    let (checkpoint, value) = if p.is_file() {
        let ck = checkpoint::load(p)?;
        let v = serde_json::json!({
            "kind": "checkpoint",
            "id": ck.id,
            "model": ck.model.config(),
            "parameters": ck.model.params().count(),
            "meta": ck.meta,
        });
        (Some(ck.id), v)
    } else if p.join("meta.json").is_file() {
        let meta = dataset::read_meta(p)?;
        (None, serde_json::json!({"kind": "scene", "meta": meta}))
    } else if p.join("session.json").is_file() {
        let path = p.join("session.json");
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).map_err(io_err(&path))?).map_err(Error::from)?;
        (None, serde_json::json!({"kind": "session", "meta": v}))
    } else {
        return Err(CliError::Usage(format!(
            "{} is not a checkpoint, scene or session",
            p.display()
        )));
    };
    emit(err, header(cli, checkpoint)?);
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&value).map_err(Error::from)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<OsString> {
        s.split_whitespace().map(OsString::from).collect()
    }

    #[test]
    fn config_file_fills_only_missing_flags() {
        let cfg = serde_json::json!({"scenes": 5, "slices": 4, "out": "x", "color_jitter": 0.1, "verbose": true});
        let argv = apply_config_file(args("dc2 gen-data --slices 3"), &cfg).unwrap();
        let cli = Cli::try_parse_from(argv).unwrap();
        assert!(cli.verbose);
        match cli.command {
            Command::GenData(a) => {
                assert_eq!((a.scenes, a.slices), (5, 3));
                assert_eq!(a.out, PathBuf::from("x"));
                assert_eq!(a.color_jitter, 0.1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_file_array_values() {
        let cfg = serde_json::json!({"point": [3, 4]});
        let argv = apply_config_file(
            args("dc2 effect tiltshift --slope 0.1 --ckpt c --w w --uw u --out o"),
            &cfg,
        )
        .unwrap();
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Effect(EffectArgs {
                effect: Effect::Tiltshift { point, .. },
            }) => assert_eq!(point, Some(vec![3.0, 4.0])),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn usage_errors_exit_with_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(args("dc2 gen-data --bogus"), &mut o, &mut e), 1);
        assert_eq!(run(args("dc2"), &mut o, &mut e), 1);
        assert_eq!(run(args("dc2 --help"), &mut o, &mut e), 0);
    }

    #[test]
    fn runtime_errors_exit_with_two() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(args("dc2 inspect /nonexistent/ckpt.bin"), &mut o, &mut e), 1);
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"nope").unwrap();
        let argv = vec!["dc2".into(), "inspect".into(), bad.into_os_string()];
        assert_eq!(run(argv, &mut o, &mut e), 2);
    }
}
