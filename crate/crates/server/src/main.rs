mod batch;
mod serve;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use prompttank_core::engine::source::open_source;
use prompttank_core::engine::{check_fps, GeneratorBackend, MockBackend, RemoteBackend, MAX_FPS};
use prompttank_core::preset::load_preset;
use prompttank_core::{Engine, EngineConfig, Parallelism, TankState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Remote,
}

/// Live prompt mixing engine with a websocket control surface.
#[derive(Debug, Parser)]
#[command(name = "prompttank", version)]
struct Args {
    /// Preset to load at boot.
    #[arg(long)]
    preset: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    backend: BackendKind,

    /// Generation service URL, remote backend only.
    #[arg(long)]
    endpoint: Option<String>,

    /// Per-request timeout for the remote backend. Defaults to two frame periods.
    #[arg(long)]
    backend_timeout_ms: Option<u64>,

    /// still:<path>, dir:<path>, synthetic or synthetic:<figures>.
    #[arg(long, default_value = "synthetic")]
    source: String,

    /// Seed for the synthetic source.
    #[arg(long, default_value_t = 0)]
    source_seed: u64,

    #[arg(long, default_value = "512x512", value_parser = parse_resolution)]
    resolution: (u32, u32),

    /// Target frames per second.
    #[arg(long, default_value_t = 12.0)]
    fps: f64,

    #[arg(long, env = "PROMPTTANK_LISTEN", default_value = "127.0.0.1:8765")]
    listen: SocketAddr,

    /// Do not serve the UI bundle. The control socket stays up.
    #[arg(long)]
    headless: bool,

    /// Directory holding the built UI.
    #[arg(long, default_value = "ui/dist")]
    ui_dir: PathBuf,

    #[arg(long)]
    snapshot_dir: Option<PathBuf>,

    /// Seconds between automatic snapshots.
    #[arg(long)]
    snapshot_interval: Option<f64>,

    /// Root for preset paths named by clients. Defaults to the current directory.
    #[arg(long)]
    preset_dir: Option<PathBuf>,

    /// Quality of streamed preview frames.
    #[arg(long, default_value_t = 80, value_parser = clap::value_parser!(u8).range(1..=100))]
    jpeg_quality: u8,

    /// Run per-pixel work on one thread.
    #[arg(long)]
    sequential: bool,

    /// Run this many ticks offline and exit instead of serving.
    #[arg(long)]
    frames: Option<u64>,

    /// JSON list of {"frame": n, "command": {...}} applied during an offline run.
    #[arg(long, requires = "frames")]
    script: Option<PathBuf>,

    /// Write one "<frame_index> <digest>" line per frame of an offline run.
    #[arg(long, requires = "frames")]
    digest_log: Option<PathBuf>,

    /// Write the final state view of an offline run as JSON.
    #[arg(long, requires = "frames")]
    state_out: Option<PathBuf>,

    /// Tick n sees time n/fps and ticks run back to back.
    #[arg(long, requires = "frames")]
    virtual_clock: bool,
}

fn parse_resolution(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w: u32 = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    if w == 0 || h == 0 || w > 4096 || h > 4096 {
        return Err("each side must lie in 1..=4096".into());
    }
    Ok((w, h))
}

fn validate(args: &Args) -> Result<()> {
    if check_fps(args.fps).is_err() {
        bail!("--fps must lie in (0, {MAX_FPS}], got {}", args.fps);
    }
    match (args.backend, &args.endpoint) {
        (BackendKind::Mock, Some(_)) => bail!("--endpoint only applies to --backend remote"),
        (BackendKind::Remote, None) => bail!("--backend remote needs --endpoint"),
        _ => {}
    }
    if args.backend == BackendKind::Mock && args.backend_timeout_ms.is_some() {
        bail!("--backend-timeout-ms only applies to --backend remote");
    }
    if let Some(interval) = args.snapshot_interval {
        if args.snapshot_dir.is_none() {
            bail!("--snapshot-interval needs --snapshot-dir");
        }
        if !(interval > 0.0 && interval.is_finite()) {
            bail!("--snapshot-interval must be positive");
        }
    }
    Ok(())
}

fn build_engine(args: &Args) -> Result<Engine> {
    let state = match &args.preset {
        Some(path) => load_preset(path)
            .with_context(|| format!("loading preset {}", path.display()))?
            .to_state()
            .with_context(|| format!("preset {} is not a valid tank", path.display()))?,
        None => TankState::default(),
    };
    let source = open_source(&args.source, args.resolution, args.source_seed)
        .with_context(|| format!("opening source `{}`", args.source))?;
    let parallelism = if args.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let period = Duration::from_secs_f64(1.0 / args.fps);
    let backend: Box<dyn GeneratorBackend> = match args.backend {
        BackendKind::Mock => Box::new(MockBackend {
            parallelism,
            ..MockBackend::default()
        }),
        BackendKind::Remote => Box::new(RemoteBackend::new(
            args.endpoint.clone().expect("validated"),
            args.backend_timeout_ms.map(Duration::from_millis),
            period,
        )),
    };
    if let Some(dir) = &args.snapshot_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let config = EngineConfig {
        target_fps: args.fps,
        parallelism,
        snapshot_dir: args.snapshot_dir.clone(),
        snapshot_interval: args.snapshot_interval,
        preset_dir: args.preset_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    Engine::new(state, config, source, backend).map_err(|e| anyhow::anyhow!("{}: {}", e.code, e.message))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    let args = Args::parse();
    let result = validate(&args).and_then(|_| {
        let engine = build_engine(&args)?;
        match args.frames {
            Some(n) => batch::run(engine, n, &args),
            None => serve::run(engine, &args),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prompttank: {e:#}");
            ExitCode::from(2)
        }
    }
}
