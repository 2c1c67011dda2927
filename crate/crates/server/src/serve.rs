//! Websocket control surface and static UI serving.

use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use prompttank_core::control::{ControlSession, Outgoing, SessionConfig};
use prompttank_core::engine::{MetricsReport, Pacing, RunnerHandle};
use prompttank_core::{Engine, EngineHandle};
use tower_http::services::ServeDir;
use tracing::{debug, info, warn};

use crate::Args;

const PUMP_EVERY: Duration = Duration::from_millis(10);
const FPS_LOG_EVERY: Duration = Duration::from_secs(5);
const MAX_MESSAGE: usize = 1 << 20;

#[derive(Clone)]
struct App {
    handle: EngineHandle,
    session: SessionConfig,
}

fn router(app: App, ui_dir: Option<&std::path::Path>) -> Router {
    let router = Router::new()
        .route("/ws", get(upgrade))
        .route("/metrics", get(metrics))
        .with_state(app);
    match ui_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

async fn metrics(State(app): State<App>) -> Json<MetricsReport> {
    Json(app.handle.metrics())
}

async fn upgrade(State(app): State<App>, ws: WebSocketUpgrade) -> Response {
    ws.max_message_size(MAX_MESSAGE)
        .on_upgrade(move |socket| connection(socket, app))
}

async fn send_all(socket: &mut WebSocket, out: Vec<Outgoing>) -> bool {
    for o in out {
        let msg = match o {
            Outgoing::Text(t) => Message::Text(t),
            Outgoing::Binary(b) => Message::Binary(b),
        };
        if socket.send(msg).await.is_err() {
            return false;
        }
    }
    true
}

async fn connection(mut socket: WebSocket, app: App) {
    let mut session = ControlSession::new(app.handle, app.session);
    let mut pump = tokio::time::interval(PUMP_EVERY);
    pump.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    debug!("client connected");
    loop {
        let out = tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(t))) => session.handle_text(&t),
                Some(Ok(Message::Binary(_))) => session.handle_text("binary messages are not accepted"),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
            _ = pump.tick() => session.pump(),
        };
        if !send_all(&mut socket, out).await {
            break;
        }
    }
    debug!("client disconnected");
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

async fn log_fps(handle: EngineHandle) {
    let mut every = tokio::time::interval(FPS_LOG_EVERY);
    every.tick().await;
    loop {
        every.tick().await;
        let m = handle.metrics();
        info!(
            fps = round2(m.measured_fps),
            target = m.target_fps,
            frames = m.frames_generated,
            skipped = m.skipped_frames,
            p50_ms = round2(m.latency_ms_p50),
            clients = m.subscribers,
            degraded = m.backend_degraded,
        );
    }
}

pub fn run(engine: Engine, args: &Args) -> Result<()> {
    let handle = engine.handle();
    let runner = RunnerHandle::spawn(engine, Pacing::RealTime, None);
    let token = std::env::var("PROMPTTANK_TOKEN").ok().filter(|t| !t.is_empty());
    if token.is_none() {
        warn!("PROMPTTANK_TOKEN is unset; any client may connect");
    }
    let app = App {
        handle: handle.clone(),
        session: SessionConfig {
            token,
            jpeg_quality: args.jpeg_quality,
            ..SessionConfig::default()
        },
    };
    let ui_dir = (!args.headless).then_some(args.ui_dir.as_path());
    if let Some(dir) = ui_dir {
        if !dir.is_dir() {
            warn!(dir = %dir.display(), "UI directory not found; only the control socket is useful");
        }
    }
    let router = router(app, ui_dir);

    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.listen)
            .await
            .with_context(|| format!("binding {}", args.listen))?;
        let addr = listener.local_addr()?;
        // Tests and scripts read this line to find an ephemeral port.
        println!("listening on {addr}");
        info!(%addr, headless = args.headless, "serving");
        tokio::spawn(log_fps(handle));
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                info!("shutting down");
            })
            .await
            .context("serving")
    });
    runner.stop();
    served
}
