//! Offline runs: a fixed number of ticks, an optional command script and a
//! digest log. Used for determinism checks and unattended renders.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use prompttank_core::control::state_view;
use prompttank_core::engine::Command;
use prompttank_core::Engine;
use serde::Deserialize;
use tracing::{info, warn};

use crate::Args;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptEntry {
    /// Tick before which the command is queued.
    frame: u64,
    command: Command,
}

fn load_script(args: &Args) -> Result<Vec<ScriptEntry>> {
    let Some(path) = &args.script else {
        return Ok(Vec::new());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut entries: Vec<ScriptEntry> =
        serde_json::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?;
    entries.sort_by_key(|e| e.frame);
    Ok(entries)
}

pub fn run(mut engine: Engine, ticks: u64, args: &Args) -> Result<()> {
    let script = load_script(args)?;
    if let Some(late) = script.iter().find(|e| e.frame >= ticks) {
        warn!(frame = late.frame, "script entries past the last tick are ignored");
    }
    let mut log = match &args.digest_log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let handle = engine.handle();
    let rejected = Arc::new(AtomicUsize::new(0));
    let mut pending = script.into_iter().peekable();
    let origin = Instant::now();
    let mut virtual_t = 0.0;

    for tick in 0..ticks {
        while let Some(entry) = pending.next_if(|e| e.frame == tick) {
            let rejected = rejected.clone();
            handle.submit(
                entry.command,
                Some(Box::new(move |r| {
                    if let Err(e) = r {
                        rejected.fetch_add(1, Ordering::Relaxed);
                        warn!(code = e.code, "script command rejected: {}", e.message);
                    }
                })),
            );
        }
        let period = 1.0 / engine.target_fps();
        let started = Instant::now();
        let t = if args.virtual_clock {
            virtual_t
        } else {
            started.duration_since(origin).as_secs_f64()
        };
        let before = engine.frame_index();
        let frame = engine.tick(t);
        if let Some(log) = &mut log {
            match frame {
                Some(f) => writeln!(log, "{} {}", f.frame_index, f.request_digest)?,
                None if engine.frame_index() > before => writeln!(log, "{before} skipped")?,
                None => {}
            }
        }
        if args.virtual_clock {
            virtual_t += period;
        } else if let Some(rest) = Duration::from_secs_f64(period).checked_sub(started.elapsed()) {
            std::thread::sleep(rest);
        }
    }
    if let Some(mut log) = log {
        log.flush()?;
    }

    let m = handle.metrics();
    info!(
        frames = m.frames_generated,
        skipped = m.skipped_frames,
        seconds = origin.elapsed().as_secs_f64(),
        "offline run finished"
    );
    if let Some(path) = &args.state_out {
        let view = state_view(&handle.published());
        let mut text = serde_json::to_string_pretty(&view)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let rejected = rejected.load(Ordering::Relaxed);
    if rejected > 0 {
        anyhow::bail!("{rejected} script command(s) were rejected");
    }
    Ok(())
}
