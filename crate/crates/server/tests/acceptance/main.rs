//! Acceptance gate. Every headline criterion runs in turn and prints one
//! PASS or FAIL line; any failure makes the target fail.

mod proc;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use prompttank_core::automation::{
    count_figures, crossfade_weights, pluralise_text, AutopilotConfig, Crossfade, ExternalSignalMap, Lfo, ParamPath,
    PluraliserConfig,
};
use prompttank_core::control::{apply_delta, FrameHeader};
use prompttank_core::engine::source::silhouette_fixture;
use prompttank_core::pixel::{
    apply_brightness, apply_chain_with, apply_colourise, apply_contrast, apply_gamma, apply_noise, apply_salford,
    noise_cell, AdjustmentId, PixelParam,
};
use prompttank_core::preset::{load_preset, save_preset, TankPreset};
use prompttank_core::prompt::{weight_for_position, ModelParams, Position};
use prompttank_core::state::NewNode;
use prompttank_core::{Image, NodeId, Parallelism, PixelChainParams, TankLayout, TankState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use proc::{run_offline, Client, Msg, Server};

type Check = fn() -> Result<String, String>;

const CHECKS: [(&str, Check); 9] = [
    ("frame_rate_discipline", frame_rate),
    ("stateless_determinism", determinism),
    ("crossfade_conservation", crossfade_conservation),
    ("pixel_chain_identity", pixel_identity),
    ("pixel_chain_formula_oracle", pixel_oracle),
    ("pluraliser", pluraliser),
    ("weight_golden_table", weight_golden),
    ("preset_round_trip", preset_round_trip),
    ("protocol_replay", protocol_replay),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in CHECKS {
            println!("{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Image {
    let data = (0..w * h * 3).map(|_| rng.gen::<f32>()).collect();
    Image::new(w, h, data).unwrap()
}

// ---------------------------------------------------------------------------
// Frame rate

fn frame_rate() -> Result<String, String> {
    let server = Server::spawn(
        &["--headless", "--backend", "mock", "--source", "synthetic", "--resolution", "512x512", "--fps", "12"],
        None,
    )?;

    // A subscriber that takes one message per second.
    let addr = server.addr.clone();
    let slow = thread::spawn(move || -> Result<Vec<u32>, String> {
        let (mut c, _) = Client::connect(&addr, true, None)?;
        let mut seen = Vec::new();
        let until = Instant::now() + Duration::from_secs(13);
        while Instant::now() < until {
            if let Some(Msg::Binary(b)) = c.recv() {
                let (h, payload) = FrameHeader::parse(&b).ok_or("bad frame header")?;
                let img = Image::decode(payload).map_err(|e| e.to_string())?;
                if img.dimensions() != (h.width, h.height) {
                    return Err("header dimensions disagree with payload".into());
                }
                seen.push(h.frame_index);
            }
            thread::sleep(Duration::from_secs(1));
        }
        Ok(seen)
    });

    let (mut probe, _) = Client::connect(&server.addr, false, None)?;
    thread::sleep(Duration::from_secs(2));
    let rss0 = server.rss_kib();
    let m0 = probe.frame_meta(1)?;
    let t0 = m0["timestamp"].as_f64().ok_or("meta without timestamp")?;
    thread::sleep(Duration::from_secs(10));
    // Timestamps move in whole ticks, so keep sampling until the window
    // really spans 10 s.
    let mut seq = 2;
    let m1 = loop {
        let m = probe.frame_meta(seq)?;
        seq += 1;
        if m["timestamp"].as_f64().is_some_and(|t| t - t0 >= 10.0) || seq > 40 {
            break m;
        }
        thread::sleep(Duration::from_millis(25));
    };
    let rss1 = server.rss_kib();
    probe.send(json!({"kind": "metrics", "seq": 1000}));
    let metrics = probe.expect(|v| v["seq"] == 1000, Duration::from_secs(5))?;
    let seen = slow.join().map_err(|_| "slow subscriber panicked")??;

    let frames = m1["frame_index"].as_u64().unwrap() - m0["frame_index"].as_u64().unwrap();
    let span = m1["timestamp"].as_f64().unwrap() - m0["timestamp"].as_f64().unwrap();
    let fps = frames as f64 / span;
    let target = metrics["payload"]["target_fps"].as_f64().unwrap_or(f64::NAN);
    ensure(span >= 10.0, || format!("window only {span:.2}s"))?;
    ensure((11.0..=12.0).contains(&fps), || format!("{fps:.3} fps over {span:.2}s"))?;
    ensure(target == 12.0, || format!("metrics target {target}"))?;
    ensure(metrics["payload"]["skipped_frames"] == 0, || format!("skipped frames: {metrics}"))?;
    ensure(seen.windows(2).all(|w| w[0] < w[1]), || format!("slow subscriber saw {seen:?}"))?;
    ensure(seen.len() >= 5, || format!("slow subscriber got only {} frames", seen.len()))?;
    let growth = match (rss0, rss1) {
        (Some(a), Some(b)) => b.saturating_sub(a),
        _ => return Err("could not read server RSS".into()),
    };
    ensure(growth < 32 * 1024, || format!("server RSS grew {growth} KiB with a slow subscriber"))?;
    Ok(format!(
        "{fps:.3} fps over {span:.2}s at 512x512, slow subscriber got {} frames, RSS growth {growth} KiB",
        seen.len()
    ))
}

// ---------------------------------------------------------------------------
// Determinism

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let script = json!([
        {"frame": 0, "command": {"op": "create_node", "text": "priests", "x": 0.3, "y": 0.05}},
        {"frame": 0, "command": {"op": "create_node", "text": "folded paper", "x": 0.6, "y": 0.2}},
        {"frame": 0, "command": {"op": "create_node", "kind": "adjustment", "adjustment": "noise", "x": 0.1, "y": 0.25}},
        {"frame": 0, "command": {"op": "set_model_params", "strength": 0.6, "seed": 99}},
        {"frame": 0, "command": {"op": "set_pluraliser", "enabled": true}},
        {"frame": 0, "command": {"op": "set_pluralise", "node_id": 1, "enabled": true}},
        {"frame": 30, "command": {"op": "move_node", "node_id": 2, "x": 0.6, "y": 0.1}},
        {"frame": 60, "command": {"op": "set_pixel_param", "param": "contrast", "value": 1.4}},
        {"frame": 80, "command": {"op": "set_model_params", "seed": 7}}
    ]);
    let script_path = dir.path().join("script.json");
    fs::write(&script_path, script.to_string()).map_err(|e| e.to_string())?;
    let run = |name: &str, extra: &[&str]| -> Result<String, String> {
        let log = dir.path().join(name);
        let mut args = vec![
            "--frames", "100", "--virtual-clock", "--source", "synthetic:3", "--source-seed", "11",
            "--resolution", "256x256", "--script", script_path.to_str().unwrap(), "--digest-log",
            log.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        run_offline(&args, dir.path())?;
        fs::read_to_string(&log).map_err(|e| e.to_string())
    };
    let a = run("a.log", &[])?;
    let b = run("b.log", &[])?;
    let seq = run("seq.log", &["--sequential"])?;

    let lines: Vec<&str> = a.lines().collect();
    ensure(lines.len() == 100, || format!("{} digest lines", lines.len()))?;
    ensure(!a.contains("skipped"), || "a frame was skipped".into())?;
    ensure(a == b, || "digests differ between two process runs".into())?;
    ensure(a == seq, || "sequential and parallel runs differ".into())?;
    let distinct: std::collections::BTreeSet<&str> = lines.iter().map(|l| l.split(' ').nth(1).unwrap()).collect();
    ensure(distinct.len() > 50, || format!("only {} distinct digests", distinct.len()))?;
    Ok(format!(
        "100 digests byte-identical over 2 runs plus a sequential run, {} distinct",
        distinct.len()
    ))
}

// ---------------------------------------------------------------------------
// Crossfades

fn crossfade_conservation() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for i in 0..1000 {
        let base = match i {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..2.0),
        };
        let duration = rng.gen_range(0.01..30.0);
        let start = rng.gen_range(-100.0..100.0);
        let t = start + rng.gen_range(-0.5..1.5) * duration;
        let cf = Crossfade::new(NodeId(1), "old", "new", start, duration, base).map_err(|e| e.to_string())?;

        let (old, new) = crossfade_weights(&cf, t);
        ensure(old + new == base, || format!("case {i}: {old} + {new} != {base}"))?;
        ensure(old >= 0.0 && new >= 0.0, || format!("case {i}: negative share"))?;
        // Linear ramp, independently evaluated.
        let p = ((t - start) / duration).clamp(0.0, 1.0);
        ensure((new - p * base).abs() <= 1e-12, || format!("case {i}: new {new} vs ramp {}", p * base))?;

        ensure(crossfade_weights(&cf, start) == (base, 0.0), || format!("case {i}: start"))?;
        ensure(crossfade_weights(&cf, start + duration) == (0.0, base), || format!("case {i}: end"))?;
        let (mo, mn) = crossfade_weights(&cf, start + duration / 2.0);
        ensure(
            (mo - base / 2.0).abs() <= 1e-12 && (mn - base / 2.0).abs() <= 1e-12,
            || format!("case {i}: midpoint ({mo}, {mn}) for base {base}"),
        )?;
    }
    Ok("1000 samples: old+new == base exactly, endpoints exact, midpoint within 1e-12".into())
}

// ---------------------------------------------------------------------------
// Pixel chain

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}

fn pixel_identity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let neutral = PixelChainParams::default();
    let mut images = 0;
    for i in 0..40 {
        let (w, h) = (rng.gen_range(1..64), rng.gen_range(1..64));
        let img = random_image(&mut rng, w, h);
        for mode in [Parallelism::Sequential, Parallelism::Parallel] {
            let out = apply_chain_with(&img, &neutral, mode).map_err(|e| e.to_string())?;
            ensure(out == img, || format!("image {i}: neutral chain changed pixels ({mode:?})"))?;
        }
        let stages = [
            ("brightness", apply_brightness(&img, 0.0)),
            ("contrast", apply_contrast(&img, 1.0)),
            ("gamma", apply_gamma(&img, 1.0)),
            ("colourise", apply_colourise(&img, 0.0, [0.3, 0.6, 0.9])),
            ("noise", apply_noise(&img, 0.0, 3, 17)),
            ("salford", apply_salford(&img, 0.0, &neutral)),
        ];
        for (stage, out) in stages {
            let err = max_abs_diff(&out, &img);
            ensure(err == 0.0, || format!("image {i}: neutral {stage} error {err}"))?;
        }

        // Through 8-bit storage.
        let rgb8 = img.to_rgb8();
        let stored = Image::from_rgb8(&rgb8);
        let out = apply_chain_with(&stored, &neutral, Parallelism::Parallel).map_err(|e| e.to_string())?;
        let worst = out
            .to_rgb8()
            .as_raw()
            .iter()
            .zip(rgb8.as_raw())
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0);
        ensure(worst <= 1, || format!("image {i}: 8-bit error {worst}/255"))?;
        images += 1;
    }
    Ok(format!(
        "{images} random images: float error 0 for the chain and each neutral stage, 8-bit error <= 1/255"
    ))
}

// Scalar reference for each stage.
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn ref_luma(c: [f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

fn ref_salford(v: [f64; 3], mix: f64, p: &PixelChainParams) -> [f64; 3] {
    let s: [f64; 3] = std::array::from_fn(|i| clamp01((1.0 - v[i] - 0.5) * p.salford_contrast + 0.5));
    let s = if ref_luma(s) > p.salford_threshold {
        let k = p.salford_tint_strength;
        std::array::from_fn(|i| (1.0 - k) * s[i] + k * p.salford_tint[i])
    } else {
        s
    };
    std::array::from_fn(|i| clamp01((1.0 - mix) * v[i] + mix * s[i]))
}

fn pixel_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tol = 1e-6;
    let mut worst = 0.0f64;
    let stages = ["brightness", "contrast", "gamma", "colourise", "noise", "salford"];
    for stage in stages {
        for case in 0..50 {
            let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));
            let img = random_image(&mut rng, w, h);
            let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
            let px = img.pixel(x, y).map(f64::from);
            let tint = [rng.gen::<f64>(), rng.gen(), rng.gen()];
            let (out, want): (Image, [f64; 3]) = match stage {
                "brightness" => {
                    let b = rng.gen_range(-1.0..=1.0);
                    (apply_brightness(&img, b), px.map(|v| clamp01(v + b)))
                }
                "contrast" => {
                    let c = rng.gen_range(0.0..=4.0);
                    (apply_contrast(&img, c), px.map(|v| clamp01((v - 0.5) * c + 0.5)))
                }
                "gamma" => {
                    let g = rng.gen_range(0.2..=5.0);
                    (apply_gamma(&img, g), px.map(|v| v.powf(g)))
                }
                "colourise" => {
                    let a = rng.gen_range(0.0..=1.0);
                    let l = ref_luma(px);
                    let want = std::array::from_fn(|i| clamp01((1.0 - a) * px[i] + a * l * tint[i]));
                    (apply_colourise(&img, a, tint), want)
                }
                "noise" => {
                    let gain = rng.gen_range(0.0..=1.0);
                    let scale = rng.gen_range(1..9);
                    let seed = rng.gen();
                    let n = noise_cell(seed, x / scale, y / scale);
                    (apply_noise(&img, gain, scale, seed), px.map(|v| clamp01(v + gain * (n - 0.5))))
                }
                _ => {
                    let mix = rng.gen_range(0.0..=1.0);
                    let p = PixelChainParams {
                        salford_contrast: rng.gen_range(0.0..=4.0),
                        salford_threshold: rng.gen_range(0.0..=1.0),
                        salford_tint: tint,
                        salford_tint_strength: rng.gen_range(0.0..=1.0),
                        ..PixelChainParams::default()
                    };
                    (apply_salford(&img, mix, &p), ref_salford(px, mix, &p))
                }
            };
            let got = out.pixel(x, y);
            for i in 0..3 {
                let err = (f64::from(got[i]) - want[i]).abs();
                worst = worst.max(err);
                ensure(err <= tol, || {
                    format!("{stage} case {case}: channel {i} got {} want {} (pixel {px:?})", got[i], want[i])
                })?;
            }
        }
    }
    // Stage order is observable: brightness runs before contrast.
    let p = PixelChainParams {
        brightness: 0.5,
        contrast: 2.0,
        ..PixelChainParams::default()
    };
    let out = apply_chain_with(&Image::filled(1, 1, [0.4; 3]), &p, Parallelism::Sequential).unwrap();
    ensure(out.pixel(0, 0) == [1.0; 3], || format!("order check gave {:?}", out.pixel(0, 0)))?;
    Ok(format!("6 stages x 50 cases agree with the scalar reference, worst error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Pluraliser

/// Breadth-first flood fill over 4-neighbours.
fn flood_fill_count(img: &Image, cfg: &PluraliserConfig) -> usize {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let dark = |x: i64, y: i64| {
        let p = img.pixel(x as u32, y as u32).map(f64::from);
        ref_luma(p) < cfg.threshold
    };
    let mut seen = vec![false; (w * h) as usize];
    let mut count = 0;
    for sy in 0..h {
        for sx in 0..w {
            if seen[(sy * w + sx) as usize] || !dark(sx, sy) {
                continue;
            }
            let mut area = 0usize;
            let mut queue = VecDeque::from([(sx, sy)]);
            seen[(sy * w + sx) as usize] = true;
            while let Some((x, y)) = queue.pop_front() {
                area += 1;
                for (nx, ny) in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let k = (ny * w + nx) as usize;
                    if !seen[k] && dark(nx, ny) {
                        seen[k] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            if area as f64 >= cfg.min_area_fraction * (w * h) as f64 {
                count += 1;
            }
        }
    }
    count
}

fn pluraliser() -> Result<String, String> {
    let cfg = PluraliserConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200u64 {
        let k = (i % 6) as usize;
        let (w, h) = (rng.gen_range(96..=160), rng.gen_range(96..=160));
        let img = silhouette_fixture(w, h, k, rng.gen());
        let got = count_figures(&img, &cfg);
        let oracle = flood_fill_count(&img, &cfg);
        ensure(got == k && oracle == k, || {
            format!("image {i} ({w}x{h}): k={k}, count_figures={got}, flood fill={oracle}")
        })?;
    }
    let text = pluralise_text("priests", 2, &cfg);
    ensure(text == "two priests", || format!("got {text:?}"))?;
    Ok("200 fixtures with k in 0..=5 counted exactly and match flood fill; (\"priests\", 2) -> \"two priests\"".into())
}

// ---------------------------------------------------------------------------
// Weight mapping

fn weight_golden() -> Result<String, String> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/weight_golden.json");
    let golden: Value = serde_json::from_str(&fs::read_to_string(path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let layout: TankLayout = serde_json::from_value(golden["layout"].clone()).map_err(|e| e.to_string())?;
    ensure(layout == TankLayout::new(1.0 / 3.0, 1.0).unwrap(), || format!("fixture layout {layout:?}"))?;
    let expected = [
        (0.0, 1.0),
        (1.0 / 12.0, 0.75),
        (1.0 / 6.0, 0.5),
        (0.25, 0.25),
        (1.0 / 3.0, 0.0),
        (0.5, 0.0),
        (1.0, 0.0),
    ];
    let rows = golden["rows"].as_array().ok_or("fixture has no rows")?;
    ensure(rows.len() == expected.len(), || "fixture row count".into())?;
    for (row, (y, w)) in rows.iter().zip(expected) {
        ensure(row["y"].as_f64() == Some(y) && row["weight"].as_f64() == Some(w), || {
            format!("fixture row {row} should be ({y}, {w})")
        })?;
        let got = weight_for_position(y, &layout);
        // Linear from full weight at the top to zero at the zone boundary.
        let formula = if y < 1.0 / 3.0 { 1.0 - 3.0 * y } else { 0.0 };
        ensure((got - w).abs() <= 1e-12 && (formula - w).abs() <= 1e-12, || {
            format!("y={y}: engine {got}, formula {formula}, table {w}")
        })?;
    }
    Ok("7 positions match the shared table within 1e-12".into())
}

// ---------------------------------------------------------------------------
// Presets

const WORDS: [&str; 10] = [
    "lighthouse", "folded paper", "priests", "woolen yarn", "storm", "glass", "elephant", "planet", "moth", "painting",
];

fn random_state(rng: &mut ChaCha8Rng) -> TankState {
    let mut s = TankState::default();
    let word = |rng: &mut ChaCha8Rng| WORDS[rng.gen_range(0..WORDS.len())].to_owned();
    let pos = |rng: &mut ChaCha8Rng| Some(Position::new(rng.gen(), rng.gen()));
    for _ in 0..rng.gen_range(0..8) {
        let playlist: Vec<String> = (0..rng.gen_range(0..4)).map(|_| word(rng)).collect();
        let what = if rng.gen_bool(0.3) {
            NewNode::Automated(word(rng))
        } else {
            NewNode::Text(word(rng))
        };
        let id = s.create_node(what, pos(rng), playlist).unwrap();
        if rng.gen_bool(0.3) {
            s.set_pluralise(id, true).unwrap();
        }
    }
    for adj in AdjustmentId::ALL {
        if rng.gen_bool(0.3) {
            s.create_node(NewNode::Adjustment(adj), pos(rng), vec![]).unwrap();
        }
    }
    let texts: Vec<NodeId> = s.nodes.iter().filter(|n| n.carries_text()).map(|n| n.id).collect();
    if texts.len() >= 2 && rng.gen_bool(0.5) {
        s.join(texts[0], texts[1]).unwrap();
    }
    let mut pixel = PixelChainParams::default();
    for p in PixelParam::ALL {
        if rng.gen_bool(0.5) {
            let (lo, hi) = p.range();
            p.set(&mut pixel, rng.gen_range(lo..=hi));
        }
    }
    pixel.noise_scale = rng.gen_range(1..16);
    pixel.noise_seed = rng.gen();
    pixel.colourise_tint = [rng.gen(), rng.gen(), rng.gen()];
    s.set_pixel(pixel).unwrap();
    s.set_layout(TankLayout::new(rng.gen_range(0.05..0.95), rng.gen_range(0.1..3.0)).unwrap())
        .unwrap();
    s.set_model(ModelParams {
        strength: rng.gen(),
        seed: rng.gen(),
    })
    .unwrap();
    let ids: Vec<NodeId> = s.nodes.iter().map(|n| n.id).collect();
    s.set_autopilot(AutopilotConfig {
        enabled: rng.gen(),
        period: rng.gen_range(1.0..60.0),
        crossfade_time: rng.gen_range(0.0..1.0),
        enrolled_nodes: ids.iter().copied().filter(|_| rng.gen_bool(0.5)).collect(),
    })
    .unwrap();
    for _ in 0..rng.gen_range(0..3) {
        let target = ParamPath::Pixel(PixelParam::ALL[rng.gen_range(0..PixelParam::ALL.len())]);
        s.add_lfo(Lfo {
            target,
            frequency: rng.gen_range(0.01..5.0),
            depth: rng.gen_range(0.0..1.0),
            base: rng.gen_range(-0.5..0.5),
            phase: rng.gen_range(0.0..6.0),
        })
        .unwrap();
    }
    if rng.gen_bool(0.5) {
        s.map_signal(ExternalSignalMap::new("piano", ParamPath::ModelStrength, rng.gen(), rng.gen()))
            .unwrap();
    }
    if let Some(&id) = ids.first() {
        if rng.gen_bool(0.3) {
            s.map_signal(ExternalSignalMap::new("mic", ParamPath::NodeWeight(id), 1.0, 0.0))
                .unwrap();
        }
    }
    s.set_pluraliser(PluraliserConfig {
        enabled: rng.gen(),
        threshold: rng.gen(),
        min_area_fraction: rng.gen_range(0.0..0.2),
        max_count_worded: rng.gen_range(2..20),
    })
    .unwrap();
    s
}

type Mutation = (&'static str, fn(&mut Value));

/// Swaps in a new node list and drops everything that referred to the old one.
fn replace_nodes(d: &mut Value, nodes: Value) {
    d["nodes"] = nodes;
    d["autopilot"]["enrolled_nodes"] = json!([]);
    d["signal_maps"] = json!([]);
    d["lfos"] = json!([]);
}

fn mutations() -> Vec<Mutation> {
    vec![
        ("format_version", |d| d["format_version"] = json!(99)),
        ("format_version", |d| d["format_version"] = json!("one")),
        ("layout", |d| d["layout"]["active_fraction"] = json!(0.0)),
        ("layout", |d| d["layout"]["max_weight"] = json!(-1.0)),
        ("layout", |d| d["layout"]["active_fraction"] = json!("third")),
        ("pixel_params", |d| d["pixel_params"]["brightness"] = json!(3.0)),
        ("pixel_params", |d| d["pixel_params"]["gamma"] = json!(0.1)),
        ("pixel_params", |d| d["pixel_params"]["noise_scale"] = json!(0)),
        ("pixel_params", |d| d["pixel_params"]["salford_tint"] = json!([0.1, 0.2])),
        ("model_params", |d| d["model_params"]["strength"] = json!(1.5)),
        ("model_params", |d| d["model_params"]["seed"] = json!(-4)),
        ("autopilot", |d| d["autopilot"]["period"] = json!(-5.0)),
        ("autopilot", |d| d["autopilot"]["crossfade_time"] = json!(-1.0)),
        ("pluraliser", |d| d["pluraliser"]["threshold"] = json!(2.0)),
        ("lfos", |d| d["lfos"] = json!([{"target": "pixel.wobble", "frequency": 1.0, "depth": 0.1}])),
        ("lfos", |d| d["lfos"] = json!([{"target": "pixel.gamma", "frequency": 0.0, "depth": 0.1}])),
        ("signal_maps", |d| {
            d["signal_maps"] = json!([{"signal_id": "", "target": "model.strength", "gain": 1.0}])
        }),
        ("nodes", |d| {
            replace_nodes(d, json!([{"id": 1, "kind": "text", "text": "", "position": {"x": 0.1, "y": 0.1}}]))
        }),
        ("nodes", |d| {
            replace_nodes(d, json!([{"id": 1, "kind": "text", "text": "a", "position": {"x": 0.1, "y": 1.5}}]))
        }),
        ("nodes", |d| {
            replace_nodes(d, json!([{"id": 1, "kind": "banana", "text": "a", "position": {"x": 0.1, "y": 0.1}}]))
        }),
        ("nodes", |d| {
            replace_nodes(d, json!([{"id": 1, "kind": "text", "text": "a", "position": "up"}]))
        }),
        ("nodes", |d| {
            replace_nodes(d, json!([
                {"id": 1, "kind": "text", "text": "a", "position": {"x": 0.1, "y": 0.1}},
                {"id": 1, "kind": "text", "text": "b", "position": {"x": 0.2, "y": 0.1}}
            ]))
        }),
    ]
}

fn preset_round_trip() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let state = random_state(&mut rng);
        let path = dir.path().join(format!("s{i}.tank"));
        save_preset(&TankPreset::from_state(&state, format!("state {i}")), &path).map_err(|e| e.to_string())?;
        let first = fs::read(&path).map_err(|e| e.to_string())?;
        let loaded = load_preset(&path).map_err(|e| format!("state {i}: {e}"))?;
        let restored = loaded.to_state().map_err(|e| format!("state {i}: {e}"))?;
        ensure(restored.nodes == state.nodes, || {
            format!("state {i}: nodes changed\n{:?}\n{:?}", restored.nodes, state.nodes)
        })?;
        ensure(restored.pixel == state.pixel && restored.lfos == state.lfos, || {
            format!("state {i}: parameters changed")
        })?;
        let again = dir.path().join(format!("s{i}-again.tank"));
        save_preset(&TankPreset::from_state(&restored, format!("state {i}")), &again).map_err(|e| e.to_string())?;
        let second = fs::read(&again).map_err(|e| e.to_string())?;
        ensure(first == second, || format!("state {i}: second save differs"))?;
    }

    let muts = mutations();
    let mut per_field: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..100 {
        let state = random_state(&mut rng);
        let doc = TankPreset::from_state(&state, "victim").to_document();
        let mut v: Value = serde_json::from_str(&doc).unwrap();
        let (field, mutate) = muts[i % muts.len()];
        mutate(&mut v);
        let text = serde_json::to_string_pretty(&v).unwrap();
        let result = TankPreset::from_document(&text).and_then(|p| p.to_state());
        let err = match result {
            Ok(_) => return Err(format!("mutation {i} ({field}) was accepted: {text}")),
            Err(e) => e,
        };
        let got = err.field().unwrap_or("");
        ensure(got.starts_with(field), || format!("mutation {i}: diagnostic names `{got}`, expected `{field}`: {err}"))?;
        *per_field.entry(field).or_default() += 1;
    }
    Ok(format!(
        "100 random states round-trip byte-identically; 100 invalid documents rejected with field paths across {} sections",
        per_field.len()
    ))
}

// ---------------------------------------------------------------------------
// Protocol replay

struct Replay {
    final_state: Value,
    digest: String,
    acks: usize,
    rejected: usize,
}

fn replay_once(script: &[Value]) -> Result<Replay, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let still = dir.path().join("still.png");
    silhouette_fixture(128, 96, 2, 5).save_png(&still).map_err(|e| e.to_string())?;
    let snaps = dir.path().join("snaps");
    let source = format!("still:{}", still.display());
    let server = Server::spawn(
        &[
            "--headless", "--source", &source, "--resolution", "128x96", "--preset-dir", dir.path().to_str().unwrap(),
            "--snapshot-dir", snaps.to_str().unwrap(),
        ],
        Some("replay-token"),
    )?;
    ensure(Client::connect(&server.addr, false, Some("wrong")).is_err(), || "bad token admitted".into())?;
    let (mut c, full) = Client::connect(&server.addr, false, Some("replay-token"))?;
    let Value::Object(mut view) = full["payload"].clone() else {
        return Err("state_full payload is not an object".into());
    };
    let mut delta_seq = full["seq"].as_u64().ok_or("state_full without seq")?;

    for (i, cmd) in script.iter().enumerate() {
        c.send(json!({"kind": "command", "seq": 1000 + i, "payload": cmd}));
    }
    let mut acks: BTreeMap<u64, Vec<Value>> = BTreeMap::new();
    let mut order = Vec::new();
    let mut absorb = |c: &mut Client, acks: &mut BTreeMap<u64, Vec<Value>>, view: &mut Map<String, Value>| {
        let mut err = None;
        while let Some(m) = c.recv() {
            let Msg::Text(v) = m else { continue };
            match v["kind"].as_str() {
                Some("command") => {
                    let seq = v["seq"].as_u64().unwrap_or(u64::MAX);
                    order.push(seq);
                    acks.entry(seq).or_default().push(v);
                }
                Some("state_delta") => {
                    let s = v["seq"].as_u64().unwrap_or(0);
                    if s != delta_seq + 1 && err.is_none() {
                        err = Some(format!("delta seq {s} after {delta_seq}"));
                    }
                    delta_seq = s;
                    apply_delta(view, &serde_json::from_value(v["payload"].clone()).unwrap());
                }
                _ => {}
            }
        }
        err
    };
    let deadline = Instant::now() + Duration::from_secs(20);
    while acks.len() < script.len() && Instant::now() < deadline {
        if let Some(e) = absorb(&mut c, &mut acks, &mut view) {
            return Err(e);
        }
    }
    // Let fades settle and further acks (which must not come) show up.
    let settle = Instant::now() + Duration::from_secs(10);
    loop {
        thread::sleep(Duration::from_millis(300));
        if let Some(e) = absorb(&mut c, &mut acks, &mut view) {
            return Err(e);
        }
        if view["crossfades"].as_array().is_some_and(|a| a.is_empty()) || Instant::now() > settle {
            break;
        }
    }
    thread::sleep(Duration::from_millis(300));
    if let Some(e) = absorb(&mut c, &mut acks, &mut view) {
        return Err(e);
    }

    ensure(acks.len() == script.len(), || format!("{} of {} commands acked", acks.len(), script.len()))?;
    for (seq, list) in &acks {
        ensure(list.len() == 1, || format!("command {seq} acked {} times", list.len()))?;
    }
    ensure(order.windows(2).all(|w| w[0] < w[1]), || format!("acks out of order: {order:?}"))?;

    c.send(json!({"kind": "state_full", "seq": 1}));
    let full = c.expect(|v| v["kind"] == "state_full", Duration::from_secs(5))?;
    ensure(full["seq"].as_u64() == Some(delta_seq), || "state_full seq disagrees with delta stream".into())?;
    ensure(full["payload"] == Value::Object(view.clone()), || {
        "delta reconstruction differs from state_full".into()
    })?;
    let meta = c.frame_meta(2)?;
    let rejected = acks.values().filter(|l| l[0]["payload"]["status"] == "rejected").count();
    Ok(Replay {
        final_state: full["payload"].clone(),
        digest: meta["request_digest"].as_str().unwrap_or_default().to_owned(),
        acks: acks.len(),
        rejected,
    })
}

fn protocol_replay() -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/replay_50.json");
    let script: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(script.len() == 50, || format!("script has {} commands", script.len()))?;
    let a = replay_once(&script)?;
    let b = replay_once(&script)?;
    ensure(a.final_state == b.final_state, || "final state_full differs between replays".into())?;
    ensure(!a.digest.is_empty() && a.digest == b.digest, || format!("digests {} vs {}", a.digest, b.digest))?;
    ensure(a.final_state["nodes"]["6"]["weight"].is_number(), || "joined node missing".into())?;
    // The script carries exactly ten commands that must be refused.
    ensure(a.rejected == 10 && b.rejected == 10, || format!("{} and {} rejections", a.rejected, b.rejected))?;
    Ok(format!(
        "2 replays of {} commands: identical state_full and digest {}..., each acked once ({} rejected), deltas rebuild state_full",
        a.acks,
        &a.digest[..12],
        a.rejected
    ))
}
