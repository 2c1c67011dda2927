//! Spawning the real binary and talking to it over a websocket.

use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

pub const BIN: &str = env!("CARGO_BIN_EXE_prompttank");

pub struct Server {
    child: Child,
    pub addr: String,
}

impl Server {
    pub fn spawn(args: &[&str], token: Option<&str>) -> Result<Server, String> {
        let mut cmd = Command::new(BIN);
        cmd.args(args)
            .args(["--listen", "127.0.0.1:0"])
            .env("RUST_LOG", "warn")
            .env_remove("PROMPTTANK_LISTEN")
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        match token {
            Some(t) => cmd.env("PROMPTTANK_TOKEN", t),
            None => cmd.env_remove("PROMPTTANK_TOKEN"),
        };
        let mut child = cmd.spawn().map_err(|e| format!("spawn: {e}"))?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().expect("piped"))
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| format!("unexpected first line {line:?}"))?
            .to_owned();
        Ok(Server { child, addr })
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Resident set size in KiB.
    pub fn rss_kib(&self) -> Option<u64> {
        let status = std::fs::read_to_string(format!("/proc/{}/status", self.pid())).ok()?;
        status
            .lines()
            .find_map(|l| l.strip_prefix("VmRSS:"))
            .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug)]
pub enum Msg {
    Text(Value),
    Binary(Vec<u8>),
}

pub struct Client {
    ws: WebSocket<TcpStream>,
}

impl Client {
    /// Connects and says hello. Returns the client and the initial
    /// `state_full` envelope.
    pub fn connect(addr: &str, frames: bool, token: Option<&str>) -> Result<(Client, Value), String> {
        let stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
        stream
            .set_read_timeout(Some(Duration::from_millis(100)))
            .map_err(|e| e.to_string())?;
        let (ws, _) =
            tungstenite::client(format!("ws://{addr}/ws"), stream).map_err(|e| e.to_string())?;
        let mut c = Client { ws };
        c.send(json!({"kind": "hello", "payload": {"frames": frames, "token": token}}));
        let hello = c.expect(|v| v["kind"] == "hello" || v["kind"] == "error", Duration::from_secs(5))?;
        if hello["kind"] != "hello" {
            return Err(format!("hello refused: {hello}"));
        }
        let full = c.expect(|v| v["kind"] == "state_full", Duration::from_secs(5))?;
        Ok((c, full))
    }

    pub fn send(&mut self, v: Value) {
        self.send_raw(v.to_string());
    }

    pub fn send_raw(&mut self, text: String) {
        self.ws.send(Message::text(text)).expect("websocket send");
    }

    /// Next message, or `None` if nothing arrives within the read timeout.
    pub fn recv(&mut self) -> Option<Msg> {
        loop {
            match self.ws.read() {
                Ok(Message::Text(t)) => return Some(Msg::Text(serde_json::from_str(&t).expect("server sends JSON"))),
                Ok(Message::Binary(b)) => return Some(Msg::Binary(b)),
                Ok(_) => continue,
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                {
                    return None
                }
                Err(e) => panic!("websocket read: {e}"),
            }
        }
    }

    /// Reads until a text message satisfies `pred`, discarding the rest.
    pub fn expect(&mut self, pred: impl Fn(&Value) -> bool, within: Duration) -> Result<Value, String> {
        let deadline = Instant::now() + within;
        while Instant::now() < deadline {
            if let Some(Msg::Text(v)) = self.recv() {
                if pred(&v) {
                    return Ok(v);
                }
            }
        }
        Err("timed out waiting for a message".into())
    }

    /// Asks for the current frame's metadata.
    pub fn frame_meta(&mut self, seq: u64) -> Result<Value, String> {
        self.send(json!({"kind": "frame", "seq": seq, "payload": {"meta": true}}));
        let v = self.expect(|v| v["seq"] == seq, Duration::from_secs(5))?;
        if v["kind"] == "frame" {
            Ok(v["payload"].clone())
        } else {
            Err(format!("no frame meta: {v}"))
        }
    }
}

/// Runs the binary to completion.
pub fn run_offline(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}
