use std::io::Read;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::Serialize;

use super::backend::{BackendError, Capabilities, GeneratorBackend};
use super::request::GenerationRequest;
use crate::pixel::Image;
use crate::prompt::WeightedPrompt;

const MAX_RESPONSE_BYTES: u64 = 64 << 20;

/// JSON body POSTed to the endpoint once per frame. The reply must be a
/// PNG (or JPEG) of the same size.
#[derive(Debug, Serialize)]
pub struct RemoteRequestBody<'a> {
    /// Base64 PNG of the post-processed input frame.
    pub image: String,
    /// Serialised weighted prompt, `(text:1.00), (other:0.50)`.
    pub prompt: String,
    pub prompts: &'a [WeightedPrompt],
    pub strength: f64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

/// Calls an HTTP image-to-image service.
pub struct RemoteBackend {
    endpoint: String,
    timeout: Duration,
    fixed_timeout: bool,
    agent: ureq::Agent,
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

impl RemoteBackend {
    /// With `timeout` unset the timeout tracks twice the frame period.
    pub fn new(endpoint: impl Into<String>, timeout: Option<Duration>, frame_period: Duration) -> Self {
        let fixed_timeout = timeout.is_some();
        let timeout = timeout.unwrap_or(frame_period * 2);
        RemoteBackend {
            endpoint: endpoint.into(),
            timeout,
            fixed_timeout,
            agent: agent(timeout),
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }
}

fn is_timeout(err: &ureq::Transport) -> bool {
    let mut source = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            return matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock);
        }
        source = e.source();
    }
    false
}

impl GeneratorBackend for RemoteBackend {
    fn generate(&mut self, req: &GenerationRequest) -> Result<Image, BackendError> {
        let png = req
            .image
            .encode_png()
            .map_err(|e| BackendError::Decode(e.to_string()))?;
        let body = RemoteRequestBody {
            image: BASE64.encode(png),
            prompt: req.prompt_string(),
            prompts: &req.prompts,
            strength: req.strength,
            seed: req.seed,
            width: req.image.width(),
            height: req.image.height(),
        };
        let body = serde_json::to_string(&body).map_err(|e| BackendError::Transport(e.to_string()))?;
        let started = Instant::now();
        let resp = match self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json")
            .send_string(&body)
        {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => return Err(BackendError::Status(code)),
            Err(ureq::Error::Transport(t)) => {
                if is_timeout(&t) || started.elapsed() >= self.timeout {
                    return Err(BackendError::Timeout(self.timeout));
                }
                return Err(BackendError::Transport(t.to_string()));
            }
        };
        let mut bytes = Vec::new();
        if let Err(e) = resp.into_reader().take(MAX_RESPONSE_BYTES).read_to_end(&mut bytes) {
            return Err(match e.kind() {
                std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => BackendError::Timeout(self.timeout),
                _ => BackendError::Transport(e.to_string()),
            });
        }
        let img = Image::decode(&bytes).map_err(|e| BackendError::Decode(e.to_string()))?;
        if img.dimensions() != req.image.dimensions() {
            return Err(BackendError::Decode(format!(
                "expected {}x{}, got {}x{}",
                req.image.width(),
                req.image.height(),
                img.width(),
                img.height()
            )));
        }
        Ok(img)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            name: format!("remote {}", self.endpoint),
            max_width: 2048,
            max_height: 2048,
            native_weighted_prompts: false,
            deterministic: false,
        }
    }

    fn set_frame_period(&mut self, period: Duration) {
        if !self.fixed_timeout {
            self.timeout = period * 2;
            self.agent = agent(self.timeout);
        }
    }
}
