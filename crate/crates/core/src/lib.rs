//! Real-time prompt orchestration for live image-to-image generation.
//!
//! A tank holds prompt nodes whose canvas height sets their weight, a chain
//! of pixel adjustments applied to each input frame, and automation that
//! moves parameters over time. The [`engine`] turns that state into one
//! generation request per frame and hands it to a pluggable backend.

pub mod automation;
pub mod control;
pub mod engine;
pub mod par;
pub mod pixel;
pub mod preset;
pub mod prompt;
pub mod state;

pub use engine::{Engine, EngineConfig, EngineHandle};
pub use par::Parallelism;
pub use pixel::{Image, PixelChainParams};
pub use prompt::{NodeId, PromptNode, TankLayout, WeightedPrompt};
pub use state::TankState;
