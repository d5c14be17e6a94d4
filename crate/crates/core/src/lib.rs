//! Self-training domain adaptation for semantic segmentation under adverse
//! scenes: a chain-of-domain curriculum, severity-routed visual prompts and
//! adapters, and the minimal tensor engine and synthetic benchmark they run on.

pub mod config;
pub mod engine;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod params;
pub mod rng;
pub mod run;
pub mod savpt;
pub mod scenegen;
pub mod scheduler;
pub mod segnet;
pub mod severity;
pub mod tensor;
