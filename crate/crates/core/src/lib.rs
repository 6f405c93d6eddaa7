//! Runtime for interleaved video-crop tool use in long-video reasoning.
//!
//! The crate models videos as synthetic manifests and covers the whole loop
//! around a pluggable policy: parsing assistant messages into crop directives,
//! allocating visual-token quotas, building task-decoupled attention masks,
//! scoring trajectories, computing over-turn-masked group advantages, running
//! rollouts, and orchestrating the data-synthesis pipeline.

pub mod config;
pub mod datapipe;
pub mod grpo;
pub mod jsonl;
pub mod manifest;
pub mod protocol;
pub mod quota;
pub mod reward;
pub mod rollout;
pub mod tdam;
pub mod time;
pub mod tool;

pub use time::{Seconds, TimeInterval};
