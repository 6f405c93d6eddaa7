//! Run-wide settings file with environment overrides.
//!
//! Overrides use `CLUESEEK_<SECTION>_<FIELD>`, e.g. `CLUESEEK_QUOTA_FINE=8192`
//! or `CLUESEEK_EPISODE_ON_LIMIT=terminate`. Values are read as JSON first and
//! fall back to a plain string.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::grpo::LimitsConfig;
use crate::protocol::LimitPolicy;
use crate::quota::QuotaConfig;
use crate::reward::RewardConfig;
use crate::rollout::{EpisodeConfig, EVAL_TURN_LIMIT};
use crate::tool::{Visibility, DEFAULT_SUBTLE_VISIBILITY_TOKENS};

pub const ENV_PREFIX: &str = "CLUESEEK_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    pub turn_limit: u32,
    pub on_limit: LimitPolicy,
    pub seed: u64,
    pub subtle_visibility_tokens: u64,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        EpisodeSettings {
            turn_limit: EVAL_TURN_LIMIT,
            on_limit: LimitPolicy::ForceAnswer,
            seed: 0,
            subtle_visibility_tokens: DEFAULT_SUBTLE_VISIBILITY_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub quota: QuotaConfig,
    pub reward: RewardConfig,
    pub limits: LimitsConfig,
    pub episode: EpisodeSettings,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown override {0}")]
    UnknownOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl GlobalConfig {
    pub fn parse(doc: &str) -> Result<Self, ConfigError> {
        let cfg: GlobalConfig = serde_json::from_str(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.quota.validate().map_err(|e| invalid(&e))?;
        self.reward.validate().map_err(|e| invalid(&e))?;
        self.limits.validate().map_err(|e| invalid(&e))?;
        if self.episode.turn_limit == 0 {
            return Err(ConfigError::Invalid("episode.turn_limit must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies `CLUESEEK_*` overrides from `vars`; other variables are ignored.
    pub fn with_overrides<I, K, V>(self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc = serde_json::to_value(&self)?;
        let mut touched = false;
        for (key, raw) in vars {
            let Some(rest) = key.as_ref().strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let (section, field) = rest.split_once('_').ok_or_else(|| ConfigError::UnknownOverride(key.as_ref().into()))?;
            let slot = doc
                .get_mut(section)
                .and_then(|s| s.get_mut(field))
                .ok_or_else(|| ConfigError::UnknownOverride(key.as_ref().into()))?;
            *slot = serde_json::from_str(raw.as_ref()).unwrap_or_else(|_| Value::String(raw.as_ref().to_string()));
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        let cfg: GlobalConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_env(self) -> Result<Self, ConfigError> {
        self.with_overrides(std::env::vars())
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            turn_limit: self.episode.turn_limit,
            on_limit: self.episode.on_limit,
            quota: self.quota.clone(),
            reward: self.reward.clone(),
            visibility: Visibility { subtle_min_tokens_per_frame: self.episode.subtle_visibility_tokens },
            seed: self.episode.seed,
        }
    }

    /// Training episodes: the turn limit from `limits.c_turn`, over-turn ends the episode.
    pub fn train_episode_config(&self) -> EpisodeConfig {
        EpisodeConfig { turn_limit: self.limits.c_turn, on_limit: LimitPolicy::Terminate, ..self.episode_config() }
    }
}
