//! Run configuration: a TOML file, overridden by `MIRO_*` environment
//! variables, overridden in turn by command-line flags.
//!
//! `MIRO_LIMITS__MAX_TURNS=50` sets `limits.max_turns`; a double
//! underscore separates table levels.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, LoopLimits, RetryPolicy, SamplingParams};
use crate::context::{
    RetentionBudget, TokenBudget, DEFAULT_MAX_CONTEXT, DEFAULT_MAX_OUTPUT, DEFAULT_RETENTION,
    DEFAULT_TRUNCATION_LIMIT,
};
use crate::error::HarnessError;
use crate::reward::{CurationThresholds, RewardConfig};
use crate::tools::{Blocklist, DispatchLimits};

pub const ENV_PREFIX: &str = "MIRO_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            max_output_tokens: DEFAULT_MAX_OUTPUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub max_turns: usize,
    pub max_context: usize,
    pub retention: usize,
    pub truncation_limit: usize,
    pub tool_timeout_secs: u64,
    pub split_thought_action: bool,
}

impl Default for LimitsSection {
    fn default() -> Self {
        Self {
            max_turns: 600,
            max_context: DEFAULT_MAX_CONTEXT,
            retention: DEFAULT_RETENTION,
            truncation_limit: DEFAULT_TRUNCATION_LIMIT,
            tool_timeout_secs: 120,
            split_thought_action: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoint {
    pub url: String,
    /// Model name sent with chat requests.
    pub model: String,
    /// Name of the environment variable that holds the API key.
    pub api_key_env: String,
}

impl Endpoint {
    pub fn is_set(&self) -> bool {
        !self.url.is_empty()
    }

    pub fn api_key(&self) -> Option<String> {
        if self.api_key_env.is_empty() {
            return None;
        }
        std::env::var(&self.api_key_env).ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsSection {
    pub model: Endpoint,
    pub judge: Endpoint,
    pub search: Endpoint,
    pub scrape: Endpoint,
    /// Directory holding live sandbox working directories.
    pub sandbox_root: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraderKind {
    #[default]
    Exact,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub alpha_c: f64,
    pub alpha_f: f64,
    pub grader: GraderKind,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            alpha_c: 1.0,
            alpha_f: 0.5,
            grader: GraderKind::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mock: bool,
    pub workers: usize,
    pub max_attempts: u32,
    pub blocked_domains: Vec<String>,
    pub sampling: SamplingSection,
    pub limits: LimitsSection,
    pub backends: BackendsSection,
    pub reward: RewardSection,
    pub curation: CurationThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mock: false,
            workers: 4,
            max_attempts: 3,
            blocked_domains: vec!["huggingface.co".into()],
            sampling: SamplingSection::default(),
            limits: LimitsSection::default(),
            backends: BackendsSection::default(),
            reward: RewardSection::default(),
            curation: CurationThresholds::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Defaults, then the file (if any), then `MIRO_*` variables from `env`.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self, HarnessError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(config_err)?
            }
            None => toml::Table::new(),
        };
        apply_env(&mut table, env)?;
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sampling_params(None).validate().map_err(HarnessError::Config)?;
        TokenBudget::new(self.limits.max_context, self.sampling.max_output_tokens).map_err(HarnessError::Config)?;
        if self.limits.max_turns == 0 {
            return Err(config_err("limits.max_turns must be at least 1"));
        }
        if self.limits.truncation_limit == 0 {
            return Err(config_err("limits.truncation_limit must be at least 1"));
        }
        if self.workers == 0 || self.max_attempts == 0 {
            return Err(config_err("workers and max_attempts must be at least 1"));
        }
        RewardConfig::new(self.reward.alpha_c, self.reward.alpha_f).map_err(config_err)?;
        Ok(())
    }

    pub fn sampling_params(&self, seed: Option<u64>) -> SamplingParams {
        SamplingParams {
            temperature: self.sampling.temperature,
            top_p: self.sampling.top_p,
            max_output_tokens: self.sampling.max_output_tokens,
            seed,
        }
    }

    pub fn agent_config(&self, seed: Option<u64>) -> Result<AgentConfig, HarnessError> {
        let token_budget =
            TokenBudget::new(self.limits.max_context, self.sampling.max_output_tokens).map_err(HarnessError::Config)?;
        Ok(AgentConfig {
            sampling: self.sampling_params(seed),
            limits: LoopLimits {
                max_turns: self.limits.max_turns,
                token_budget,
                retention: RetentionBudget(self.limits.retention),
            },
            dispatch: DispatchLimits {
                timeout: Duration::from_secs(self.limits.tool_timeout_secs),
                truncation_limit: self.limits.truncation_limit,
            },
            retry: if self.mock { RetryPolicy::immediate(3) } else { RetryPolicy::default() },
            split_thought_action: self.limits.split_thought_action,
            ..AgentConfig::default()
        })
    }

    pub fn blocklist(&self) -> Blocklist {
        Blocklist::new(self.blocked_domains.iter().cloned())
    }

    pub fn reward_config(&self) -> RewardConfig<f64> {
        RewardConfig {
            alpha_c: self.reward.alpha_c,
            alpha_f: self.reward.alpha_f,
        }
    }
}

/// Writes `MIRO_A__B=value` into `table` at `a.b`. Values are parsed as
/// TOML when possible and kept as strings otherwise.
pub fn apply_env<I>(table: &mut toml::Table, env: I) -> Result<(), HarnessError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(HarnessError::Config(format!("malformed override `{key}`")));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let (last, parents) = path.split_last().expect("path is non-empty");
        let mut node = &mut *table;
        for part in parents {
            let entry = node
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| HarnessError::Config(format!("`{key}` overrides a non-table value")))?;
        }
        node.insert(last.clone(), value);
    }
    Ok(())
}
