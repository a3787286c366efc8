//! Chat-model access: provider abstraction, response parsing and the
//! render → complete → parse decision loop.

mod mock;
mod parse;
mod remote;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{CannedReply, MockFallback, MockProvider, MockResponses};
pub use parse::{parse_action, ParseFailure, ParseFailureReason};
pub use remote::{chat_request_body, parse_response_body, RemoteProvider, Throttle};

use crate::grid::{Action, Role};
use crate::policy::{Decision, DecisionSource, Observation};
use crate::prompt::{render_prompt, PromptTemplateSet, RenderedPrompt};
use crate::scalar::RewardScalar;
use crate::scenario::ScenarioSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Name of the environment variable holding the API key.
    pub api_key_env_var: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_concurrent_requests: usize,
    pub min_request_interval_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4".into(),
            temperature: 0.1,
            max_tokens: 10,
            api_key_env_var: "OPENAI_API_KEY".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            max_concurrent_requests: 4,
            min_request_interval_ms: 0,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("provider.temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("provider.max_tokens must be > 0".into());
        }
        if self.api_key_env_var.is_empty() {
            return Err("provider.api_key_env_var must name an environment variable".into());
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based): exponential, capped.
    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_max_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeRequest {
    pub prompt: RenderedPrompt,
    pub provider: ProviderConfig,
}

/// One request/response pair, response text kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatExchange {
    pub request: ExchangeRequest,
    pub response_text: String,
    pub token_usage: Option<TokenUsage>,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("NetworkError: {0}")]
    Network(String),
    #[error("AuthError: {0}")]
    Auth(String),
    #[error("RateLimited (retry after {retry_after_ms:?} ms)")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("Timeout")]
    Timeout,
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Network(_) | ProviderError::RateLimited { .. } | ProviderError::Timeout
        )
    }

    pub fn is_fatal(&self) -> bool {
        matches!(self, ProviderError::Auth(_))
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, prompt: &RenderedPrompt, cfg: &ProviderConfig) -> Result<ChatExchange, ProviderError>;

    fn is_remote(&self) -> bool;
}

/// Everything produced while asking the model for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmTurn {
    pub prompt: Option<RenderedPrompt>,
    pub exchanges: Vec<ChatExchange>,
    /// Parse failures and transient errors, one line each.
    pub failures: Vec<String>,
    pub decision: Decision,
}

fn fallback(raw: Option<String>, latency_ms: u64) -> Decision {
    Decision {
        action: Action::Stop,
        source: DecisionSource::Fallback,
        raw_response: raw,
        latency_ms: Some(latency_ms),
    }
}

/// Renders the prompt, queries the provider and parses the reply.
///
/// At most `1 + max_retries` requests are made. Unparseable replies are
/// retried immediately; transient provider errors wait for the backoff
/// delay. When attempts run out the decision is a fallback `Stop`. Only an
/// authentication failure is returned as an error.
pub fn decide_llm<R: RewardScalar>(
    obs: &Observation<R>,
    spec: &ScenarioSpec<R>,
    templates: &PromptTemplateSet,
    provider: &dyn ChatProvider,
    cfg: &ProviderConfig,
) -> Result<LlmTurn, ProviderError> {
    debug_assert_eq!(obs.self_role, Role::Strategic);
    let prompt = match render_prompt(obs, spec, templates) {
        Ok(p) => p,
        Err(e) => {
            log::error!("cannot render prompt for {}: {e}", obs.self_id);
            return Ok(LlmTurn {
                prompt: None,
                exchanges: Vec::new(),
                failures: vec![e.to_string()],
                decision: fallback(None, 0),
            });
        }
    };

    let mut exchanges: Vec<ChatExchange> = Vec::new();
    let mut failures = Vec::new();
    let mut last_text = None;
    let mut retry = 0u32;
    loop {
        match provider.complete(&prompt, cfg) {
            Ok(ex) => {
                let parsed = parse_action(&ex.response_text, &obs.legal);
                last_text = Some(ex.response_text.clone());
                exchanges.push(ex);
                match parsed {
                    Ok(action) => {
                        let latency = exchanges.iter().map(|e| e.wall_time_ms).sum();
                        return Ok(LlmTurn {
                            prompt: Some(prompt),
                            exchanges,
                            failures,
                            decision: Decision {
                                action,
                                source: DecisionSource::Llm,
                                raw_response: last_text,
                                latency_ms: Some(latency),
                            },
                        });
                    }
                    Err(e) => failures.push(e.to_string()),
                }
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                failures.push(e.to_string());
                if !e.is_retryable() {
                    break;
                }
                if retry < cfg.max_retries {
                    let mut delay = cfg.backoff_delay(retry);
                    if let ProviderError::RateLimited {
                        retry_after_ms: Some(ms),
                    } = e
                    {
                        delay = delay.max(Duration::from_millis(ms));
                    }
                    std::thread::sleep(delay);
                }
            }
        }
        if retry >= cfg.max_retries {
            break;
        }
        retry += 1;
    }
    log::warn!(
        "falling back to Stop for {} at step {} after {} attempts",
        obs.self_id,
        obs.time_step,
        retry + 1
    );
    let latency = exchanges.iter().map(|e| e.wall_time_ms).sum();
    Ok(LlmTurn {
        prompt: Some(prompt),
        exchanges,
        failures,
        decision: fallback(last_text, latency),
    })
}
