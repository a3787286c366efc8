//! Chat-completions client over HTTP(S).

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ChatExchange, ChatProvider, ExchangeRequest, ProviderConfig, ProviderError, TokenUsage};
use crate::prompt::RenderedPrompt;

/// Request body: exactly one system and one user message.
pub fn chat_request_body(prompt: &RenderedPrompt, cfg: &ProviderConfig) -> Value {
    json!({
        "model": cfg.model_name,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "messages": [
            {"role": "system", "content": prompt.system_message},
            {"role": "user", "content": prompt.user_message},
        ],
    })
}

/// Pulls the reply text and token usage out of a chat-completions response.
pub fn parse_response_body(body: &str) -> Result<(String, Option<TokenUsage>), ProviderError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| ProviderError::Network(format!("malformed response body: {e}")))?;
    let text = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| ProviderError::Network("response has no choices[0].message.content".into()))?
        .to_owned();
    let usage = v.get("usage").and_then(|u| {
        Some(TokenUsage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
            total_tokens: u.get("total_tokens")?.as_u64()?,
        })
    });
    Ok((text, usage))
}

/// Caps in-flight requests and spaces request starts.
pub struct Throttle {
    max_concurrent: usize,
    min_interval: Duration,
    state: Mutex<ThrottleState>,
    freed: Condvar,
}

struct ThrottleState {
    in_flight: usize,
    next_start: Option<Instant>,
}

pub struct Permit<'a> {
    throttle: &'a Throttle,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.throttle.state.lock().expect("throttle lock");
        st.in_flight -= 1;
        self.throttle.freed.notify_one();
    }
}

impl Throttle {
    pub fn new(max_concurrent: usize, min_interval: Duration) -> Self {
        Throttle {
            max_concurrent: max_concurrent.max(1),
            min_interval,
            state: Mutex::new(ThrottleState {
                in_flight: 0,
                next_start: None,
            }),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().expect("throttle lock");
        while st.in_flight >= self.max_concurrent {
            st = self.freed.wait(st).expect("throttle lock");
        }
        st.in_flight += 1;
        let now = Instant::now();
        let start = st.next_start.map_or(now, |t| t.max(now));
        st.next_start = Some(start + self.min_interval);
        drop(st);
        let wait = start.saturating_duration_since(Instant::now());
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        Permit { throttle: self }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().expect("throttle lock").in_flight
    }
}

pub struct RemoteProvider {
    agent: ureq::Agent,
    throttle: Throttle,
}

impl RemoteProvider {
    /// The throttle settings and timeout come from `cfg`; one provider is
    /// meant to be shared by every episode in a process.
    pub fn new(cfg: &ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteProvider {
            agent,
            throttle: Throttle::new(
                cfg.max_concurrent_requests,
                Duration::from_millis(cfg.min_request_interval_ms),
            ),
        }
    }
}

fn classify(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        other => ProviderError::Network(other.to_string()),
    }
}

impl ChatProvider for RemoteProvider {
    fn complete(&self, prompt: &RenderedPrompt, cfg: &ProviderConfig) -> Result<ChatExchange, ProviderError> {
        let key = std::env::var(&cfg.api_key_env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ProviderError::Auth(format!("environment variable {} is not set", cfg.api_key_env_var)))?;
        let body = chat_request_body(prompt, cfg);

        let _permit = self.throttle.acquire();
        let started = Instant::now();
        let mut resp = self
            .agent
            .post(&cfg.endpoint_url)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(classify)?;
        let status = resp.status().as_u16();
        let retry_after_ms = resp
            .headers()
            .get("retry-after")
            .and_then(|h| h.to_str().ok())
            .and_then(|s| s.trim().parse::<f64>().ok())
            .map(|secs| (secs * 1000.0) as u64);
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        let wall_time_ms = started.elapsed().as_millis() as u64;

        match status {
            200..=299 => {
                let (response_text, token_usage) = parse_response_body(&text)?;
                Ok(ChatExchange {
                    request: ExchangeRequest {
                        prompt: prompt.clone(),
                        provider: cfg.clone(),
                    },
                    response_text,
                    token_usage,
                    wall_time_ms,
                })
            }
            401 | 403 => Err(ProviderError::Auth(format!("HTTP {status}: {text}"))),
            429 => Err(ProviderError::RateLimited { retry_after_ms }),
            408 | 504 => Err(ProviderError::Timeout),
            500..=599 => Err(ProviderError::Network(format!("HTTP {status}: {text}"))),
            _ => Err(ProviderError::Rejected { status, body: text }),
        }
    }

    fn is_remote(&self) -> bool {
        true
    }
}
