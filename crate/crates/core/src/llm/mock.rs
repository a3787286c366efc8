//! Offline provider that answers from canned responses.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatExchange, ChatProvider, ExchangeRequest, ProviderConfig, ProviderError};
use crate::prompt::{prompt_hash, RenderedPrompt};

/// One canned reply or a sequence handed out in order. The last entry of a
/// sequence repeats once the sequence is exhausted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CannedReply {
    One(String),
    Sequence(Vec<String>),
}

impl CannedReply {
    fn get(&self, index: usize) -> Option<&str> {
        match self {
            CannedReply::One(s) => Some(s),
            CannedReply::Sequence(v) => v.get(index).or(v.last()).map(String::as_str),
        }
    }
}

/// Reply for prompts that have no canned entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MockFallback {
    /// Unknown prompts are an error.
    None,
    Fixed(String),
    /// Picks `choices[hash(prompt, seed) % len]`; a pure function of the prompt.
    HashedChoice {
        choices: Vec<String>,
        seed: u64,
    },
}

/// Contents of a canned-responses file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockResponses {
    /// Keyed by [`RenderedPrompt::content_hash`].
    #[serde(default)]
    pub responses: BTreeMap<String, CannedReply>,
    #[serde(default = "default_fallback")]
    pub fallback: MockFallback,
}

fn default_fallback() -> MockFallback {
    MockFallback::None
}

impl Default for MockResponses {
    fn default() -> Self {
        MockResponses {
            responses: BTreeMap::new(),
            fallback: MockFallback::None,
        }
    }
}

impl MockResponses {
    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn fixed(reply: impl Into<String>) -> Self {
        MockResponses {
            responses: BTreeMap::new(),
            fallback: MockFallback::Fixed(reply.into()),
        }
    }
}

pub struct MockProvider {
    canned: MockResponses,
    cursors: Mutex<HashMap<String, usize>>,
    queue: Option<Mutex<VecDeque<String>>>,
}

impl MockProvider {
    pub fn new(canned: MockResponses) -> Self {
        MockProvider {
            canned,
            cursors: Mutex::new(HashMap::new()),
            queue: None,
        }
    }

    /// Answers every request from `replies` in order, regardless of prompt,
    /// repeating the last one when exhausted.
    pub fn from_sequence<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        MockProvider {
            canned: MockResponses::default(),
            cursors: Mutex::new(HashMap::new()),
            queue: Some(Mutex::new(replies.into_iter().map(Into::into).collect())),
        }
    }

    fn reply_for(&self, hash: &str) -> Option<String> {
        if let Some(q) = &self.queue {
            let mut q = q.lock().expect("mock queue lock");
            return if q.len() > 1 { q.pop_front() } else { q.front().cloned() };
        }
        if let Some(canned) = self.canned.responses.get(hash) {
            let mut cursors = self.cursors.lock().expect("mock cursor lock");
            let idx = cursors.entry(hash.to_owned()).or_insert(0);
            let reply = canned.get(*idx).map(str::to_owned);
            *idx += 1;
            return reply;
        }
        match &self.canned.fallback {
            MockFallback::None => None,
            MockFallback::Fixed(s) => Some(s.clone()),
            MockFallback::HashedChoice { choices, seed } if !choices.is_empty() => {
                let digest = prompt_hash(&seed.to_string(), hash);
                let n = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
                Some(choices[(n % choices.len() as u64) as usize].clone())
            }
            MockFallback::HashedChoice { .. } => None,
        }
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, prompt: &RenderedPrompt, cfg: &ProviderConfig) -> Result<ChatExchange, ProviderError> {
        let hash = prompt.content_hash();
        let response_text = self.reply_for(&hash).ok_or_else(|| ProviderError::Rejected {
            status: 404,
            body: format!("no canned response for prompt {hash}"),
        })?;
        Ok(ChatExchange {
            request: ExchangeRequest {
                prompt: prompt.clone(),
                provider: cfg.clone(),
            },
            response_text,
            token_usage: None,
            wall_time_ms: 0,
        })
    }

    fn is_remote(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VehicleId;

    fn prompt(user: &str) -> RenderedPrompt {
        RenderedPrompt {
            agent_id: VehicleId::from("red"),
            time_step: 0,
            system_message: "sys".into(),
            user_message: user.into(),
        }
    }

    #[test]
    fn canned_by_hash_then_sequence_repeats_last() {
        let p = prompt("u");
        let mut canned = MockResponses::default();
        canned
            .responses
            .insert(p.content_hash(), CannedReply::Sequence(vec!["x".into(), "Go".into()]));
        let m = MockProvider::new(canned);
        let cfg = ProviderConfig::default();
        let got: Vec<String> = (0..3).map(|_| m.complete(&p, &cfg).unwrap().response_text).collect();
        assert_eq!(got, ["x", "Go", "Go"]);
        assert!(m.complete(&prompt("other"), &cfg).is_err());
    }

    #[test]
    fn hashed_choice_is_pure() {
        let m = MockProvider::new(MockResponses {
            responses: BTreeMap::new(),
            fallback: MockFallback::HashedChoice {
                choices: vec!["Go".into(), "Stop".into()],
                seed: 9,
            },
        });
        let cfg = ProviderConfig::default();
        let a = m.complete(&prompt("u1"), &cfg).unwrap().response_text;
        let b = m.complete(&prompt("u1"), &cfg).unwrap().response_text;
        assert_eq!(a, b);
        let distinct: std::collections::BTreeSet<String> = (0..40)
            .map(|i| m.complete(&prompt(&i.to_string()), &cfg).unwrap().response_text)
            .collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn responses_file_format() {
        let text = r#"{"responses": {"abc": "Go", "def": ["junk", "Stop"]}, "fallback": {"fixed": "Stop"}}"#;
        let r: MockResponses = serde_json::from_str(text).unwrap();
        assert_eq!(r.responses["abc"], CannedReply::One("Go".into()));
        assert_eq!(r.fallback, MockFallback::Fixed("Stop".into()));
    }
}
