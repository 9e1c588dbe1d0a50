//! Chat-completion clients.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{prompt_candidates, PromptTemplate, PromptVariant, TRANSCRIPT_CUE};
use crate::decoding::wer;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Wire body of a chat-completion request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestConfig {
    pub model: String,
    pub temperature: f64,
    /// Sent as a leading system message when set; the prompt itself always
    /// goes in the user message.
    pub system: Option<String>,
}

impl Default for RequestConfig {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo-16k-0613".into(),
            temperature: 0.0,
            system: None,
        }
    }
}

impl RequestConfig {
    pub fn request(&self, prompt: &str) -> ChatRequest {
        let mut messages = Vec::with_capacity(2);
        if let Some(s) = &self.system {
            messages.push(ChatMessage::new(Role::System, s.clone()));
        }
        messages.push(ChatMessage::new(Role::User, prompt));
        ChatRequest {
            model: self.model.clone(),
            temperature: self.temperature,
            messages,
        }
    }
}

pub trait ChatClient: Sync {
    /// Returns the assistant's reply text. `utterance` identifies the request
    /// for clients that need it (mocks); wire clients ignore it.
    fn complete(&self, utterance: &str, request: &ChatRequest) -> Result<String>;
}

/// Deterministic offline stand-ins for a chat endpoint. They read the
/// candidates back out of the prompt.
#[derive(Clone, Debug)]
pub enum MockClient {
    /// Always picks the first candidate.
    Identity { template: PromptTemplate },
    /// Picks the candidate with the lowest WER against a hidden reference;
    /// ties go to the earlier candidate.
    Oracle {
        template: PromptTemplate,
        references: HashMap<String, String>,
    },
    /// Refuses for the listed utterances and defers to `inner` otherwise.
    Refusing {
        inner: Box<MockClient>,
        utterances: HashSet<String>,
    },
}

impl MockClient {
    fn template(&self) -> &PromptTemplate {
        match self {
            MockClient::Identity { template } | MockClient::Oracle { template, .. } => template,
            MockClient::Refusing { inner, .. } => inner.template(),
        }
    }

    fn answer(&self, template: &PromptTemplate, choice: &str) -> String {
        if template.variant == PromptVariant::ChainOfReasoning {
            format!("The candidates mostly agree; the chosen line reads most naturally.\n{TRANSCRIPT_CUE} {choice}")
        } else {
            choice.to_string()
        }
    }
}

impl ChatClient for MockClient {
    fn complete(&self, utterance: &str, request: &ChatRequest) -> Result<String> {
        if let MockClient::Refusing { inner, utterances } = self {
            if utterances.contains(utterance) {
                return Ok("I cannot choose.".into());
            }
            return inner.complete(utterance, request);
        }
        let template = self.template();
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| Error::pre("request has no user message"))?;
        let candidates = prompt_candidates(template, &prompt.content)?;
        let choice = match self {
            MockClient::Identity { .. } => candidates[0].clone(),
            MockClient::Oracle { references, .. } => {
                let reference = references
                    .get(utterance)
                    .ok_or_else(|| Error::pre(format!("oracle has no reference for {utterance:?}")))?;
                let mut best = (f64::INFINITY, &candidates[0]);
                for c in &candidates {
                    let w = wer(c, reference)?;
                    if w < best.0 {
                        best = (w, c);
                    }
                }
                best.1.clone()
            }
            MockClient::Refusing { .. } => unreachable!("handled above"),
        };
        Ok(self.answer(template, &choice))
    }
}

/// OpenAI-compatible chat-completions endpoint over HTTPS.
#[cfg(feature = "live")]
pub struct LiveClient {
    http: reqwest::blocking::Client,
    url: String,
    api_key: String,
}

#[cfg(feature = "live")]
impl LiveClient {
    pub const DEFAULT_URL: &'static str = "https://api.openai.com/v1/chat/completions";
    pub const KEY_VAR: &'static str = "OPENAI_API_KEY";

    /// Reads the API key from `key_var`.
    pub fn from_env(url: &str, key_var: &str, timeout: std::time::Duration) -> Result<Self> {
        let api_key = std::env::var(key_var).map_err(|_| Error::config(format!("{key_var} is not set")))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            http,
            url: url.to_string(),
            api_key,
        })
    }
}

#[cfg(feature = "live")]
impl ChatClient for LiveClient {
    fn complete(&self, _utterance: &str, request: &ChatRequest) -> Result<String> {
        let resp = self
            .http
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let body: serde_json::Value = resp.json().map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Transport(format!("HTTP {status}: {body}")));
        }
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport(format!("response without message content: {body}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lisa::{build_prompt, parse_response, CandidateSet, ParsedResponse, Provenance};

    fn set() -> CandidateSet {
        CandidateSet::new(
            "u1",
            vec!["the cat sat".into(), "a cat sat".into(), "the cat sat down".into()],
            Provenance::TopBeams { k: 3 },
            Some(vec![1.0, 2.0, 3.0]),
        )
        .unwrap()
    }

    #[test]
    fn request_layout() {
        let cfg = RequestConfig {
            system: Some("be brief".into()),
            ..Default::default()
        };
        let json = serde_json::to_value(cfg.request("hi")).unwrap();
        assert_eq!(json["temperature"], 0.0);
        assert_eq!(json["messages"][0]["role"], "system");
        assert_eq!(json["messages"][1], serde_json::json!({"role": "user", "content": "hi"}));
        assert_eq!(RequestConfig::default().request("x").messages.len(), 1);
    }

    #[test]
    fn mocks_answer_in_template_format() {
        for v in PromptVariant::ALL {
            let t = PromptTemplate::new(v);
            let req = RequestConfig::default().request(&build_prompt(&t, &set()).unwrap());
            let id = MockClient::Identity { template: t.clone() };
            assert_eq!(
                parse_response(&t, &id.complete("u1", &req).unwrap()),
                ParsedResponse::Transcript("the cat sat".into())
            );
            let oracle = MockClient::Oracle {
                template: t.clone(),
                references: HashMap::from([("u1".to_string(), "a cat sat down".to_string())]),
            };
            // "a cat sat" and "the cat sat down" tie at 1/4; the earlier wins
            assert_eq!(
                parse_response(&t, &oracle.complete("u1", &req).unwrap()),
                ParsedResponse::Transcript("a cat sat".into())
            );
            assert!(oracle.complete("zz", &req).is_err());
            let refusing = MockClient::Refusing {
                inner: Box::new(id),
                utterances: HashSet::from(["u1".to_string()]),
            };
            assert_eq!(parse_response(&t, &refusing.complete("u1", &req).unwrap()), ParsedResponse::Noncompliant);
        }
    }
}
