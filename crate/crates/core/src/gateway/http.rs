//! OpenAI-compatible HTTP backends.

use std::collections::HashMap;
use std::time::Duration;

use serde_json::{json, Value};
use ureq::Agent;

use super::{
    BackendProfile, ChatBackend, ChatMessage, CompletionBackend, ConcurrencyLimit, GatewayError, GenerationSession,
    PredictionStep, PropertySchema,
};
use crate::catalog::{ApproxTokenCounter, TokenCounter};
use crate::synth::{cosine, EmbeddingProvider, SynthError};

const BACKOFF_BASE: Duration = Duration::from_millis(250);

struct Client {
    profile: BackendProfile,
    agent: Agent,
    limit: ConcurrencyLimit,
}

impl Client {
    fn new(profile: BackendProfile) -> Client {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(profile.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let limit = ConcurrencyLimit::new(profile.concurrency);
        Client { profile, agent, limit }
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{}", self.profile.base_url.trim_end_matches('/'), endpoint)
    }

    fn check_length(&self, text: &str) -> Result<(), GatewayError> {
        let tokens = ApproxTokenCounter.count(text);
        if tokens > self.profile.max_context_tokens {
            return Err(GatewayError::ContextTooLong {
                tokens,
                limit: self.profile.max_context_tokens,
            });
        }
        Ok(())
    }

    /// POSTs JSON, retrying transport failures and 5xx with exponential
    /// backoff. 429 is surfaced immediately with its retry-after hint.
    fn post(&self, endpoint: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(endpoint);
        let payload = body.to_string();
        let key = self
            .profile
            .api_key_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());
        let _permit = self.limit.acquire();
        let mut last = String::new();
        for attempt in 0..=self.profile.max_retries {
            if attempt > 0 {
                std::thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
            }
            let mut req = self.agent.post(&url).header("content-type", "application/json");
            if let Some(key) = &key {
                req = req.header("authorization", format!("Bearer {key}"));
            }
            let mut resp = match req.send(payload.as_str()) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    tracing::warn!(%url, attempt, error = %last, "request failed");
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| GatewayError::Protocol(e.to_string()));
            match status {
                200..=299 => {
                    let text = text?;
                    return serde_json::from_str(&text).map_err(|e| GatewayError::Protocol(format!("{e}: {text}")));
                }
                429 => {
                    let secs = resp
                        .headers()
                        .get("retry-after")
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<f64>().ok())
                        .unwrap_or(1.0);
                    return Err(GatewayError::RateLimited {
                        retry_after: Duration::from_secs_f64(secs.max(0.0)),
                    });
                }
                500..=599 => {
                    last = format!("HTTP {status}");
                    tracing::warn!(%url, attempt, status, "server error");
                }
                _ => {
                    let text = text.unwrap_or_default();
                    if status == 400 && text.contains("context") {
                        return Err(GatewayError::ContextTooLong {
                            tokens: 0,
                            limit: self.profile.max_context_tokens,
                        });
                    }
                    return Err(GatewayError::Protocol(format!("HTTP {status}: {text}")));
                }
            }
        }
        Err(GatewayError::BackendUnavailable(format!("{url}: {last}")))
    }
}

/// `/completions` with `logprobs`, one new token per call.
pub struct HttpCompletion {
    client: Client,
}

impl HttpCompletion {
    pub fn new(profile: BackendProfile) -> HttpCompletion {
        HttpCompletion {
            client: Client::new(profile),
        }
    }

    /// Prompt text for a session: sentinel-delimited prefix and suffix for
    /// infilling backends, the bare prefix otherwise.
    pub fn prompt(profile: &BackendProfile, session: &GenerationSession) -> String {
        let task = &session.task;
        let forced = session.forced_text();
        match (&profile.sentinels, profile.capability.fim) {
            (Some(s), true) => format!(
                "{}{}{}{}{}{}",
                s.prefix,
                task.prefix(),
                s.suffix,
                task.suffix(),
                s.middle,
                forced
            ),
            _ => format!("{}{}", task.prefix(), forced),
        }
    }
}

impl CompletionBackend for HttpCompletion {
    fn name(&self) -> &str {
        &self.client.profile.name
    }

    fn next_step(&self, session: &GenerationSession, k: usize) -> Result<PredictionStep, GatewayError> {
        let prompt = HttpCompletion::prompt(&self.client.profile, session);
        self.client.check_length(&prompt)?;
        let body = json!({
            "model": self.client.profile.model_id(),
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": GenerationSession::TEMPERATURE,
            "logprobs": k,
        });
        let reply = self.client.post("completions", &body)?;
        parse_top_logprobs(&reply, k)
    }
}

/// Reads `choices[0].logprobs.top_logprobs[0]`, accepting both the legacy
/// map shape and the list-of-objects shape.
fn parse_top_logprobs(reply: &Value, k: usize) -> Result<PredictionStep, GatewayError> {
    let logprobs = &reply["choices"][0]["logprobs"];
    let top = &logprobs["top_logprobs"][0];
    let pairs: Vec<(String, f64)> = match top {
        Value::Object(map) => map
            .iter()
            .filter_map(|(t, lp)| lp.as_f64().map(|lp| (t.clone(), lp)))
            .collect(),
        Value::Array(items) => items
            .iter()
            .filter_map(|it| Some((it["token"].as_str()?.to_string(), it["logprob"].as_f64()?)))
            .collect(),
        _ => match (logprobs["tokens"][0].as_str(), logprobs["token_logprobs"][0].as_f64()) {
            (Some(t), Some(lp)) => vec![(t.to_string(), lp)],
            _ => return Err(GatewayError::Protocol("reply carries no logprobs".into())),
        },
    };
    Ok(PredictionStep::from_logprobs(pairs, k))
}

/// `/chat/completions` with a JSON-schema response format.
pub struct HttpChat {
    client: Client,
}

impl HttpChat {
    pub fn new(profile: BackendProfile) -> HttpChat {
        HttpChat {
            client: Client::new(profile),
        }
    }
}

impl ChatBackend for HttpChat {
    fn name(&self) -> &str {
        &self.client.profile.name
    }

    fn complete(&self, messages: &[ChatMessage], schema: &PropertySchema) -> Result<String, GatewayError> {
        let total: String = messages.iter().map(|m| m.content.as_str()).collect();
        self.client.check_length(&total)?;
        let body = json!({
            "model": self.client.profile.model_id(),
            "messages": messages,
            "temperature": 0,
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": "bugs", "schema": schema.json_schema(), "strict": true},
            },
        });
        let reply = self.client.post("chat/completions", &body)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Protocol("reply carries no message content".into()))
    }
}

/// `/embeddings`, scoring token pairs by cosine similarity. Vectors are
/// cached per spelling.
pub struct HttpEmbeddings {
    client: Client,
    cache: std::sync::Mutex<HashMap<String, Vec<f64>>>,
}

impl HttpEmbeddings {
    pub fn new(profile: BackendProfile) -> HttpEmbeddings {
        HttpEmbeddings {
            client: Client::new(profile),
            cache: Default::default(),
        }
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            texts.iter().copied().filter(|t| !cache.contains_key(*t)).collect()
        };
        if !missing.is_empty() {
            let reply = self.client.post(
                "embeddings",
                &json!({"model": self.client.profile.model_id(), "input": missing}),
            )?;
            let data = reply["data"]
                .as_array()
                .ok_or_else(|| GatewayError::Protocol("reply carries no data".into()))?;
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            for (i, item) in data.iter().enumerate() {
                let idx = item["index"].as_u64().map_or(i, |x| x as usize);
                let vec: Vec<f64> = item["embedding"]
                    .as_array()
                    .ok_or_else(|| GatewayError::Protocol("embedding is not an array".into()))?
                    .iter()
                    .filter_map(Value::as_f64)
                    .collect();
                if let Some(text) = missing.get(idx) {
                    cache.insert(text.to_string(), vec);
                }
            }
        }
        let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        texts
            .iter()
            .map(|t| {
                cache
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| GatewayError::Protocol(format!("no embedding returned for {t:?}")))
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbeddings {
    fn similarity(&self, a: &str, b: &str) -> Result<Option<f64>, SynthError> {
        let vecs = self.embed(&[a, b]).map_err(|e| SynthError::Embedding(e.to_string()))?;
        Ok(Some(cosine(&vecs[0], &vecs[1])))
    }
}
