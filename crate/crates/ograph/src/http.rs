//! Thin HTTP clients for remote embedding, chat and feature services.
//!
//! Every client retries a failed request once and bounds each attempt with
//! a global timeout. Tokens are sent as `Authorization: Bearer <token>`.

use std::time::Duration;

use ograph_core::embed::{EmbedError, TextEmbedder};
use ograph_core::ifa::{FeatureProvider, FeatureRequest, ViewFeature};
use ograph_core::retrieval::ChatClient;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const EMBED_ENDPOINT_ENV: &str = "EMBED_ENDPOINT";
pub const EMBED_TOKEN_ENV: &str = "EMBED_TOKEN";
pub const LLM_ENDPOINT_ENV: &str = "LLM_ENDPOINT";
pub const LLM_TOKEN_ENV: &str = "LLM_TOKEN";

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
struct Endpoint {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Endpoint {
    fn new(url: &str, token: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Endpoint {
            url: url.to_string(),
            token,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn attempt<T: DeserializeOwned>(&self, body: &Value) -> Result<T, String> {
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| format!("unexpected response: {e}"))
    }

    /// One request, retried once on any failure.
    fn post<T: DeserializeOwned>(&self, body: &Value) -> Result<T, String> {
        self.attempt(body).or_else(|first| {
            self.attempt(body)
                .map_err(|second| format!("{} failed twice: {first}; {second}", self.url))
        })
    }
}

fn env_token(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|t| !t.is_empty())
}

/// Remote text embedder: posts `{"texts": [...]}` and expects either an
/// array of float arrays or an object holding one under `embeddings`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    endpoint: Endpoint,
    dim: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbedResponse {
    Bare(Vec<Vec<f32>>),
    Wrapped { embeddings: Vec<Vec<f32>> },
}

impl HttpEmbedder {
    pub fn new(url: &str, token: Option<String>, dim: usize) -> Self {
        HttpEmbedder {
            endpoint: Endpoint::new(url, token, DEFAULT_TIMEOUT),
            dim,
        }
    }

    pub fn with_timeout(url: &str, token: Option<String>, dim: usize, timeout: Duration) -> Self {
        HttpEmbedder {
            endpoint: Endpoint::new(url, token, timeout),
            dim,
        }
    }

    /// Built from `EMBED_ENDPOINT` / `EMBED_TOKEN`, if the endpoint is set.
    pub fn from_env(dim: usize) -> Option<Self> {
        let url = std::env::var(EMBED_ENDPOINT_ENV).ok().filter(|u| !u.is_empty())?;
        Some(Self::new(&url, env_token(EMBED_TOKEN_ENV), dim))
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if let Some(t) = texts.iter().find(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText(t.to_string()));
        }
        let resp: EmbedResponse = self
            .endpoint
            .post(&json!({ "texts": texts }))
            .map_err(EmbedError::Failure)?;
        let vectors = match resp {
            EmbedResponse::Bare(v) | EmbedResponse::Wrapped { embeddings: v } => v,
        };
        if vectors.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: vectors.len(),
            });
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dim) {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(vectors)
    }
}

/// Chat-completion client. Sends an OpenAI-style `messages` body and reads
/// `choices[0].message.content`, a top-level `content`, or a bare string.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    endpoint: Endpoint,
    model: Option<String>,
}

impl HttpChatClient {
    pub fn new(url: &str, token: Option<String>, model: Option<String>) -> Self {
        HttpChatClient {
            endpoint: Endpoint::new(url, token, DEFAULT_TIMEOUT),
            model,
        }
    }

    /// Built from `LLM_ENDPOINT` / `LLM_TOKEN`, if the endpoint is set.
    pub fn from_env(model: Option<String>) -> Option<Self> {
        let url = std::env::var(LLM_ENDPOINT_ENV).ok().filter(|u| !u.is_empty())?;
        Some(Self::new(&url, env_token(LLM_TOKEN_ENV), model))
    }
}

fn chat_text(v: &Value) -> Option<String> {
    if let Some(s) = v.as_str() {
        return Some(s.to_string());
    }
    v.pointer("/choices/0/message/content")
        .or_else(|| v.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl ChatClient for HttpChatClient {
    fn complete(&self, system: &str, user: &str) -> Result<String, String> {
        let mut body = json!({
            "messages": [
                { "role": "system", "content": system },
                { "role": "user", "content": user },
            ],
            "temperature": 0,
        });
        if let Some(m) = &self.model {
            body["model"] = Value::String(m.clone());
        }
        let v: Value = self.endpoint.post(&body)?;
        chat_text(&v).ok_or_else(|| "response has no message content".to_string())
    }
}

#[derive(Serialize)]
struct MaskBody {
    width: u32,
    height: u32,
    /// Row-major indices of set pixels.
    indices: Vec<u32>,
}

/// Remote view-feature service: posts the frame, instance id and mask,
/// expects `{"f_v": [...], "f_c": [...], "caption": "..."}`.
#[derive(Debug, Clone)]
pub struct HttpFeatureProvider {
    endpoint: Endpoint,
}

impl HttpFeatureProvider {
    pub fn new(url: &str, token: Option<String>) -> Self {
        HttpFeatureProvider {
            endpoint: Endpoint::new(url, token, DEFAULT_TIMEOUT),
        }
    }
}

impl FeatureProvider for HttpFeatureProvider {
    fn describe(&self, request: &FeatureRequest<'_>) -> Result<ViewFeature, String> {
        let m = request.mask;
        let mask = MaskBody {
            width: m.width,
            height: m.height,
            indices: m
                .data
                .iter()
                .enumerate()
                .filter(|(_, b)| **b)
                .map(|(i, _)| i as u32)
                .collect(),
        };
        self.endpoint.post(&json!({
            "frame": request.frame,
            "instance_id": request.instance_id,
            "mask": mask,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ograph_core::ingest::Mask;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    /// Serves the given responses in order, one per connection, and hands
    /// back each request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let lower = l.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = l["authorization:".len()..].trim().to_string();
                    }
                }
                let mut req = vec![0u8; len];
                reader.read_exact(&mut req).unwrap();
                tx.send((auth, String::from_utf8(req).unwrap())).unwrap();
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, rx)
    }

    #[test]
    fn embedder_posts_texts_and_checks_shape() {
        let (url, rx) = serve(vec![
            (200, "[[1.0, 0.0], [0.0, 1.0]]".into()),
            (200, "{\"embeddings\": [[0.5, 0.5, 0.5]]}".into()),
        ]);
        let e = HttpEmbedder::new(&url, Some("secret".into()), 2);
        assert_eq!(e.embed_batch(&["a", "b"]).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (auth, body) = rx.recv().unwrap();
        assert_eq!(auth, "Bearer secret");
        assert_eq!(serde_json::from_str::<Value>(&body).unwrap(), json!({"texts": ["a", "b"]}));
        assert!(matches!(e.embed_batch(&["c"]), Err(EmbedError::DimensionMismatch { .. })));
        assert_eq!(e.embed_batch(&[" "]), Err(EmbedError::EmptyText(" ".into())));
    }

    #[test]
    fn retries_once_after_a_server_error() {
        let (url, rx) = serve(vec![(500, "{}".into()), (200, "[[1.0]]".into())]);
        let e = HttpEmbedder::new(&url, None, 1);
        assert_eq!(e.embed("x").unwrap(), vec![1.0]);
        assert_eq!(rx.iter().take(2).count(), 2);
    }

    #[test]
    fn gives_up_after_two_failures() {
        let (url, _rx) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
        let e = HttpEmbedder::new(&url, None, 1);
        assert!(matches!(e.embed("x"), Err(EmbedError::Failure(_))));
    }

    #[test]
    fn chat_client_sends_prompt_as_system_message() {
        let reply = json!({"choices": [{"message": {"content": "graph.query_for_target('vase')"}}]});
        let (url, rx) = serve(vec![(200, reply.to_string())]);
        let c = HttpChatClient::new(&url, None, Some("m".into()));
        assert_eq!(c.complete("SYS", "find a vase").unwrap(), "graph.query_for_target('vase')");
        let (_, body) = rx.recv().unwrap();
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][0]["content"], "SYS");
        assert_eq!(v["messages"][1]["content"], "find a vase");
        assert_eq!(v["model"], "m");
    }

    #[test]
    fn feature_provider_round_trip() {
        let reply = json!({"f_v": [1.0, 0.0], "f_c": [0.0, 1.0], "caption": "cup"});
        let (url, rx) = serve(vec![(200, reply.to_string())]);
        let p = HttpFeatureProvider::new(&url, None);
        let mask = Mask::new(2, 2, vec![false, true, true, false]);
        let got = p
            .describe(&FeatureRequest {
                frame: 4,
                instance_id: 9,
                mask: &mask,
            })
            .unwrap();
        assert_eq!(got.caption, "cup");
        let (_, body) = rx.recv().unwrap();
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["mask"]["indices"], json!([1, 2]));
        assert_eq!(v["frame"], 4);
    }
}
