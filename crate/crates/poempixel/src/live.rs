//! HTTP backends for the four provider traits, plus assembly of a
//! [`Providers`] set from a provider config.
//!
//! Wire formats:
//! - chat: OpenAI-compatible `POST {base}/chat/completions`
//! - embeddings: OpenAI-compatible `POST {base}/embeddings`
//! - image: `POST {base}` with `{"instruction","width","height","seed"}`,
//!   answered by `{"image_b64"}` (PNG)
//! - scorer: `POST {base}` with `{"image_b64","text"}`, answered by `{"itm","itc"}`

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use poempixel_core::providers::mock::{
    decode_png, MockChat, MockEmbedder, MockImageGenerator, MockScorer,
};
use poempixel_core::providers::{
    check_embedding_batch, AlignmentScore, AlignmentScorer, ChatProvider, ChatRequest,
    EmbeddingVector, Embedder, EndpointConfig, ImageArtifact, ImageGenerator, ImageParams,
    Limited, ProviderConfig, ProviderError, Providers, RateLimiter, RetryPolicy,
};
use serde_json::{json, Value};

/// Blocking JSON-over-HTTP client for one endpoint.
#[derive(Clone)]
pub struct HttpEndpoint {
    agent: ureq::Agent,
    url: String,
    credential: Option<String>,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, credential: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
            url: url.into(),
            credential,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.credential {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let brief = || format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| ProviderError::Contract(format!("response is not JSON: {e}"))),
            401 | 403 => Err(ProviderError::Auth(brief())),
            429 | 500..=599 => Err(ProviderError::Unavailable(brief())),
            _ => Err(ProviderError::Validation(brief())),
        }
    }
}

fn join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

pub struct LiveChat {
    http: HttpEndpoint,
    model: String,
}

impl LiveChat {
    pub fn new(base_url: &str, model: impl Into<String>, credential: Option<String>, timeout: Duration) -> Self {
        Self {
            http: HttpEndpoint::new(join(base_url, "chat/completions"), credential, timeout),
            model: model.into(),
        }
    }
}

impl ChatProvider for LiveChat {
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let mut messages = Vec::new();
        if let Some(system) = req.system_context.as_deref().filter(|s| !s.is_empty()) {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.user_prompt}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.http.post(&body)?;
        let content = resp["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Contract("missing choices[0].message.content".into()))?;
        if content.trim().is_empty() {
            return Err(ProviderError::EmptyResponse);
        }
        Ok(content.to_string())
    }

    fn model_tag(&self) -> &str {
        &self.model
    }
}

pub struct LiveEmbedder {
    http: HttpEndpoint,
    model: String,
}

impl LiveEmbedder {
    pub fn new(base_url: &str, model: impl Into<String>, credential: Option<String>, timeout: Duration) -> Self {
        Self {
            http: HttpEndpoint::new(join(base_url, "embeddings"), credential, timeout),
            model: model.into(),
        }
    }
}

impl Embedder for LiveEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp = self.http.post(&json!({"model": self.model, "input": texts}))?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| ProviderError::Contract("missing data array".into()))?;
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().unwrap_or(i as u64);
            let values = item["embedding"]
                .as_array()
                .ok_or_else(|| ProviderError::Contract(format!("data[{i}] has no embedding")))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| ProviderError::Contract("non-numeric embedding".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, values));
        }
        rows.sort_by_key(|(i, _)| *i);
        let out: Vec<EmbeddingVector> = rows
            .into_iter()
            .map(|(_, v)| EmbeddingVector::new(v, self.model.clone()))
            .collect();
        check_embedding_batch(texts.len(), &out)?;
        Ok(out)
    }

    fn model_tag(&self) -> &str {
        &self.model
    }
}

pub struct LiveImageGenerator {
    http: HttpEndpoint,
    tag: String,
}

impl LiveImageGenerator {
    pub fn new(url: &str, model: Option<&str>, credential: Option<String>, timeout: Duration) -> Self {
        Self {
            http: HttpEndpoint::new(url, credential, timeout),
            tag: model.unwrap_or("live-image").to_string(),
        }
    }
}

impl ImageGenerator for LiveImageGenerator {
    fn generate(&self, instruction: &str, params: &ImageParams) -> Result<ImageArtifact, ProviderError> {
        if instruction.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty instruction".into()));
        }
        let resp = self.http.post(&json!({
            "instruction": instruction,
            "width": params.width,
            "height": params.height,
            "seed": params.seed,
        }))?;
        if let Some(err) = resp["error"].as_str() {
            return Err(ProviderError::Generation(err.to_string()));
        }
        let b64 = resp["image_b64"]
            .as_str()
            .ok_or_else(|| ProviderError::Contract("missing image_b64".into()))?;
        let bytes = B64
            .decode(b64)
            .map_err(|e| ProviderError::Contract(format!("image_b64 is not base64: {e}")))?;
        let decoded = decode_png(&bytes)
            .map_err(|e| ProviderError::Contract(format!("image is not a PNG: {e}")))?;
        Ok(ImageArtifact {
            bytes,
            width: decoded.width,
            height: decoded.height,
            provider_tag: self.tag.clone(),
            seed: params.seed,
            instruction_text: instruction.to_string(),
        })
    }

    fn provider_tag(&self) -> &str {
        &self.tag
    }
}

pub struct LiveScorer {
    http: HttpEndpoint,
}

impl LiveScorer {
    pub fn new(url: &str, credential: Option<String>, timeout: Duration) -> Self {
        Self {
            http: HttpEndpoint::new(url, credential, timeout),
        }
    }
}

impl AlignmentScorer for LiveScorer {
    fn score(&self, image: &ImageArtifact, text: &str) -> Result<AlignmentScore, ProviderError> {
        if image.bytes.is_empty() {
            return Err(ProviderError::InvalidInput("image has no bytes".into()));
        }
        let resp = self.http.post(&json!({"image_b64": B64.encode(&image.bytes), "text": text}))?;
        let field = |name: &str| {
            resp[name]
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ProviderError::Contract(format!("missing or non-finite {name}")))
        };
        Ok(AlignmentScore {
            itm: field("itm")?,
            itc: field("itc")?,
        })
    }
}

fn credential(cfg: &ProviderConfig, endpoint: &str) -> Result<String, ProviderError> {
    let var = cfg.credential_env(endpoint);
    match std::env::var(&var) {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(ProviderError::NotConfigured(format!(
            "{endpoint} provider is live but {var} is not set"
        ))),
    }
}

fn limited<P>(inner: P, ep: &EndpointConfig) -> Limited<P> {
    let mut limiter = RateLimiter::new(ep.concurrency);
    if let Some(rps) = ep.requests_per_second {
        limiter = limiter.with_rate(rps, ep.concurrency as f64);
    }
    Limited::new(inner, limiter, RetryPolicy::default())
}

fn model(ep: &EndpointConfig, endpoint: &str) -> Result<String, ProviderError> {
    ep.model
        .clone()
        .ok_or_else(|| ProviderError::NotConfigured(format!("{endpoint} provider needs a model")))
}

/// Builds the provider set. Mock endpoints use `seed`; live ones read their
/// credential from the environment and are wrapped with the endpoint's
/// concurrency limit, rate limit and retry policy.
pub fn build_providers(cfg: &ProviderConfig, seed: u64) -> Result<Providers, ProviderError> {
    cfg.validate()
        .map_err(|e| ProviderError::NotConfigured(e.to_string()))?;
    let timeout = |ep: &EndpointConfig| Duration::from_secs(ep.timeout_secs);
    let base = |ep: &EndpointConfig| ep.base_url.clone().unwrap_or_default();

    let chat: Arc<dyn ChatProvider> = if cfg.chat.is_live() {
        let c = LiveChat::new(&base(&cfg.chat), model(&cfg.chat, "chat")?, Some(credential(cfg, "chat")?), timeout(&cfg.chat));
        Arc::new(limited(c, &cfg.chat))
    } else {
        Arc::new(MockChat::new(seed))
    };
    let embedder: Arc<dyn Embedder> = if cfg.embedding.is_live() {
        let e = LiveEmbedder::new(
            &base(&cfg.embedding),
            model(&cfg.embedding, "embedding")?,
            Some(credential(cfg, "embedding")?),
            timeout(&cfg.embedding),
        );
        Arc::new(limited(e, &cfg.embedding))
    } else {
        Arc::new(MockEmbedder::new(seed))
    };
    let image: Arc<dyn ImageGenerator> = if cfg.image.is_live() {
        let g = LiveImageGenerator::new(
            &base(&cfg.image),
            cfg.image.model.as_deref(),
            Some(credential(cfg, "image")?),
            timeout(&cfg.image),
        );
        Arc::new(limited(g, &cfg.image))
    } else {
        Arc::new(MockImageGenerator::new())
    };
    let scorer: Arc<dyn AlignmentScorer> = if cfg.scorer.is_live() {
        let s = LiveScorer::new(&base(&cfg.scorer), Some(credential(cfg, "scorer")?), timeout(&cfg.scorer));
        Arc::new(limited(s, &cfg.scorer))
    } else {
        Arc::new(MockScorer)
    };
    Ok(Providers {
        chat,
        embedder,
        image,
        scorer,
    })
}
