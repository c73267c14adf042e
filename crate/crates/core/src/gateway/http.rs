//! JSON-over-HTTP providers described entirely by configuration.
//!
//! The request body is a JSON template with `{{prompt}}`, `{{texts}}`,
//! `{{model}}`, `{{temperature}}` and `{{max_tokens}}` placeholders; values
//! are substituted as JSON literals. The completion or embedding is pulled
//! out of the response with a dot path such as `choices.0.message.content`
//! or `data.*.embedding` (`*` maps over an array).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, GatewayError, LlmRequest, RetryPolicy};

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderAdapter {
    pub name: String,
    /// URL; may contain `{{model}}`.
    pub endpoint: String,
    pub body_template: String,
    pub response_path: String,
    /// Header that carries the secret, e.g. `Authorization`.
    #[serde(default)]
    pub auth_header: Option<String>,
    /// Environment variable holding the secret.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Prepended to the secret, e.g. `Bearer `.
    #[serde(default)]
    pub auth_prefix: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Optional example response used to check `response_path` at load time.
    #[serde(default)]
    pub sample_response: Option<Value>,
}

impl ProviderAdapter {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::Config(format!("{}: retry.max_attempts must be >= 1", self.name)));
        }
        if self.response_path.trim().is_empty() {
            return Err(GatewayError::Config(format!("{}: response_path is empty", self.name)));
        }
        if self.auth_header.is_some() != self.auth_env.is_some() {
            return Err(GatewayError::Config(format!(
                "{}: auth_header and auth_env must be set together",
                self.name
            )));
        }
        if let Some(sample) = &self.sample_response {
            extract(sample, &self.response_path)
                .map_err(|e| GatewayError::Config(format!("{}: response_path does not resolve on sample: {e}", self.name)))?;
        }
        Ok(())
    }
}

fn literal<T: Serialize + ?Sized>(v: &T) -> String {
    serde_json::to_string(v).expect("plain values serialize")
}

/// Fills the body template. Placeholders absent from the template are ignored.
pub fn fill_template(
    template: &str,
    model: &str,
    prompt: Option<&str>,
    texts: Option<&[String]>,
    temperature: f64,
    max_tokens: u32,
) -> Result<Value, GatewayError> {
    let mut body = template.replace("{{model}}", &literal(model));
    if let Some(p) = prompt {
        body = body.replace("{{prompt}}", &literal(p));
    }
    if let Some(t) = texts {
        body = body.replace("{{texts}}", &literal(t));
    }
    body = body
        .replace("{{temperature}}", &literal(&temperature))
        .replace("{{max_tokens}}", &literal(&max_tokens));
    serde_json::from_str(&body)
        .map_err(|e| GatewayError::Config(format!("body template is not valid JSON after substitution: {e}")))
}

/// Resolves a dot path; `*` maps the rest of the path over an array.
pub fn extract(v: &Value, path: &str) -> Result<Value, String> {
    let segments: Vec<&str> = path.split('.').filter(|s| !s.is_empty()).collect();
    extract_segments(v, &segments)
}

fn extract_segments(v: &Value, segments: &[&str]) -> Result<Value, String> {
    let Some((head, rest)) = segments.split_first() else {
        return Ok(v.clone());
    };
    if *head == "*" {
        let arr = v.as_array().ok_or_else(|| format!("expected an array at `*`, found {}", kind(v)))?;
        return arr
            .iter()
            .map(|item| extract_segments(item, rest))
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array);
    }
    let next = match v {
        Value::Object(map) => map.get(*head),
        Value::Array(arr) => head.parse::<usize>().ok().and_then(|i| arr.get(i)),
        _ => None,
    };
    match next {
        Some(n) => extract_segments(n, rest),
        None => Err(format!("no `{head}` in {}", kind(v))),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

pub struct HttpBackend {
    adapter: ProviderAdapter,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(adapter: ProviderAdapter) -> Result<Self, GatewayError> {
        adapter.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(adapter.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { adapter, agent })
    }

    pub fn adapter(&self) -> &ProviderAdapter {
        &self.adapter
    }

    fn post(&self, model: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.adapter.endpoint.replace("{{model}}", model);
        let mut req = self.agent.post(&url).header("content-type", "application/json");
        if let (Some(header), Some(var)) = (&self.adapter.auth_header, &self.adapter.auth_env) {
            let secret = std::env::var(var)
                .map_err(|_| GatewayError::Auth(format!("environment variable {var} is not set")))?;
            req = req.header(header.as_str(), format!("{}{secret}", self.adapter.auth_prefix));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| match e {
            ureq::Error::Timeout(t) => GatewayError::Timeout(t.to_string()),
            other => GatewayError::Transient(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transient(format!("reading body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| GatewayError::Malformed(e.to_string())),
            401 | 403 => Err(GatewayError::Auth(format!("status {status}"))),
            408 | 429 | 500..=599 => Err(GatewayError::Transient(format!("status {status}: {}", truncate(&text)))),
            _ => Err(GatewayError::Rejected {
                status,
                body: truncate(&text),
            }),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.adapter.name
    }

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        let body = fill_template(
            &self.adapter.body_template,
            &req.model_id,
            Some(&req.prompt),
            None,
            req.decode.temperature,
            req.decode.max_tokens,
        )?;
        let resp = self.post(&req.model_id, &body)?;
        match extract(&resp, &self.adapter.response_path).map_err(GatewayError::Malformed)? {
            Value::String(s) => Ok(s),
            other => Err(GatewayError::Malformed(format!("completion is a {}, not a string", kind(&other)))),
        }
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = fill_template(&self.adapter.body_template, model_id, None, Some(texts), 0.0, 0)?;
        let resp = self.post(model_id, &body)?;
        let value = extract(&resp, &self.adapter.response_path).map_err(GatewayError::Malformed)?;
        serde_json::from_value(value).map_err(|e| GatewayError::Malformed(format!("embeddings: {e}")))
    }
}
