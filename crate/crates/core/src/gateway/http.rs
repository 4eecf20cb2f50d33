use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, EndpointProfile, GatewayError};

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<u32>,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    text: String,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Completions-style HTTP endpoint: `POST {base_url}/completions`.
pub struct HttpBackend {
    id: String,
    url: String,
    model_id: String,
    token: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("id", &self.id)
            .field("url", &self.url)
            .field("model_id", &self.model_id)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    /// Reads the bearer token from the environment variable named by
    /// `profile.auth_token_ref`.
    pub fn from_profile(profile: &EndpointProfile) -> Result<Self, GatewayError> {
        profile.validate()?;
        let token = std::env::var(&profile.auth_token_ref).map_err(|_| GatewayError::Auth {
            key: "-".into(),
            message: format!("environment variable {} is not set", profile.auth_token_ref),
        })?;
        Self::with_token(profile, token)
    }

    pub fn with_token(profile: &EndpointProfile, token: String) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(profile.request_timeout))
            .build()
            .map_err(|e| GatewayError::InvalidProfile(e.to_string()))?;
        Ok(Self {
            id: format!("http:{}", profile.name),
            url: format!("{}/completions", profile.base_url.trim_end_matches('/')),
            model_id: profile.model_id.clone(),
            token,
            client,
        })
    }
}

impl Backend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        let body = WireRequest {
            model: &self.model_id,
            prompt: &request.prompt,
            temperature: request.temperature,
            top_k: request.top_k.as_option(),
            n: request.n_samples,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Connect(e.without_url().to_string())
                }
            })?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(BackendError::Auth(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Status(status));
        }
        let parsed: WireResponse = resp.json().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Malformed(e.without_url().to_string())
            }
        })?;
        Ok(parsed.choices.into_iter().map(|c| c.text).collect())
    }
}
