//! Client for the native `/score` + `/generate` JSON protocol.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{Backend, BackendError, GenerateRequest, GenerateResponse, ScoreRequest, ScoreResponse};

/// Error body returned by the native server on non-2xx responses.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: BackendError,
}

#[derive(Debug, Clone)]
pub struct NativeClient {
    base: String,
    client: Client,
}

impl NativeClient {
    pub fn new(base_url: &str) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(NativeClient {
            base: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(e.to_string()));
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(body.error),
            Err(_) if status.is_server_error() => Err(BackendError::Transport(format!("HTTP {status}"))),
            Err(_) => Err(BackendError::Protocol(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes)
            ))),
        }
    }
}

impl Backend for NativeClient {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        req.validate()?;
        self.post("/score", req)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        req.validate()?;
        self.post("/generate", req)
    }
}
