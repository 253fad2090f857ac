//! Adapter for OpenAI-style `/v1/completions` endpoints.
//!
//! Scoring submits `context + continuation` with `echo=true, logprobs=1,
//! max_tokens=0` and sums the log-probabilities of the echoed tokens that
//! cover the continuation.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    Backend, BackendError, FinishReason, GenerateRequest, GenerateResponse, ScoreRequest, ScoreResponse,
    TokenLogprob,
};

#[derive(Debug, Deserialize)]
struct Completion {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct OpenAiCompletions {
    url: String,
    model: String,
    client: Client,
}

impl OpenAiCompletions {
    /// Connects and verifies that the endpoint echoes prompt log-probabilities.
    pub fn connect(endpoint: &str, model: &str) -> Result<Self, BackendError> {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/completions") {
            trimmed.to_string()
        } else if trimmed.ends_with("/v1") {
            format!("{trimmed}/completions")
        } else {
            format!("{trimmed}/v1/completions")
        };
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let adapter = OpenAiCompletions {
            url,
            model: model.to_string(),
            client,
        };
        match adapter.score(&ScoreRequest::new("The capital of France is", " Paris")) {
            Ok(_) => Ok(adapter),
            Err(BackendError::Protocol(msg)) => Err(BackendError::Capability(format!(
                "endpoint does not return echoed prompt logprobs: {msg}"
            ))),
            Err(e) => Err(e),
        }
    }

    fn post(&self, body: Value) -> Result<Completion, BackendError> {
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()));
        }
        let lower = text.to_lowercase();
        if lower.contains("context length") || lower.contains("maximum context") {
            Err(BackendError::ContextOverflow(text))
        } else if status.is_server_error() || status.as_u16() == 429 {
            Err(BackendError::Transport(format!("HTTP {status}: {text}")))
        } else {
            Err(BackendError::Protocol(format!("HTTP {status}: {text}")))
        }
    }
}

/// Indices of the trailing echoed tokens that cover `continuation`.
fn continuation_span(lp: &Logprobs, context: &str, continuation: &str) -> Result<std::ops::Range<usize>, BackendError> {
    let n = lp.tokens.len();
    if lp.token_logprobs.len() != n {
        return Err(BackendError::Protocol("tokens and token_logprobs differ in length".into()));
    }
    if let Some(offsets) = &lp.text_offset {
        if offsets.len() == n {
            let boundary = context.chars().count();
            let first = (0..n)
                .find(|&i| offsets[i] + lp.tokens[i].chars().count() > boundary)
                .ok_or_else(|| BackendError::Tokenization("no echoed token covers the continuation".into()))?;
            return Ok(first..n);
        }
    }
    let want = continuation.chars().count();
    let mut covered = 0;
    let mut first = n;
    while covered < want {
        if first == 0 {
            return Err(BackendError::Tokenization("echoed tokens shorter than continuation".into()));
        }
        first -= 1;
        covered += lp.tokens[first].chars().count();
    }
    Ok(first..n)
}

impl Backend for OpenAiCompletions {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        req.validate()?;
        let body = json!({
            "model": self.model,
            "prompt": format!("{}{}", req.context, req.continuation),
            "echo": true,
            "logprobs": 1,
            "max_tokens": 0,
            "temperature": 0.0,
        });
        let completion = self.post(body)?;
        let lp = completion
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::Protocol("response has no logprobs".into()))?;
        let span = continuation_span(&lp, &req.context, &req.continuation)?;
        let mut pieces = Vec::with_capacity(span.len());
        for i in span {
            let logprob = lp.token_logprobs[i]
                .ok_or_else(|| BackendError::Protocol(format!("token {i} has no logprob")))?;
            pieces.push(TokenLogprob {
                text: lp.tokens[i].clone(),
                logprob,
            });
        }
        Ok(ScoreResponse::from_pieces(pieces))
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        req.validate()?;
        let mut body = json!({
            "model": self.model,
            "prompt": req.context,
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
            "seed": req.seed,
        });
        if !req.stop.is_empty() {
            body["stop"] = json!(req.stop);
        }
        let choice = self
            .post(body)?
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") => FinishReason::Stop,
            _ => FinishReason::End,
        };
        Ok(GenerateResponse {
            text: choice.text,
            finish_reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(tokens: &[&str], logprobs: &[f64], offsets: Option<Vec<usize>>) -> Logprobs {
        Logprobs {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            token_logprobs: logprobs.iter().map(|v| Some(*v)).collect(),
            text_offset: offsets,
        }
    }

    #[test]
    fn span_by_offsets() {
        let l = lp(&["Is", " it", " Yes"], &[-1.0, -2.0, -0.5], Some(vec![0, 2, 5]));
        assert_eq!(continuation_span(&l, "Is it", " Yes").unwrap(), 2..3);
    }

    #[test]
    fn span_by_length_covers_three_tokens() {
        let l = lp(&["ctx", " a", "b", "c"], &[-1.0, -0.1, -0.2, -0.3], None);
        assert_eq!(continuation_span(&l, "ctx", " abc").unwrap(), 1..4);
    }

    #[test]
    fn merged_boundary_token_is_included() {
        // Context's trailing space merged into the continuation token.
        let l = lp(&["choice", " A"], &[-1.0, -0.7], Some(vec![0, 6]));
        assert_eq!(continuation_span(&l, "choice ", "A").unwrap(), 1..2);
    }
}
