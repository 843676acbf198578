//! Mask filler backed by an external language-model service.
//!
//! Wire protocol: `POST {"prompt": str, "k": int}` answered by
//! `{"predictions": [{"token": str, "probability": float}, ...]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::filler::{normalize_predictions, validate_predictions, FillError, FillRequest, MaskFiller, MaskPrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpFillerConfig {
    pub endpoint: String,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_retries() -> usize {
    2
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_in_flight() -> usize {
    4
}

#[derive(Serialize)]
struct FillBody<'a> {
    prompt: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct FillResponse {
    predictions: Vec<MaskPrediction>,
}

pub struct HttpMaskFiller {
    config: HttpFillerConfig,
    agent: ureq::Agent,
}

impl HttpMaskFiller {
    pub fn new(config: HttpFillerConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn attempt(&self, prompt: &str, k: usize, attempts: usize) -> Result<Vec<MaskPrediction>, FillError> {
        let endpoint = &self.config.endpoint;
        let mut response = self
            .agent
            .post(endpoint)
            .send_json(FillBody { prompt, k })
            .map_err(|e| FillError::Connection {
                endpoint: endpoint.clone(),
                attempts,
                message: e.to_string(),
            })?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(FillError::Status {
                endpoint: endpoint.clone(),
                status,
                attempts,
            });
        }
        let body: FillResponse = response.body_mut().read_json().map_err(|e| FillError::Malformed {
            endpoint: endpoint.clone(),
            attempts,
            message: e.to_string(),
        })?;
        Ok(body.predictions)
    }
}

/// Prompt-only call; the rest of the request is not sent over the wire.
pub fn http_lm_fill(filler: &HttpMaskFiller, prompt: &str, k: usize) -> Result<Vec<MaskPrediction>, FillError> {
    if k == 0 {
        return Err(FillError::ZeroK);
    }
    let max_attempts = filler.config.retries + 1;
    let mut attempt = 1;
    let preds = loop {
        match filler.attempt(prompt, k, attempt) {
            Ok(preds) => break preds,
            Err(e) if attempt >= max_attempts => return Err(e),
            Err(e) => {
                log::warn!("mask fill attempt {attempt}/{max_attempts} failed: {e}");
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
                attempt += 1;
            }
        }
    };
    validate_predictions(&preds, k)?;
    let preds = normalize_predictions(preds);
    if preds.is_empty() {
        return Err(FillError::Protocol("no usable tokens after normalization".into()));
    }
    Ok(preds)
}

impl MaskFiller for HttpMaskFiller {
    fn fill(&self, request: &FillRequest<'_>, k: usize) -> Result<Vec<MaskPrediction>, FillError> {
        http_lm_fill(self, request.prompt, k)
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }
}
