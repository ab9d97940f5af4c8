//! Backend that answers from recorded responses.
//!
//! Fixture format:
//!
//! ```json
//! {
//!   "backend": "google-recorded",
//!   "responses": { "<image digest>": [ {"label": "Nurse", "present": true, "confidence": 0.91} ] },
//!   "fallback": []
//! }
//! ```
//!
//! Images without a recorded response get `fallback` when it is given and a
//! protocol error otherwise.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::{Backend, LabelPrediction, ProbeError, ProbeInput};

#[derive(Debug, Deserialize)]
struct RawPrediction {
    label: String,
    #[serde(default = "yes")]
    present: bool,
    confidence: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
struct Fixture {
    backend: String,
    responses: HashMap<String, Vec<RawPrediction>>,
    #[serde(default)]
    fallback: Option<Vec<RawPrediction>>,
}

#[derive(Clone, Debug)]
pub struct ReplayBackend {
    id: String,
    responses: HashMap<String, Vec<LabelPrediction>>,
    fallback: Option<Vec<LabelPrediction>>,
}

fn convert(raw: Vec<RawPrediction>) -> Result<Vec<LabelPrediction>, ProbeError> {
    raw.into_iter()
        .map(|r| LabelPrediction::new(&r.label, r.present, r.confidence))
        .collect()
}

impl ReplayBackend {
    pub fn new(id: &str, responses: HashMap<String, Vec<LabelPrediction>>, fallback: Option<Vec<LabelPrediction>>) -> Self {
        Self {
            id: id.to_string(),
            responses,
            fallback,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ProbeError> {
        let f: Fixture = serde_json::from_str(text).map_err(|e| ProbeError::Config(format!("replay fixture: {e}")))?;
        let responses = f
            .responses
            .into_iter()
            .map(|(k, v)| Ok((k, convert(v)?)))
            .collect::<Result<_, ProbeError>>()?;
        let fallback = f.fallback.map(convert).transpose()?;
        Ok(Self::new(&f.backend, responses, fallback))
    }

    pub fn from_file(path: &Path) -> Result<Self, ProbeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProbeError::Config(format!("replay fixture {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        self.responses
            .get(&input.digest)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| ProbeError::Protocol(format!("no recorded response for image {}", input.digest)))
    }
}
