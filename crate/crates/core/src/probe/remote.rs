//! Thin adapters for hosted label-classification services.
//!
//! Each adapter translates one image into one vendor request and the vendor
//! response into [`LabelPrediction`]s. Every label a service returns counts as
//! present, with the service's score (scaled to `[0, 1]`) as confidence.
//! HTTP goes through [`HttpTransport`], so tests substitute canned responses.
//!
//! Credentials come from environment variables:
//!
//! | backend    | variables |
//! |------------|-----------|
//! | `google`   | `GOOGLE_VISION_API_KEY` |
//! | `amazon`   | `AWS_ACCESS_KEY_ID`, `AWS_SECRET_ACCESS_KEY`, optional `AWS_SESSION_TOKEN`, `AWS_REGION` (default `us-east-1`) |
//! | `ibm`      | `IBM_VR_APIKEY`, `IBM_VR_URL` |
//! | `clarifai` | `CLARIFAI_PAT`, optional `CLARIFAI_USER_ID`, `CLARIFAI_APP_ID`, `CLARIFAI_MODEL_ID` |

use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use chrono::{DateTime, Utc};
use serde_json::{json, Value};

use super::sigv4::{self, Credentials, SignableRequest};
use super::{Backend, LabelPrediction, ProbeError, ProbeInput};

#[derive(Clone, Debug, PartialEq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Sends POST requests. Implementations return transport-level failures as
/// [`ProbeError::Transport`] and every HTTP status as a response.
pub trait HttpTransport: Send + Sync {
    fn post(&self, req: &HttpRequest) -> Result<HttpResponse, ProbeError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self { agent: config.into() }
    }
}

impl HttpTransport for UreqTransport {
    fn post(&self, req: &HttpRequest) -> Result<HttpResponse, ProbeError> {
        let mut builder = self.agent.post(&req.url);
        for (k, v) in &req.headers {
            builder = builder.header(k, v);
        }
        let mut resp = builder
            .send(&req.body[..])
            .map_err(|e| ProbeError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.to_string(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| ProbeError::Transport(e.to_string()))?;
        Ok(HttpResponse { status, headers, body })
    }
}

/// Maps HTTP status classes onto probe errors; returns the body on 2xx.
fn check_status(resp: &HttpResponse) -> Result<Value, ProbeError> {
    let text = String::from_utf8_lossy(&resp.body);
    match resp.status {
        200..=299 => serde_json::from_slice(&resp.body).map_err(|e| ProbeError::Protocol(format!("invalid JSON: {e}"))),
        429 => Err(ProbeError::Throttled {
            retry_after: resp
                .header("retry-after")
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs),
        }),
        401 | 403 => Err(ProbeError::Config(format!("authentication failed ({}): {text}", resp.status))),
        500..=599 => Err(ProbeError::Transport(format!("server error {}: {text}", resp.status))),
        s => Err(ProbeError::Protocol(format!("unexpected status {s}: {text}"))),
    }
}

fn env(name: &str) -> Result<String, ProbeError> {
    std::env::var(name).map_err(|_| ProbeError::Config(format!("environment variable {name} is not set")))
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn missing(what: &str) -> ProbeError {
    ProbeError::Protocol(format!("response lacks {what}"))
}

/// Collects `(name, score)` pairs from an array of objects.
fn labels_from(items: Option<&Value>, name_key: &str, score_key: &str, scale: f64) -> Result<Vec<LabelPrediction>, ProbeError> {
    let Some(items) = items else { return Ok(Vec::new()) };
    let items = items.as_array().ok_or_else(|| missing("a label array"))?;
    items
        .iter()
        .map(|it| {
            let name = it.get(name_key).and_then(Value::as_str).ok_or_else(|| missing(name_key))?;
            let score = it.get(score_key).and_then(Value::as_f64).ok_or_else(|| missing(score_key))?;
            LabelPrediction::new(name, true, Some(score / scale))
        })
        .collect()
}

/// Google Cloud Vision `LABEL_DETECTION`.
pub struct GoogleVision {
    pub api_key: String,
    pub endpoint: String,
    pub max_results: u32,
    transport: Arc<dyn HttpTransport>,
}

impl GoogleVision {
    pub fn new(api_key: &str, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            api_key: api_key.to_string(),
            endpoint: "https://vision.googleapis.com/v1/images:annotate".into(),
            max_results: 50,
            transport,
        }
    }

    pub fn from_env(transport: Arc<dyn HttpTransport>) -> Result<Self, ProbeError> {
        Ok(Self::new(&env("GOOGLE_VISION_API_KEY")?, transport))
    }

    pub fn request(&self, input: &ProbeInput) -> HttpRequest {
        let body = json!({
            "requests": [{
                "image": {"content": b64(&input.png)},
                "features": [{"type": "LABEL_DETECTION", "maxResults": self.max_results}]
            }]
        });
        HttpRequest {
            url: format!("{}?key={}", self.endpoint, self.api_key),
            headers: vec![("Content-Type".into(), "application/json".into())],
            body: body.to_string().into_bytes(),
        }
    }

    pub fn parse(v: &Value) -> Result<Vec<LabelPrediction>, ProbeError> {
        let first = v
            .get("responses")
            .and_then(|r| r.get(0))
            .ok_or_else(|| missing("responses[0]"))?;
        if let Some(err) = first.get("error") {
            let code = err.get("code").and_then(Value::as_i64).unwrap_or(0);
            let msg = err.get("message").and_then(Value::as_str).unwrap_or("").to_string();
            return Err(if code == 8 {
                ProbeError::Throttled { retry_after: None }
            } else {
                ProbeError::Protocol(format!("vision error {code}: {msg}"))
            });
        }
        labels_from(first.get("labelAnnotations"), "description", "score", 1.0)
    }
}

impl Backend for GoogleVision {
    fn id(&self) -> &str {
        "google"
    }

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        let resp = self.transport.post(&self.request(input))?;
        Self::parse(&check_status(&resp)?)
    }
}

/// Amazon Rekognition `DetectLabels`, signed with SigV4.
pub struct AmazonRekognition {
    pub credentials: Credentials,
    pub region: String,
    pub max_labels: u32,
    /// Percent, as the service expects.
    pub min_confidence: f64,
    pub now: fn() -> DateTime<Utc>,
    transport: Arc<dyn HttpTransport>,
}

impl AmazonRekognition {
    pub fn new(credentials: Credentials, region: &str, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            credentials,
            region: region.to_string(),
            max_labels: 50,
            min_confidence: 50.0,
            now: Utc::now,
            transport,
        }
    }

    pub fn from_env(transport: Arc<dyn HttpTransport>) -> Result<Self, ProbeError> {
        let credentials = Credentials {
            access_key_id: env("AWS_ACCESS_KEY_ID")?,
            secret_access_key: env("AWS_SECRET_ACCESS_KEY")?,
            session_token: std::env::var("AWS_SESSION_TOKEN").ok(),
        };
        let region = std::env::var("AWS_REGION").unwrap_or_else(|_| "us-east-1".into());
        Ok(Self::new(credentials, &region, transport))
    }

    pub fn host(&self) -> String {
        format!("rekognition.{}.amazonaws.com", self.region)
    }

    pub fn request(&self, input: &ProbeInput) -> HttpRequest {
        let body = json!({
            "Image": {"Bytes": b64(&input.png)},
            "MaxLabels": self.max_labels,
            "MinConfidence": self.min_confidence,
        })
        .to_string()
        .into_bytes();
        let mut headers = vec![
            ("Content-Type".to_string(), "application/x-amz-json-1.1".to_string()),
            ("X-Amz-Target".to_string(), "RekognitionService.DetectLabels".to_string()),
        ];
        let host = self.host();
        let signed = sigv4::sign(
            &SignableRequest {
                method: "POST",
                host: &host,
                path: "/",
                query: &[],
                headers: &headers,
                payload: &body,
            },
            &self.credentials,
            &self.region,
            "rekognition",
            (self.now)(),
        );
        headers.extend(signed);
        HttpRequest {
            url: format!("https://{host}/"),
            headers,
            body,
        }
    }

    pub fn parse(v: &Value) -> Result<Vec<LabelPrediction>, ProbeError> {
        let labels = v.get("Labels").ok_or_else(|| missing("Labels"))?;
        labels_from(Some(labels), "Name", "Confidence", 100.0)
    }
}

impl Backend for AmazonRekognition {
    fn id(&self) -> &str {
        "amazon"
    }

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        let resp = self.transport.post(&self.request(input))?;
        if resp.status == 400 {
            let text = String::from_utf8_lossy(&resp.body);
            if text.contains("ThrottlingException") || text.contains("ProvisionedThroughputExceededException") {
                return Err(ProbeError::Throttled { retry_after: None });
            }
        }
        Self::parse(&check_status(&resp)?)
    }
}

/// IBM Watson Visual Recognition v3 `classify` (multipart upload).
pub struct IbmWatson {
    pub api_key: String,
    pub base_url: String,
    pub version: String,
    pub threshold: f64,
    transport: Arc<dyn HttpTransport>,
}

const BOUNDARY: &str = "----cfaudit-form-boundary-7d1c";

impl IbmWatson {
    pub fn new(api_key: &str, base_url: &str, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            api_key: api_key.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            version: "2018-03-19".into(),
            threshold: 0.5,
            transport,
        }
    }

    pub fn from_env(transport: Arc<dyn HttpTransport>) -> Result<Self, ProbeError> {
        Ok(Self::new(&env("IBM_VR_APIKEY")?, &env("IBM_VR_URL")?, transport))
    }

    pub fn request(&self, input: &ProbeInput) -> HttpRequest {
        let mut body = Vec::new();
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"images_file\"; filename=\"image.png\"\r\n\
                 Content-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(&input.png);
        body.extend_from_slice(
            format!(
                "\r\n--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"threshold\"\r\n\r\n{}\r\n--{BOUNDARY}--\r\n",
                self.threshold
            )
            .as_bytes(),
        );
        HttpRequest {
            url: format!("{}/v3/classify?version={}", self.base_url, self.version),
            headers: vec![
                ("Authorization".into(), format!("Basic {}", b64(format!("apikey:{}", self.api_key).as_bytes()))),
                ("Content-Type".into(), format!("multipart/form-data; boundary={BOUNDARY}")),
            ],
            body,
        }
    }

    pub fn parse(v: &Value) -> Result<Vec<LabelPrediction>, ProbeError> {
        let image = v.get("images").and_then(|i| i.get(0)).ok_or_else(|| missing("images[0]"))?;
        if let Some(err) = image.get("error") {
            return Err(ProbeError::Protocol(format!("watson error: {err}")));
        }
        let classifiers = image
            .get("classifiers")
            .and_then(Value::as_array)
            .ok_or_else(|| missing("classifiers"))?;
        let mut out = Vec::new();
        for c in classifiers {
            out.extend(labels_from(c.get("classes"), "class", "score", 1.0)?);
        }
        Ok(out)
    }
}

impl Backend for IbmWatson {
    fn id(&self) -> &str {
        "ibm"
    }

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        let resp = self.transport.post(&self.request(input))?;
        Self::parse(&check_status(&resp)?)
    }
}

/// Clarifai model `outputs` endpoint.
pub struct Clarifai {
    pub pat: String,
    pub user_id: String,
    pub app_id: String,
    pub model_id: String,
    pub endpoint: String,
    transport: Arc<dyn HttpTransport>,
}

/// Clarifai's status code for success.
const CLARIFAI_OK: i64 = 10000;

impl Clarifai {
    pub fn new(pat: &str, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            pat: pat.to_string(),
            user_id: "clarifai".into(),
            app_id: "main".into(),
            model_id: "general-image-recognition".into(),
            endpoint: "https://api.clarifai.com".into(),
            transport,
        }
    }

    pub fn from_env(transport: Arc<dyn HttpTransport>) -> Result<Self, ProbeError> {
        let mut c = Self::new(&env("CLARIFAI_PAT")?, transport);
        if let Ok(v) = std::env::var("CLARIFAI_USER_ID") {
            c.user_id = v;
        }
        if let Ok(v) = std::env::var("CLARIFAI_APP_ID") {
            c.app_id = v;
        }
        if let Ok(v) = std::env::var("CLARIFAI_MODEL_ID") {
            c.model_id = v;
        }
        Ok(c)
    }

    pub fn request(&self, input: &ProbeInput) -> HttpRequest {
        let body = json!({"inputs": [{"data": {"image": {"base64": b64(&input.png)}}}]});
        HttpRequest {
            url: format!(
                "{}/v2/users/{}/apps/{}/models/{}/outputs",
                self.endpoint, self.user_id, self.app_id, self.model_id
            ),
            headers: vec![
                ("Authorization".into(), format!("Key {}", self.pat)),
                ("Content-Type".into(), "application/json".into()),
            ],
            body: body.to_string().into_bytes(),
        }
    }

    pub fn parse(v: &Value) -> Result<Vec<LabelPrediction>, ProbeError> {
        let code = v
            .get("status")
            .and_then(|s| s.get("code"))
            .and_then(Value::as_i64)
            .ok_or_else(|| missing("status.code"))?;
        if code != CLARIFAI_OK {
            let desc = v["status"].get("description").and_then(Value::as_str).unwrap_or("");
            return Err(ProbeError::Protocol(format!("clarifai status {code}: {desc}")));
        }
        let data = v
            .get("outputs")
            .and_then(|o| o.get(0))
            .and_then(|o| o.get("data"))
            .ok_or_else(|| missing("outputs[0].data"))?;
        labels_from(data.get("concepts"), "name", "value", 1.0)
    }
}

impl Backend for Clarifai {
    fn id(&self) -> &str {
        "clarifai"
    }

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        let resp = self.transport.post(&self.request(input))?;
        Self::parse(&check_status(&resp)?)
    }
}

pub const REMOTE_BACKENDS: [&str; 4] = ["google", "amazon", "ibm", "clarifai"];

/// Builds a remote adapter by name with credentials from the environment.
pub fn from_env(name: &str, transport: Arc<dyn HttpTransport>) -> Result<Box<dyn Backend>, ProbeError> {
    Ok(match name {
        "google" => Box::new(GoogleVision::from_env(transport)?),
        "amazon" => Box::new(AmazonRekognition::from_env(transport)?),
        "ibm" => Box::new(IbmWatson::from_env(transport)?),
        "clarifai" => Box::new(Clarifai::from_env(transport)?),
        other => return Err(ProbeError::Config(format!("unknown remote backend `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{classify_with_retry, RetryPolicy, VirtualClock};
    use super::*;
    use std::sync::Mutex;

    /// Returns queued responses in order and records every request.
    #[derive(Default)]
    struct Mock {
        responses: Mutex<Vec<Result<HttpResponse, ProbeError>>>,
        seen: Mutex<Vec<HttpRequest>>,
    }

    impl Mock {
        fn with(responses: Vec<Result<HttpResponse, ProbeError>>) -> Arc<Self> {
            let mut r = responses;
            r.reverse();
            Arc::new(Self {
                responses: Mutex::new(r),
                seen: Mutex::default(),
            })
        }
    }

    impl HttpTransport for Mock {
        fn post(&self, req: &HttpRequest) -> Result<HttpResponse, ProbeError> {
            self.seen.lock().unwrap().push(req.clone());
            self.responses.lock().unwrap().pop().expect("unexpected request")
        }
    }

    fn ok(body: &str) -> Result<HttpResponse, ProbeError> {
        status(200, body)
    }

    fn status(code: u16, body: &str) -> Result<HttpResponse, ProbeError> {
        Ok(HttpResponse {
            status: code,
            headers: vec![("Retry-After".into(), "7".into())],
            body: body.as_bytes().to_vec(),
        })
    }

    fn input() -> ProbeInput {
        ProbeInput {
            digest: "d".into(),
            png: Arc::new(vec![0, 1, 2]),
        }
    }

    #[test]
    fn google_round_trip() {
        let mock = Mock::with(vec![ok(
            r#"{"responses":[{"labelAnnotations":[{"description":"Nurse","score":0.93},{"description":"Smile","score":0.71}]}]}"#,
        )]);
        let g = GoogleVision::new("KEY", mock.clone());
        let preds = g.classify(&input()).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!((preds[0].label.as_str(), preds[0].confidence), ("nurse", Some(0.93)));
        let req = &mock.seen.lock().unwrap()[0];
        assert!(req.url.ends_with("images:annotate?key=KEY"));
        let body: Value = serde_json::from_slice(&req.body).unwrap();
        assert_eq!(body["requests"][0]["image"]["content"], "AAEC");
        assert_eq!(body["requests"][0]["features"][0]["type"], "LABEL_DETECTION");
        // No labels at all is a valid answer.
        assert!(GoogleVision::parse(&json!({"responses":[{}]})).unwrap().is_empty());
    }

    #[test]
    fn amazon_signs_and_scales_confidence() {
        let mock = Mock::with(vec![ok(r#"{"Labels":[{"Name":"Person","Confidence":99.5}]}"#)]);
        let creds = Credentials {
            access_key_id: "AK".into(),
            secret_access_key: "SK".into(),
            session_token: None,
        };
        let a = AmazonRekognition::new(creds, "eu-west-1", mock.clone());
        let preds = a.classify(&input()).unwrap();
        assert_eq!(preds[0].label, "person");
        assert!((preds[0].confidence.unwrap() - 0.995).abs() < 1e-12);
        let req = &mock.seen.lock().unwrap()[0];
        assert_eq!(req.url, "https://rekognition.eu-west-1.amazonaws.com/");
        let auth = &req.headers.iter().find(|(k, _)| k == "authorization").unwrap().1;
        assert!(auth.starts_with("AWS4-HMAC-SHA256 Credential=AK/"));
        assert!(auth.contains("/eu-west-1/rekognition/aws4_request"));
    }

    #[test]
    fn amazon_throttling_body() {
        let mock = Mock::with(vec![status(400, r#"{"__type":"ThrottlingException"}"#)]);
        let creds = Credentials {
            access_key_id: "AK".into(),
            secret_access_key: "SK".into(),
            session_token: None,
        };
        let a = AmazonRekognition::new(creds, "us-east-1", mock);
        assert!(matches!(a.classify(&input()), Err(ProbeError::Throttled { .. })));
    }

    #[test]
    fn ibm_multipart_and_classes() {
        let mock = Mock::with(vec![ok(
            r#"{"images":[{"classifiers":[{"classes":[{"class":"scientist","score":0.81},{"class":"lab coat","score":0.6}]}]}]}"#,
        )]);
        let w = IbmWatson::new("KEY", "https://example.test/instances/1/", mock.clone());
        let preds = w.classify(&input()).unwrap();
        assert_eq!(preds[1].label, "lab coat");
        let req = &mock.seen.lock().unwrap()[0];
        assert_eq!(req.url, "https://example.test/instances/1/v3/classify?version=2018-03-19");
        assert!(req.headers.contains(&("Authorization".into(), format!("Basic {}", b64(b"apikey:KEY")))));
        let body = String::from_utf8_lossy(&req.body);
        assert!(body.contains("name=\"images_file\""));
        assert!(body.ends_with(&format!("--{BOUNDARY}--\r\n")));
    }

    #[test]
    fn clarifai_status_handling() {
        let mock = Mock::with(vec![
            ok(r#"{"status":{"code":10000},"outputs":[{"data":{"concepts":[{"name":"Doctor","value":0.88}]}}]}"#),
            ok(r#"{"status":{"code":21200,"description":"Model does not exist"}}"#),
        ]);
        let c = Clarifai::new("PAT", mock.clone());
        assert_eq!(c.classify(&input()).unwrap()[0].label, "doctor");
        assert!(matches!(c.classify(&input()), Err(ProbeError::Protocol(_))));
        let req = &mock.seen.lock().unwrap()[0];
        assert!(req.url.ends_with("/v2/users/clarifai/apps/main/models/general-image-recognition/outputs"));
        assert!(req.headers.contains(&("Authorization".into(), "Key PAT".into())));
    }

    #[test]
    fn status_mapping() {
        let g = |resp| GoogleVision::new("K", Mock::with(vec![resp])).classify(&input());
        assert_eq!(
            g(status(429, "slow down")),
            Err(ProbeError::Throttled {
                retry_after: Some(Duration::from_secs(7))
            })
        );
        assert!(matches!(g(status(503, "")), Err(ProbeError::Transport(_))));
        assert!(matches!(g(status(403, "")), Err(ProbeError::Config(_))));
        assert!(matches!(g(status(404, "")), Err(ProbeError::Protocol(_))));
        assert!(matches!(g(ok("{not json")), Err(ProbeError::Protocol(_))));
        assert!(matches!(g(ok(r#"{"responses":[{"error":{"code":8}}]}"#)), Err(ProbeError::Throttled { .. })));
    }

    #[test]
    fn retries_transport_failures_with_backoff() {
        let mock = Mock::with(vec![
            status(503, ""),
            Err(ProbeError::Transport("reset".into())),
            ok(r#"{"responses":[{"labelAnnotations":[]}]}"#),
        ]);
        let g = GoogleVision::new("K", mock.clone());
        let clock = VirtualClock::new();
        let mut calls = 0;
        let out = classify_with_retry(&g, &input(), &RetryPolicy::default(), &clock, || calls += 1).unwrap();
        assert!(out.is_empty());
        assert_eq!(calls, 3);
        assert_eq!(clock.sleeps(), vec![Duration::from_millis(250), Duration::from_millis(500)]);

        let failing = Mock::with((0..5).map(|_| status(500, "")).collect());
        let g = GoogleVision::new("K", failing);
        let err = classify_with_retry(&g, &input(), &RetryPolicy::default(), &clock, || {}).unwrap_err();
        assert!(matches!(err, ProbeError::Exhausted { attempts: 5, .. }));

        let auth = Mock::with(vec![status(401, "")]);
        let g = GoogleVision::new("K", auth);
        assert!(matches!(
            classify_with_retry(&g, &input(), &RetryPolicy::default(), &clock, || {}),
            Err(ProbeError::Config(_))
        ));
    }

    #[test]
    fn unknown_backend_name() {
        assert!(from_env("bing", Mock::with(vec![])).is_err());
    }
}
