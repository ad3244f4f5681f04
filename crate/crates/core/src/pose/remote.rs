//! HTTP client for an external pose/depth inference service.
//!
//! Wire protocol, JSON over plain HTTP:
//!
//! * `POST /v1/estimate` with `{"image_a": <base64 PNG>, "image_b": <base64 PNG>}`
//!   returns `{"rotation_wxyz": [w,x,y,z], "translation": [x,y,z],
//!   "confidence": {"dims": [h,w], "data": [...]},
//!   "pointmap": {"dims": [h,w,3], "data": [...]}}`.
//! * `POST /v1/depth` with `{"image": <base64 PNG>}` returns
//!   `{"depth": {"dims": [h,w], "data": [...]}}`.
//!
//! Arrays are row-major.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::RgbImage;
use log::warn;
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    ConfidenceMap, DepthEstimator, EstimatorError, PointMap, PoseEstimate, PoseEstimator,
    RelativePose, ScaleState, ESTIMATOR_QUAT_TOL,
};
use crate::projection::PerspectiveView;
use crate::raster::{encode_png, Grid};
use crate::scale::DepthMap;

const MAX_RESPONSE_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub timeout_s: f64,
    pub retries: u32,
    /// Delay before the first retry; doubles on each subsequent one.
    pub backoff_ms: u64,
    pub pool_size: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_s: 60.0,
            retries: 3,
            backoff_ms: 500,
            pool_size: 4,
        }
    }
}

/// Row-major array with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl WireArray {
    fn expect_dims(&self, name: &str, dims: &[usize]) -> Result<(), EstimatorError> {
        if self.dims != dims {
            return Err(EstimatorError::Malformed(format!(
                "{name} dims {:?}, expected {dims:?}",
                self.dims
            )));
        }
        if self.data.len() != dims.iter().product::<usize>() {
            return Err(EstimatorError::Malformed(format!(
                "{name} has {} values for dims {dims:?}",
                self.data.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRequest {
    pub image_a: String,
    pub image_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResponse {
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
    pub confidence: WireArray,
    pub pointmap: WireArray,
}

impl EstimateResponse {
    /// Converts to a [`PoseEstimate`] for views of `dims`, checking shapes
    /// and value invariants.
    pub fn into_estimate(self, dims: (usize, usize)) -> Result<PoseEstimate, EstimatorError> {
        let (h, w) = dims;
        self.confidence.expect_dims("confidence", &[h, w])?;
        self.pointmap.expect_dims("pointmap", &[h, w, 3])?;
        let pose = RelativePose::from_wxyz(
            self.rotation_wxyz,
            self.translation,
            ScaleState::Raw,
            ESTIMATOR_QUAT_TOL,
        )?;
        let confidence = ConfidenceMap::new(Grid::from_vec(h, w, self.confidence.data).expect("checked dims"))?;
        let points = self
            .pointmap
            .data
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        let pointmap = PointMap::new(Grid::from_vec(h, w, points).expect("checked dims"))?;
        let est = PoseEstimate {
            pose,
            confidence,
            pointmap,
        };
        est.validate(dims)?;
        Ok(est)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRequest {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthResponse {
    pub depth: WireArray,
}

impl DepthResponse {
    pub fn into_depth(self, dims: (usize, usize)) -> Result<DepthMap, EstimatorError> {
        self.depth.expect_dims("depth", &[dims.0, dims.1])?;
        let grid = Grid::from_vec(dims.0, dims.1, self.depth.data).expect("checked dims");
        DepthMap::new(grid).map_err(|e| EstimatorError::InvariantViolation(e.to_string()))
    }
}

fn encode_image(image: &RgbImage) -> Result<String, EstimatorError> {
    encode_png(image)
        .map(|png| BASE64.encode(png))
        .map_err(|e| EstimatorError::Unavailable(format!("cannot encode view: {e}")))
}

fn map_transport(err: ureq::Error) -> EstimatorError {
    match err {
        ureq::Error::Timeout(_) => EstimatorError::Timeout,
        ureq::Error::StatusCode(code) => EstimatorError::Status(code),
        ureq::Error::BodyExceedsLimit(n) => EstimatorError::Malformed(format!("response exceeds {n} bytes")),
        ureq::Error::BadUri(uri) => EstimatorError::Unavailable(format!("bad endpoint URI {uri}")),
        other => EstimatorError::Transport(other.to_string()),
    }
}

/// Pose and depth estimator backed by a remote inference service.
///
/// Safe to share across workers; idle connections are pooled up to
/// `pool_size` per host.
#[derive(Debug, Clone)]
pub struct RemoteEstimator {
    agent: ureq::Agent,
    cfg: RemoteConfig,
}

impl RemoteEstimator {
    pub fn new(cfg: RemoteConfig) -> Result<Self, EstimatorError> {
        if cfg.endpoint.is_empty() {
            return Err(EstimatorError::Unavailable("no endpoint configured".into()));
        }
        if !(cfg.timeout_s.is_finite() && cfg.timeout_s > 0.0) {
            return Err(EstimatorError::Unavailable(format!("invalid timeout {}", cfg.timeout_s)));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .max_idle_connections(cfg.pool_size.max(1))
            .max_idle_connections_per_host(cfg.pool_size.max(1))
            .build()
            .into();
        Ok(Self { agent, cfg })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
    ) -> Result<Resp, EstimatorError> {
        let payload = serde_json::to_vec(body).expect("request types always serialize");
        let mut resp = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(&payload[..])
            .map_err(map_transport)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(EstimatorError::Status(status));
        }
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_vec()
            .map_err(map_transport)?;
        serde_json::from_slice(&bytes).map_err(|e| EstimatorError::Malformed(e.to_string()))
    }

    /// POSTs `body` to `path`, retrying transient failures with exponential
    /// backoff.
    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, EstimatorError> {
        let url = format!("{}{}", self.cfg.endpoint.trim_end_matches('/'), path);
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body) {
                Err(e) if e.is_retryable() && attempt < self.cfg.retries => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    warn!("{url}: {e}; retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl PoseEstimator for RemoteEstimator {
    fn estimate(&self, a: &PerspectiveView, b: &PerspectiveView) -> Result<PoseEstimate, EstimatorError> {
        let dims = (a.height(), a.width());
        if (b.height(), b.width()) != dims {
            return Err(EstimatorError::DimensionMismatch {
                a: dims,
                b: (b.height(), b.width()),
            });
        }
        let req = EstimateRequest {
            image_a: encode_image(&a.image)?,
            image_b: encode_image(&b.image)?,
        };
        let resp: EstimateResponse = self.post("/v1/estimate", &req)?;
        resp.into_estimate(dims)
    }
}

impl DepthEstimator for RemoteEstimator {
    fn estimate_depth(&self, view: &PerspectiveView) -> Result<DepthMap, EstimatorError> {
        let req = DepthRequest {
            image: encode_image(&view.image)?,
        };
        let resp: DepthResponse = self.post("/v1/depth", &req)?;
        resp.into_depth((view.height(), view.width()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::checked_estimate;
    use crate::projection::{FrameId, ViewAngles};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal HTTP/1.1 server answering each request with the next
    /// `(status, body)` from `replies` (the last one repeats).
    fn stub(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                loop {
                    let mut len = 0usize;
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    loop {
                        line.clear();
                        reader.read_line(&mut line).unwrap();
                        let lower = line.to_ascii_lowercase();
                        if let Some(v) = lower.strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap();
                        }
                        if line == "\r\n" {
                            break;
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    let (status, reply) = &replies[n.min(replies.len() - 1)];
                    let head = format!(
                        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
                        reply.len()
                    );
                    stream.write_all(head.as_bytes()).unwrap();
                    stream.write_all(reply.as_bytes()).unwrap();
                }
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn client(endpoint: String) -> RemoteEstimator {
        RemoteEstimator::new(RemoteConfig {
            endpoint,
            timeout_s: 5.0,
            backoff_ms: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn views() -> (PerspectiveView, PerspectiveView) {
        let v = PerspectiveView {
            source: FrameId::new("v", 0),
            angles: ViewAngles::new(0.0, 0.0, 1.5).unwrap(),
            image: RgbImage::from_pixel(2, 1, image::Rgb([10, 20, 30])),
        };
        let mut w = v.clone();
        w.source.timestamp_ms = 1000;
        (v, w)
    }

    fn payload(q: [f64; 4], conf: [f64; 2]) -> EstimateResponse {
        EstimateResponse {
            rotation_wxyz: q,
            translation: [0.5, -1.0, 2.0],
            confidence: WireArray {
                dims: vec![1, 2],
                data: conf.to_vec(),
            },
            pointmap: WireArray {
                dims: vec![1, 2, 3],
                data: vec![0.1, 0.2, 3.0, -0.1, 0.2, 4.0],
            },
        }
    }

    #[test]
    fn parses_valid_payload() {
        let q = [0.5f64.sqrt(), 0.0, 0.5f64.sqrt(), 0.0];
        let body = serde_json::to_string(&payload(q, [1.0, 7.5])).unwrap();
        let (url, _) = stub(vec![(200, body)]);
        let (a, b) = views();
        let est = checked_estimate(&client(url), &a, &b).unwrap();
        assert_eq!(est.pose.rotation_wxyz(), q);
        assert_eq!(est.pose.translation, Vector3::new(0.5, -1.0, 2.0));
        assert_eq!(est.confidence.grid().as_slice(), &[1.0, 7.5]);
        assert_eq!(*est.pointmap.grid().get(0, 1), Vector3::new(-0.1, 0.2, 4.0));
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let body = serde_json::to_string(&payload([0.5, 0.0, 0.0, 0.0], [1.0, 1.0])).unwrap();
        let (url, _) = stub(vec![(200, body)]);
        let (a, b) = views();
        let err = client(url).estimate(&a, &b).unwrap_err();
        assert!(matches!(err, EstimatorError::InvariantViolation(_)), "{err}");
    }

    #[test]
    fn rejects_negative_confidence() {
        let body = serde_json::to_string(&payload([1.0, 0.0, 0.0, 0.0], [1.0, -2.0])).unwrap();
        let (url, _) = stub(vec![(200, body)]);
        let (a, b) = views();
        let err = client(url).estimate(&a, &b).unwrap_err();
        assert!(matches!(err, EstimatorError::InvariantViolation(_)), "{err}");
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let body = serde_json::to_string(&payload([1.0, 0.0, 0.0, 0.0], [1.0, 1.0])).unwrap();
        let (url, hits) = stub(vec![(503, "{}".into()), (500, "{}".into()), (200, body)]);
        let (a, b) = views();
        assert!(client(url).estimate(&a, &b).is_ok());
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_retry_budget() {
        let (url, hits) = stub(vec![(503, "{}".into())]);
        let (a, b) = views();
        assert_eq!(client(url).estimate(&a, &b).unwrap_err(), EstimatorError::Status(503));
        assert_eq!(hits.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn client_errors_and_garbage_are_fatal() {
        let (url, hits) = stub(vec![(400, "{}".into())]);
        let (a, b) = views();
        assert_eq!(client(url).estimate(&a, &b).unwrap_err(), EstimatorError::Status(400));
        assert_eq!(hits.load(Ordering::SeqCst), 1);

        let (url, hits) = stub(vec![(200, "{\"rotation_wxyz\": [1".into())]);
        assert!(matches!(client(url).estimate(&a, &b), Err(EstimatorError::Malformed(_))));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn wrong_dims_are_malformed() {
        let mut p = payload([1.0, 0.0, 0.0, 0.0], [1.0, 1.0]);
        p.confidence.dims = vec![2, 1];
        let (url, _) = stub(vec![(200, serde_json::to_string(&p).unwrap())]);
        let (a, b) = views();
        assert!(matches!(client(url).estimate(&a, &b), Err(EstimatorError::Malformed(_))));
    }

    #[test]
    fn depth_round_trip() {
        let body = r#"{"depth": {"dims": [1, 2], "data": [2.5, 3.0]}}"#.to_string();
        let (url, _) = stub(vec![(200, body)]);
        let (a, _) = views();
        let d = client(url).estimate_depth(&a).unwrap();
        assert_eq!(d.grid().as_slice(), &[2.5, 3.0]);
    }

    #[test]
    fn unreachable_endpoint_is_external_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let (a, b) = views();
        let err = client(format!("http://127.0.0.1:{port}")).estimate(&a, &b).unwrap_err();
        assert!(err.is_external(), "{err:?}");
    }
}
