//! Remote diffusion endpoint client.
//!
//! Wire contract: POST a JSON [`AugmentRequest`] (image as base64 16-bit
//! lossless PNG, or a raw latent vector), receive a JSON [`AugmentResponse`]
//! with the augmented image and a backend version string. Transport failures
//! are retried with exponential backoff (3 attempts by default); exhausting
//! the budget surfaces as [`Error::BackendUnreachable`], which the
//! augmentation stage downgrades to a no-augmentation round.
//!
//! The transport itself is a trait so the retry logic is testable without a
//! server; the production implementation is a minimal HTTP/1.1 POST over
//! `TcpStream` (the endpoint is expected on a trusted network).

use super::{DiffusionModel, DiffusionSettings, Latent};
use crate::error::{Error, Result};
use crate::imgio;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

/// One augmentation request.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentRequest {
    /// Base64 of a lossless (16-bit PNG) encoding of the source image.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
    /// Raw latent values, for backends that accept latents directly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

/// One augmentation response.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentResponse {
    pub image_b64: String,
    pub backend_version: String,
}

#[derive(Debug)]
pub enum TransportError {
    /// Connection refused, DNS failure, timeout: worth retrying.
    Unreachable(String),
    /// The endpoint answered but the exchange was malformed.
    Protocol(String),
}

/// Sends request bytes, returns response body bytes.
pub trait Transport {
    fn call(
        &self,
        endpoint: &str,
        body: &[u8],
        timeout: Duration,
    ) -> std::result::Result<Vec<u8>, TransportError>;
}

/// Minimal HTTP/1.1 POST client over a plain TCP stream.
pub struct HttpTransport;

fn parse_endpoint(endpoint: &str) -> std::result::Result<(String, String), TransportError> {
    let rest = endpoint.strip_prefix("http://").ok_or_else(|| {
        TransportError::Protocol(format!(
            "endpoint must start with http:// (got `{endpoint}`)"
        ))
    })?;
    let (host_port, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    let host_port = if host_port.contains(':') {
        host_port.to_string()
    } else {
        format!("{host_port}:80")
    };
    Ok((host_port, path.to_string()))
}

impl Transport for HttpTransport {
    fn call(
        &self,
        endpoint: &str,
        body: &[u8],
        timeout: Duration,
    ) -> std::result::Result<Vec<u8>, TransportError> {
        let (host_port, path) = parse_endpoint(endpoint)?;
        let addr = host_port
            .parse()
            .map_err(|e| TransportError::Protocol(format!("bad address `{host_port}`: {e}")))?;
        let mut stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| TransportError::Unreachable(format!("connect {host_port}: {e}")))?;
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_write_timeout(Some(timeout)))
            .map_err(|e| TransportError::Unreachable(format!("socket options: {e}")))?;
        let header = format!(
            "POST {path} HTTP/1.1\r\nHost: {host_port}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            body.len()
        );
        stream
            .write_all(header.as_bytes())
            .and_then(|_| stream.write_all(body))
            .map_err(|e| TransportError::Unreachable(format!("send: {e}")))?;
        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|e| TransportError::Unreachable(format!("recv: {e}")))?;
        let text_end = raw
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .ok_or_else(|| TransportError::Protocol("no header/body separator".into()))?;
        let head = String::from_utf8_lossy(&raw[..text_end]);
        let status_line = head.lines().next().unwrap_or_default();
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TransportError::Protocol(format!("bad status line `{status_line}`")))?;
        if status != 200 {
            return Err(TransportError::Protocol(format!(
                "endpoint returned status {status}"
            )));
        }
        Ok(raw[text_end + 4..].to_vec())
    }
}

/// Retry budget and pacing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 250,
            timeout_ms: 10_000,
        }
    }
}

/// Diffusion backend living behind a remote endpoint.
pub struct RemoteDiffusion<T: Transport> {
    endpoint: String,
    image_shape: (usize, usize, usize),
    transport: T,
    retry: RetryPolicy,
}

impl RemoteDiffusion<HttpTransport> {
    pub fn new(endpoint: &str, image_shape: (usize, usize, usize), retry: RetryPolicy) -> Self {
        RemoteDiffusion {
            endpoint: endpoint.to_string(),
            image_shape,
            transport: HttpTransport,
            retry,
        }
    }
}

impl<T: Transport> RemoteDiffusion<T> {
    pub fn with_transport(
        endpoint: &str,
        image_shape: (usize, usize, usize),
        transport: T,
        retry: RetryPolicy,
    ) -> Self {
        RemoteDiffusion {
            endpoint: endpoint.to_string(),
            image_shape,
            transport,
            retry,
        }
    }

    fn call_with_retries(&self, body: &[u8]) -> Result<Vec<u8>> {
        let timeout = Duration::from_millis(self.retry.timeout_ms);
        let mut backoff = Duration::from_millis(self.retry.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 0..self.retry.attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.transport.call(&self.endpoint, body, timeout) {
                Ok(resp) => return Ok(resp),
                Err(TransportError::Unreachable(msg)) => {
                    log::warn!(
                        "diffusion endpoint unreachable (attempt {}/{}): {msg}",
                        attempt + 1,
                        self.retry.attempts
                    );
                    last = msg;
                }
                Err(TransportError::Protocol(msg)) => {
                    return Err(Error::Backend(format!("endpoint protocol error: {msg}")));
                }
            }
        }
        Err(Error::BackendUnreachable {
            attempts: self.retry.attempts,
            detail: last,
        })
    }
}

impl<T: Transport> DiffusionModel for RemoteDiffusion<T> {
    fn backend_kind(&self) -> &'static str {
        "remote"
    }

    fn version(&self) -> String {
        format!("remote@{}", self.endpoint)
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    /// The remote backend owns its encoder, so the latent is the lossless
    /// image itself.
    fn encode(&self, image: &Array3<f64>) -> Result<Latent> {
        if image.dim() != self.image_shape {
            return Err(Error::shape(
                "remote encode",
                format!("{:?}", self.image_shape),
                format!("{:?}", image.dim()),
            ));
        }
        Ok(Latent {
            values: image.clone().into_dyn(),
        })
    }

    fn generate(&self, latent: &Latent, settings: &DiffusionSettings, seed: u64) -> Result<Array3<f64>> {
        let image = latent
            .values
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| Error::Backend("remote latent is not an image".into()))?;
        let req = AugmentRequest {
            image_b64: Some(B64.encode(imgio::encode_png16(&image)?)),
            latent: None,
            steps: settings.steps,
            guidance_scale: settings.guidance_scale,
            seed,
        };
        let body = serde_json::to_vec(&req)
            .map_err(|e| Error::Backend(format!("request encode: {e}")))?;
        let resp_bytes = self.call_with_retries(&body)?;
        let resp: AugmentResponse = serde_json::from_slice(&resp_bytes)
            .map_err(|e| Error::Backend(format!("response decode: {e}")))?;
        let png = B64
            .decode(resp.image_b64.as_bytes())
            .map_err(|e| Error::Backend(format!("response base64: {e}")))?;
        let out = imgio::decode_png16(&png)?;
        if out.dim() != self.image_shape {
            return Err(Error::Backend(format!(
                "endpoint returned shape {:?}, expected {:?}",
                out.dim(),
                self.image_shape
            )));
        }
        Ok(out)
    }
}
