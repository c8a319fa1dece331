//! Iterative intention inference against a pluggable vision-language client.
//!
//! Frames are sampled uniformly from the observed video and sent to the
//! client one at a time, in order, with every previously inferred intention
//! included as context. The loop is strictly sequential: request `t` cannot
//! be issued before response `t-1` arrived, because it embeds it.
//!
//! The client is external by design. A process speaking the length-prefixed
//! wire protocol (see [`SocketVlmClient`]) can serve real models; tests and
//! the hermetic pipeline use the deterministic mock from the fixtures module.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{IcvlError, Result};
use crate::matrix::EmbeddingMatrix;

/// The intention prompt sent with every frame.
pub const DEFAULT_INTENTION_PROMPT: &str = "What does the person want to do?";

/// Opaque handle to one sampled video frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
    /// Opaque handle passed through to the client (a path, URL, ...).
    pub uri: String,
}

/// Full record of one inference loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionTrace {
    pub per_frame: Vec<(FrameRef, String)>,
    pub final_intention: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VlmRequest {
    pub prompt: String,
    pub frame: FrameRef,
    pub context: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VlmResponse {
    pub text: String,
    pub latency: Duration,
    pub status: String,
    /// Echo of the request context, set by debugging clients (the mock).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub debug_context: Option<Vec<String>>,
}

/// Client-side failure classification; transports retry transient failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VlmError {
    Transient(String),
    Permanent(String),
}

impl std::fmt::Display for VlmError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VlmError::Transient(m) => write!(f, "transient: {m}"),
            VlmError::Permanent(m) => write!(f, "permanent: {m}"),
        }
    }
}

pub trait VlmClient {
    fn infer(&mut self, request: &VlmRequest) -> std::result::Result<VlmResponse, VlmError>;
}

/// Uniform midpoint sampling: `floor((i + 0.5) * total / n)` for `i in 0..n`.
pub fn sample_frames(total_frames: usize, n_frm: usize) -> Result<Vec<usize>> {
    if n_frm == 0 {
        return Err(IcvlError::data("n_frm must be at least 1"));
    }
    if n_frm > total_frames {
        return Err(IcvlError::data(format!(
            "cannot sample {n_frm} frames from {total_frames}"
        )));
    }
    Ok((0..n_frm)
        .map(|i| ((i as f64 + 0.5) * total_frames as f64 / n_frm as f64).floor() as usize)
        .collect())
}

/// Retry budget for transient client failures; delay doubles per attempt.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests and in-process mocks.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    fn delay_for(&self, failed_attempts: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(failed_attempts.saturating_sub(1))
    }
}

/// Run the sequential inference loop over `frames`.
///
/// Exactly one request per frame is issued, in chronological order; request
/// `t` carries the intentions of frames `1..t-1` as context. Transient client
/// failures are retried up to `retry.max_attempts` with exponential backoff;
/// a permanent failure or an exhausted budget aborts with a transport error
/// carrying the partial trace. An empty response text is a protocol error.
pub fn infer_intentions(
    frames: &[FrameRef],
    client: &mut dyn VlmClient,
    prompt: &str,
    retry: &RetryPolicy,
) -> Result<IntentionTrace> {
    if frames.is_empty() {
        return Err(IcvlError::data("no frames to infer intentions from"));
    }
    if frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
        return Err(IcvlError::data(
            "frame indices must be strictly increasing",
        ));
    }
    if retry.max_attempts == 0 {
        return Err(IcvlError::config("retry budget must allow one attempt"));
    }

    let mut per_frame: Vec<(FrameRef, String)> = Vec::with_capacity(frames.len());
    for frame in frames {
        let request = VlmRequest {
            prompt: prompt.to_string(),
            frame: frame.clone(),
            context: per_frame.iter().map(|(_, text)| text.clone()).collect(),
        };
        let mut failures = 0u32;
        let response = loop {
            match client.infer(&request) {
                Ok(response) => break response,
                Err(VlmError::Transient(msg)) => {
                    failures += 1;
                    if failures >= retry.max_attempts {
                        return Err(IcvlError::Transport {
                            message: format!(
                                "frame {} failed after {failures} attempts: {msg}",
                                frame.frame_index
                            ),
                            partial: per_frame,
                        });
                    }
                    std::thread::sleep(retry.delay_for(failures));
                }
                Err(VlmError::Permanent(msg)) => {
                    return Err(IcvlError::Transport {
                        message: format!("frame {} failed permanently: {msg}", frame.frame_index),
                        partial: per_frame,
                    });
                }
            }
        };
        if response.text.trim().is_empty() {
            return Err(IcvlError::protocol(format!(
                "empty intention text for frame {}",
                frame.frame_index
            )));
        }
        per_frame.push((frame.clone(), response.text));
    }
    let final_intention = per_frame.last().expect("nonempty").1.clone();
    Ok(IntentionTrace {
        per_frame,
        final_intention,
    })
}

/// Text embedding backends; the built-in fallback keeps the pipeline hermetic.
pub trait TextEncoder {
    fn dims(&self) -> usize;
    /// One row per word; rows must be deterministic for identical text.
    fn embed(&self, text: &str) -> Result<EmbeddingMatrix>;
}

/// Intention embedding padded or truncated to a fixed row count.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub matrix: EmbeddingMatrix,
    /// Rows that came from actual words before padding (capped at `seq`).
    pub used_rows: usize,
}

/// Encode and normalize to exactly `seq` rows. Shorter texts are padded by
/// cycling the word rows from the start, which keeps every row unit-norm.
pub fn embed_intention(
    text: &str,
    encoder: &dyn TextEncoder,
    seq: usize,
) -> Result<EncodedText> {
    if text.trim().is_empty() {
        return Err(IcvlError::data("cannot embed empty intention text"));
    }
    if seq == 0 {
        return Err(IcvlError::config("intention sequence length must be >= 1"));
    }
    let raw = encoder.embed(text)?;
    if raw.rows() == 0 {
        return Err(IcvlError::data("encoder produced no rows"));
    }
    let mut rows = Vec::with_capacity(seq);
    for r in 0..seq {
        rows.push(raw.row(r % raw.rows()).to_vec());
    }
    Ok(EncodedText {
        matrix: EmbeddingMatrix::from_rows(&rows)?,
        used_rows: raw.rows().min(seq),
    })
}

/// Seeded character-trigram hashing encoder: one unit-norm row per word.
#[derive(Debug, Clone)]
pub struct HashNgramEncoder {
    pub dims: usize,
    pub seed: u64,
}

impl HashNgramEncoder {
    pub fn new(dims: usize, seed: u64) -> Self {
        HashNgramEncoder { dims, seed }
    }
}

fn mix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

fn hash_gram(seed: u64, gram: &[char]) -> u64 {
    let mut h = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for &c in gram {
        h = mix64(h ^ c as u64);
    }
    h
}

impl TextEncoder for HashNgramEncoder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, text: &str) -> Result<EmbeddingMatrix> {
        if text.trim().is_empty() {
            return Err(IcvlError::data("cannot embed empty text"));
        }
        let mut rows = Vec::new();
        for word in text.split_whitespace() {
            let mut padded: Vec<char> = Vec::with_capacity(word.len() + 2);
            padded.push('^');
            padded.extend(word.to_lowercase().chars());
            padded.push('$');
            let mut row = vec![0.0f64; self.dims];
            for gram in padded.windows(3) {
                let h = hash_gram(self.seed, gram);
                let idx = (h % self.dims as u64) as usize;
                let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
                row[idx] += sign;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut row {
                    *v /= norm;
                }
            } else {
                row[0] = 1.0;
            }
            rows.push(row);
        }
        EmbeddingMatrix::from_rows(&rows)
    }
}

#[derive(Serialize, Deserialize)]
struct WireRequest {
    prompt: String,
    frame_uri: String,
    context: Vec<String>,
}

/// Client for the external VLM wire protocol: the request is a u32
/// little-endian length followed by a UTF-8 JSON document
/// `{prompt, frame_uri, context}`; the response is a u32 little-endian length
/// followed by the UTF-8 intention text.
pub struct SocketVlmClient {
    pub endpoint: String,
    pub timeout: Duration,
}

impl SocketVlmClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        SocketVlmClient {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
        }
    }
}

impl VlmClient for SocketVlmClient {
    fn infer(&mut self, request: &VlmRequest) -> std::result::Result<VlmResponse, VlmError> {
        let started = std::time::Instant::now();
        let doc = WireRequest {
            prompt: request.prompt.clone(),
            frame_uri: request.frame.uri.clone(),
            context: request.context.clone(),
        };
        let payload =
            serde_json::to_vec(&doc).map_err(|e| VlmError::Permanent(format!("encode: {e}")))?;

        let mut stream = TcpStream::connect(&self.endpoint)
            .map_err(|e| VlmError::Transient(format!("connect {}: {e}", self.endpoint)))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| VlmError::Transient(e.to_string()))?;
        stream
            .write_all(&(payload.len() as u32).to_le_bytes())
            .and_then(|_| stream.write_all(&payload))
            .map_err(|e| VlmError::Transient(format!("send: {e}")))?;

        let mut len_buf = [0u8; 4];
        stream
            .read_exact(&mut len_buf)
            .map_err(|e| VlmError::Transient(format!("recv length: {e}")))?;
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut text_buf = vec![0u8; len];
        stream
            .read_exact(&mut text_buf)
            .map_err(|e| VlmError::Transient(format!("recv body: {e}")))?;
        let text = String::from_utf8(text_buf)
            .map_err(|_| VlmError::Permanent("response is not UTF-8".into()))?;
        Ok(VlmResponse {
            text,
            latency: started.elapsed(),
            status: "ok".into(),
            debug_context: None,
        })
    }
}
