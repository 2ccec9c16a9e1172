//! Blocking JSON-over-HTTP clients for remote model services.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::rle;
use super::wire::{
    image_from_base64, image_to_base64, BackgroundReply, BackgroundRequest, CaptionReply,
    CaptionRequest, DetectReply, DetectRequest, ErrorReply, SegmentReply, SegmentRequest,
};
use super::{
    BackendError, BackendIdentity, BackendRole, BackgroundGenerator, Captioner, DetectionResponse,
    Detector, SegmentationResponse, Segmenter,
};
use crate::raster::{BoundingBox, ImageBuffer};

const MAX_BODY_BYTES: u64 = 256 * 1024 * 1024;

/// Per-request timeout and retry schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    pub retries: u32,
    /// Delay before retry `n` is `backoff_ms * 2^n`.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            retries: 2,
            backoff_ms: 250,
        }
    }
}

/// One role's endpoint: `POST {base_url}{role path}`.
#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    agent: ureq::Agent,
    url: String,
    role: BackendRole,
    policy: RetryPolicy,
}

impl HttpEndpoint {
    pub fn new(role: BackendRole, base_url: &str, policy: RetryPolicy) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(policy.timeout_ms)))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            url: format!("{}{}", base_url.trim_end_matches('/'), role.path()),
            role,
            policy,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Posts `request`; retries transport failures, 429 and 5xx with
    /// exponential backoff. Other non-2xx statuses fail immediately.
    pub fn call<Req: Serialize, Rep: DeserializeOwned>(
        &self,
        request: &Req,
    ) -> Result<Rep, BackendError> {
        let body = serde_json::to_string(request).map_err(|e| BackendError::InvalidRequest {
            role: self.role,
            detail: e.to_string(),
        })?;
        let mut last = String::new();
        for attempt in 0..=self.policy.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(
                    self.policy.backoff_ms << (attempt - 1).min(16),
                ));
            }
            let result = self
                .agent
                .post(&self.url)
                .header("content-type", "application/json")
                .send(body.as_str());
            let mut response = match result {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{} attempt {}: {e}", self.url, attempt + 1);
                    last = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            let text = match response
                .body_mut()
                .with_config()
                .limit(MAX_BODY_BYTES)
                .read_to_string()
            {
                Ok(t) => t,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if (200..300).contains(&status) {
                return serde_json::from_str(&text)
                    .map_err(|e| BackendError::malformed(self.role, e));
            }
            let detail = serde_json::from_str::<ErrorReply>(&text).map_or(text, |r| r.error);
            if status == 429 || status >= 500 {
                log::warn!(
                    "{} attempt {}: HTTP {status}: {detail}",
                    self.url,
                    attempt + 1
                );
                last = format!("HTTP {status}: {detail}");
                continue;
            }
            return Err(BackendError::Status {
                role: self.role,
                status,
                detail,
            });
        }
        Err(BackendError::Unreachable {
            role: self.role,
            detail: format!(
                "{} after {} attempts: {last}",
                self.url,
                self.policy.retries + 1
            ),
        })
    }
}

fn encode_image(role: BackendRole, image: &ImageBuffer) -> Result<String, BackendError> {
    image_to_base64(image).map_err(|e| BackendError::InvalidRequest {
        role,
        detail: e.to_string(),
    })
}

macro_rules! http_backend {
    ($name:ident, $role:expr) => {
        #[derive(Debug, Clone)]
        pub struct $name {
            endpoint: HttpEndpoint,
            identity: BackendIdentity,
        }

        impl $name {
            /// `name` and `version` describe the served model and are recorded in manifests.
            pub fn new(base_url: &str, name: &str, version: &str, policy: RetryPolicy) -> Self {
                Self {
                    endpoint: HttpEndpoint::new($role, base_url, policy),
                    identity: BackendIdentity::new($role, name, version, base_url),
                }
            }
        }
    };
}

http_backend!(HttpDetector, BackendRole::Detector);
http_backend!(HttpSegmenter, BackendRole::Segmenter);
http_backend!(HttpCaptioner, BackendRole::Captioner);
http_backend!(HttpBackgroundGenerator, BackendRole::BackgroundGenerator);

impl Detector for HttpDetector {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn detect(
        &self,
        image: &ImageBuffer,
        text_prompt: &str,
    ) -> Result<DetectionResponse, BackendError> {
        let reply: DetectReply = self.endpoint.call(&DetectRequest {
            image: encode_image(BackendRole::Detector, image)?,
            text_prompt: text_prompt.to_owned(),
        })?;
        Ok(DetectionResponse { boxes: reply.boxes })
    }
}

impl Segmenter for HttpSegmenter {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn segment(
        &self,
        image: &ImageBuffer,
        bbox: &BoundingBox,
    ) -> Result<SegmentationResponse, BackendError> {
        let reply: SegmentReply = self.endpoint.call(&SegmentRequest {
            image: encode_image(BackendRole::Segmenter, image)?,
            bbox: *bbox,
        })?;
        match rle::decode(&reply.mask) {
            Ok(mask) => Ok(SegmentationResponse { mask }),
            Err(rle::RleError::Empty) => Err(BackendError::EmptyMaskReturned),
            Err(e) => Err(BackendError::malformed(BackendRole::Segmenter, e)),
        }
    }
}

impl Captioner for HttpCaptioner {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn caption(&self, prompt: &str, retry_nonce: u64) -> Result<String, BackendError> {
        let reply: CaptionReply = self.endpoint.call(&CaptionRequest {
            prompt: prompt.to_owned(),
            retry_nonce,
        })?;
        Ok(reply.caption)
    }
}

impl BackgroundGenerator for HttpBackgroundGenerator {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn generate(
        &self,
        caption: &str,
        seed: u64,
        (width, height): (u32, u32),
    ) -> Result<ImageBuffer, BackendError> {
        let reply: BackgroundReply = self.endpoint.call(&BackgroundRequest {
            caption: caption.to_owned(),
            seed,
            width,
            height,
        })?;
        image_from_base64(&reply.image)
            .map_err(|e| BackendError::malformed(BackendRole::BackgroundGenerator, e))
    }
}
