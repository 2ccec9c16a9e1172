//! The four model services the pipeline depends on.
//!
//! Each role is a trait with a deterministic in-process mock ([`mock`]) and a
//! JSON-over-HTTP client ([`http`]). Callers go through the free functions in
//! this module ([`detect`], [`segment`], [`caption`], [`generate_background`]),
//! which check preconditions before dispatch and normalize responses.

pub mod http;
pub mod mock;
pub mod rle;
pub mod stub;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::resize_background;
use crate::raster::{BoundingBox, ImageBuffer, SubjectMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Detector,
    Segmenter,
    Captioner,
    BackgroundGenerator,
}

impl BackendRole {
    pub const ALL: [BackendRole; 4] = [
        BackendRole::Detector,
        BackendRole::Segmenter,
        BackendRole::Captioner,
        BackendRole::BackgroundGenerator,
    ];

    /// HTTP path of the role's endpoint.
    pub fn path(self) -> &'static str {
        match self {
            BackendRole::Detector => "/detect",
            BackendRole::Segmenter => "/segment",
            BackendRole::Captioner => "/caption",
            BackendRole::BackgroundGenerator => "/background",
        }
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendRole::Detector => "detector",
            BackendRole::Segmenter => "segmenter",
            BackendRole::Captioner => "captioner",
            BackendRole::BackgroundGenerator => "background generator",
        })
    }
}

/// Which service produced a result; copied verbatim into every manifest record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub role: BackendRole,
    pub name: String,
    pub version: String,
    /// Base URL, or `"mock"`.
    pub endpoint: String,
}

impl BackendIdentity {
    pub fn new(role: BackendRole, name: &str, version: &str, endpoint: &str) -> Self {
        assert!(
            !name.is_empty() && !version.is_empty(),
            "backend name and version must be non-empty"
        );
        Self {
            role,
            name: name.to_owned(),
            version: version.to_owned(),
            endpoint: endpoint.to_owned(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("{role} unreachable: {detail}")]
    Unreachable { role: BackendRole, detail: String },
    #[error("{role} returned a malformed response: {detail}")]
    MalformedResponse { role: BackendRole, detail: String },
    #[error("{role} rejected the request with HTTP {status}: {detail}")]
    Status {
        role: BackendRole,
        status: u16,
        detail: String,
    },
    #[error("invalid {role} request: {detail}")]
    InvalidRequest { role: BackendRole, detail: String },
    #[error("segmenter returned an empty mask")]
    EmptyMaskReturned,
}

impl BackendError {
    pub fn role(&self) -> BackendRole {
        match self {
            BackendError::Unreachable { role, .. }
            | BackendError::MalformedResponse { role, .. }
            | BackendError::Status { role, .. }
            | BackendError::InvalidRequest { role, .. } => *role,
            BackendError::EmptyMaskReturned => BackendRole::Segmenter,
        }
    }

    pub(crate) fn malformed(role: BackendRole, detail: impl fmt::Display) -> Self {
        BackendError::MalformedResponse {
            role,
            detail: detail.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionResponse {
    /// Descending confidence after [`detect`]; may be empty.
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResponse {
    pub mask: SubjectMask,
}

pub trait Detector: Send + Sync {
    fn identity(&self) -> &BackendIdentity;
    fn detect(
        &self,
        image: &ImageBuffer,
        text_prompt: &str,
    ) -> Result<DetectionResponse, BackendError>;
}

pub trait Segmenter: Send + Sync {
    fn identity(&self) -> &BackendIdentity;
    fn segment(
        &self,
        image: &ImageBuffer,
        bbox: &BoundingBox,
    ) -> Result<SegmentationResponse, BackendError>;
}

pub trait Captioner: Send + Sync {
    fn identity(&self) -> &BackendIdentity;
    fn caption(&self, prompt: &str, retry_nonce: u64) -> Result<String, BackendError>;
}

pub trait BackgroundGenerator: Send + Sync {
    fn identity(&self) -> &BackendIdentity;
    fn generate(
        &self,
        caption: &str,
        seed: u64,
        target: (u32, u32),
    ) -> Result<ImageBuffer, BackendError>;
}

fn invalid(role: BackendRole, detail: &str) -> BackendError {
    BackendError::InvalidRequest {
        role,
        detail: detail.to_owned(),
    }
}

/// Detects `text_prompt` in `image`; boxes come back sorted by descending confidence.
pub fn detect(
    detector: &dyn Detector,
    image: &ImageBuffer,
    text_prompt: &str,
) -> Result<DetectionResponse, BackendError> {
    if text_prompt.trim().is_empty() {
        return Err(invalid(BackendRole::Detector, "text prompt is empty"));
    }
    let mut response = detector.detect(image, text_prompt)?;
    for b in &response.boxes {
        b.validate()
            .map_err(|e| BackendError::malformed(BackendRole::Detector, e))?;
    }
    response
        .boxes
        .sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(response)
}

pub fn segment(
    segmenter: &dyn Segmenter,
    image: &ImageBuffer,
    bbox: &BoundingBox,
) -> Result<SegmentationResponse, BackendError> {
    bbox.validate()
        .map_err(|e| invalid(BackendRole::Segmenter, &e.to_string()))?;
    let response = segmenter.segment(image, bbox)?;
    if response.mask.dimensions() != image.dimensions() {
        return Err(BackendError::malformed(
            BackendRole::Segmenter,
            format!(
                "mask is {:?} but image is {:?}",
                response.mask.dimensions(),
                image.dimensions()
            ),
        ));
    }
    Ok(response)
}

pub fn caption(
    captioner: &dyn Captioner,
    prompt: &str,
    retry_nonce: u64,
) -> Result<String, BackendError> {
    if prompt.trim().is_empty() {
        return Err(invalid(BackendRole::Captioner, "prompt is empty"));
    }
    captioner.caption(prompt, retry_nonce)
}

/// Generates a background of exactly `target` pixels, resizing (center crop +
/// bilinear) when the service returns another size.
pub fn generate_background(
    generator: &dyn BackgroundGenerator,
    caption: &str,
    seed: u64,
    target: (u32, u32),
) -> Result<ImageBuffer, BackendError> {
    if caption.trim().is_empty() {
        return Err(invalid(
            BackendRole::BackgroundGenerator,
            "caption is empty",
        ));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(invalid(
            BackendRole::BackgroundGenerator,
            "target size is zero",
        ));
    }
    let image = generator.generate(caption, seed, target)?;
    resize_background(&image, target)
        .map_err(|e| BackendError::malformed(BackendRole::BackgroundGenerator, e))
}

/// Identities of the four services used for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSet {
    pub detector: BackendIdentity,
    pub segmenter: BackendIdentity,
    pub captioner: BackendIdentity,
    pub background_generator: BackendIdentity,
}

#[derive(Clone)]
pub struct Backends {
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub captioner: Arc<dyn Captioner>,
    pub generator: Arc<dyn BackgroundGenerator>,
}

impl Backends {
    pub fn mock() -> Self {
        Self {
            detector: Arc::new(mock::MockDetector::new()),
            segmenter: Arc::new(mock::MockSegmenter::new()),
            captioner: Arc::new(mock::MockCaptioner::new(mock::CaptionMode::Template)),
            generator: Arc::new(mock::MockBackgroundGenerator::new()),
        }
    }

    pub fn identities(&self) -> BackendSet {
        BackendSet {
            detector: self.detector.identity().clone(),
            segmenter: self.segmenter.identity().clone(),
            captioner: self.captioner.identity().clone(),
            background_generator: self.generator.identity().clone(),
        }
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Backends").field(&self.identities()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::mock::*;
    use super::*;

    struct Unsorted;

    impl Detector for Unsorted {
        fn identity(&self) -> &BackendIdentity {
            unreachable!()
        }
        fn detect(&self, _: &ImageBuffer, _: &str) -> Result<DetectionResponse, BackendError> {
            let b = |c| BoundingBox::new(0.1, 0.1, 0.5, 0.5, c).unwrap();
            Ok(DetectionResponse {
                boxes: vec![b(0.2), b(0.9), b(0.5)],
            })
        }
    }

    #[test]
    fn detect_sorts_by_confidence() {
        let img = ImageBuffer::filled(4, 4, &[0, 0, 0]).unwrap();
        let r = detect(&Unsorted, &img, "bird").unwrap();
        let c: Vec<f64> = r.boxes.iter().map(|b| b.confidence).collect();
        assert_eq!(c, vec![0.9, 0.5, 0.2]);
    }

    #[test]
    fn empty_prompt_rejected_before_dispatch() {
        let det = RecordingDetector::new(MockDetector::new());
        let img = ImageBuffer::filled(4, 4, &[0, 0, 0]).unwrap();
        let err = detect(&det, &img, "").unwrap_err();
        assert!(matches!(
            err,
            BackendError::InvalidRequest {
                role: BackendRole::Detector,
                ..
            }
        ));
        assert!(det.prompts().is_empty());
    }

    #[test]
    fn background_is_resized_to_target() {
        struct Fixed;
        impl BackgroundGenerator for Fixed {
            fn identity(&self) -> &BackendIdentity {
                unreachable!()
            }
            fn generate(
                &self,
                _: &str,
                _: u64,
                _: (u32, u32),
            ) -> Result<ImageBuffer, BackendError> {
                Ok(ImageBuffer::filled(10, 10, &[1, 2, 3, 4]).unwrap())
            }
        }
        let img = generate_background(&Fixed, "a lake", 1, (6, 3)).unwrap();
        assert_eq!(img.dimensions(), (6, 3));
        assert!(img.data().chunks_exact(3).all(|p| p == [1, 2, 3]));
    }
}
