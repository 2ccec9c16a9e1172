//! JSON message bodies of the backend HTTP protocol.
//!
//! Field order in these structs is the serialized order; `docs/protocol.md`
//! documents the same layout. Images travel as base64 (standard alphabet,
//! padded) PNG, masks as [`RleMask`].

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::rle::RleMask;
use crate::raster::{decode_image, encode_png, BoundingBox, ImageBuffer, ImageError};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequest {
    pub image: String,
    pub text_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectReply {
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentReply {
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRequest {
    pub prompt: String,
    pub retry_nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionReply {
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundRequest {
    pub caption: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundReply {
    pub image: String,
}

/// Body of any non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub error: String,
}

pub fn image_to_base64(image: &ImageBuffer) -> Result<String, ImageError> {
    Ok(STANDARD.encode(encode_png(image)?))
}

pub fn image_from_base64(text: &str) -> Result<ImageBuffer, ImageError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| ImageError::Codec(format!("base64: {e}")))?;
    decode_image(&bytes)
}
