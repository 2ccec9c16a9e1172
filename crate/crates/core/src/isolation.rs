//! Subject isolation: superclass lookup, detection, segmentation, cutout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendError, Detector, Segmenter};
use crate::raster::{
    cutout_subject, BoundingBox, ClassLabel, ImageBuffer, ImageError, MaskedSubject,
};

/// Superclasses for the ten-class ImageNet subset, in the table file format.
pub const IMAGENET10_SUPERCLASSES: &str = include_str!("../assets/imagenet10_superclasses.tsv");

/// Box used by the `center-box` fallback.
pub const CENTER_BOX: BoundingBox = BoundingBox {
    x_min: 0.125,
    y_min: 0.125,
    x_max: 0.875,
    y_max: 0.875,
    confidence: 0.0,
};

#[derive(Debug, Error)]
pub enum IsolationError {
    #[error("no superclass for class {0:?} in the superclass table")]
    UnknownClass(String),
    #[error("superclass table line {line}: {detail}")]
    BadTable { line: usize, detail: String },
    #[error("cannot read superclass table {path}: {detail}")]
    UnreadableTable { path: String, detail: String },
    #[error("detector found no {superclass:?} in the image")]
    NoDetection { superclass: String },
    #[error("segmentation mask covers {fraction:.4} of the image, below the {min:.4} minimum")]
    MaskTooSmall { fraction: f64, min: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Fine class name → detection superclass.
///
/// File format: UTF-8 text, one `fine_name<TAB>superclass` pair per line;
/// blank lines and lines starting with `#` are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuperclassTable {
    map: BTreeMap<String, String>,
}

impl SuperclassTable {
    pub fn parse(text: &str) -> Result<Self, IsolationError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |detail: &str| IsolationError::BadTable {
                line: i + 1,
                detail: detail.to_owned(),
            };
            let (fine, sup) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `fine_name<TAB>superclass`"))?;
            let (fine, sup) = (fine.trim(), sup.trim());
            if fine.is_empty() || sup.is_empty() || sup.contains('\t') {
                return Err(bad("both columns must be non-empty"));
            }
            if map.insert(fine.to_owned(), sup.to_owned()).is_some() {
                return Err(bad(&format!("duplicate class {fine:?}")));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self, IsolationError> {
        let text = std::fs::read_to_string(path).map_err(|e| IsolationError::UnreadableTable {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn imagenet10() -> Self {
        Self::parse(IMAGENET10_SUPERCLASSES).expect("shipped superclass table is valid")
    }

    pub fn resolve(&self, fine_name: &str) -> Result<ClassLabel, IsolationError> {
        let sup = self
            .map
            .get(fine_name)
            .ok_or_else(|| IsolationError::UnknownClass(fine_name.to_owned()))?;
        Ok(ClassLabel::new(fine_name, sup.as_str())?)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoDetectionPolicy {
    #[default]
    Error,
    CenterBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolationPolicy {
    pub on_no_detection: NoDetectionPolicy,
    /// Masks covering less than this fraction of the image are rejected.
    pub min_mask_fraction: f64,
}

impl Default for IsolationPolicy {
    fn default() -> Self {
        Self {
            on_no_detection: NoDetectionPolicy::Error,
            min_mask_fraction: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Isolated {
    pub subject: MaskedSubject,
    /// Box handed to the segmenter.
    pub guide_box: BoundingBox,
    pub used_fallback: bool,
}

/// Detects `label.superclass`, segments inside the most confident box and cuts
/// the subject out. The fine class name is never sent to the detector.
pub fn isolate(
    image: &ImageBuffer,
    label: &ClassLabel,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    policy: &IsolationPolicy,
) -> Result<Isolated, IsolationError> {
    let rgb = image.to_rgb8();
    let detection = backends::detect(detector, &rgb, &label.superclass)?;
    let (guide_box, used_fallback) = match (detection.boxes.first(), policy.on_no_detection) {
        (Some(b), _) => (*b, false),
        (None, NoDetectionPolicy::CenterBox) => (CENTER_BOX, true),
        (None, NoDetectionPolicy::Error) => {
            return Err(IsolationError::NoDetection {
                superclass: label.superclass.clone(),
            })
        }
    };
    let mask = backends::segment(segmenter, &rgb, &guide_box)?.mask;
    let fraction = mask.popcount() as f64 / rgb.pixel_count() as f64;
    if fraction < policy.min_mask_fraction {
        return Err(IsolationError::MaskTooSmall {
            fraction,
            min: policy.min_mask_fraction,
        });
    }
    Ok(Isolated {
        subject: cutout_subject(&rgb, &mask)?,
        guide_box,
        used_fallback,
    })
}
