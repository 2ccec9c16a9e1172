//! Raster, mask, box and label types shared by every stage of the pipeline.
//!
//! Normalized coordinates use the pixel-edge convention: pixel `i` of a row
//! of width `W` spans `[i/W, (i+1)/W)`, so a full-frame box is exactly
//! `(0, 0, 1, 1)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: u32,
        left_height: u32,
        right_width: u32,
        right_height: u32,
    },
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("invalid bounding box {0}")]
    InvalidBox(String),
    #[error("expected {expected:?} pixels, got {actual:?}")]
    WrongChannels {
        expected: Channels,
        actual: Channels,
    },
    #[error("invalid class label: {0}")]
    InvalidLabel(String),
    #[error("image codec: {0}")]
    Codec(String),
}

fn mismatch(lw: u32, lh: u32, rw: u32, rh: u32) -> ImageError {
    ImageError::DimensionMismatch {
        left_width: lw,
        left_height: lh,
        right_width: rw,
        right_height: rh,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channels {
    Rgb8,
    Rgba8,
}

impl Channels {
    pub const fn count(self) -> usize {
        match self {
            Channels::Rgb8 => 3,
            Channels::Rgba8 => 4,
        }
    }
}

/// Owned row-major 8-bit raster.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: Channels,
    data: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(
        width: u32,
        height: u32,
        channels: Channels,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize * channels.count();
        if data.len() != expected {
            return Err(ImageError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image with every pixel set to `pixel`, whose length selects the channel layout.
    pub fn filled(width: u32, height: u32, pixel: &[u8]) -> Result<Self, ImageError> {
        let channels = match pixel.len() {
            3 => Channels::Rgb8,
            4 => Channels::Rgba8,
            n => {
                return Err(ImageError::DataLength {
                    expected: 3,
                    actual: n,
                })
            }
        };
        let n = width as usize * height as usize;
        Self::new(width, height, channels, pixel.repeat(n))
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn<const N: usize>(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; N],
    ) -> Result<Self, ImageError> {
        let channels = match N {
            3 => Channels::Rgb8,
            4 => Channels::Rgba8,
            n => {
                return Err(ImageError::DataLength {
                    expected: 3,
                    actual: n,
                })
            }
        };
        let mut data = Vec::with_capacity(width as usize * height as usize * N);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels.count()
    }

    /// Channel bytes of pixel `(x, y)`. Panics when out of bounds.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        assert!(
            x < self.width && y < self.height,
            "pixel ({x}, {y}) out of bounds"
        );
        let o = self.offset(x, y);
        &self.data[o..o + self.channels.count()]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        assert!(
            x < self.width && y < self.height,
            "pixel ({x}, {y}) out of bounds"
        );
        let o = self.offset(x, y);
        let n = self.channels.count();
        &mut self.data[o..o + n]
    }

    /// Drops the alpha channel (or clones an RGB image).
    pub fn to_rgb8(&self) -> ImageBuffer {
        match self.channels {
            Channels::Rgb8 => self.clone(),
            Channels::Rgba8 => {
                let data = self
                    .data
                    .chunks_exact(4)
                    .flat_map(|p| [p[0], p[1], p[2]])
                    .collect();
                ImageBuffer {
                    width: self.width,
                    height: self.height,
                    channels: Channels::Rgb8,
                    data,
                }
            }
        }
    }

    pub fn same_dimensions(&self, other: &ImageBuffer) -> Result<(), ImageError> {
        if self.dimensions() == other.dimensions() {
            Ok(())
        } else {
            Err(mismatch(self.width, self.height, other.width, other.height))
        }
    }
}

/// Axis-aligned box in normalized coordinates with a detector score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        confidence: f64,
    ) -> Result<Self, ImageError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            confidence,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = in_unit(self.x_min)
            && in_unit(self.x_max)
            && in_unit(self.y_min)
            && in_unit(self.y_max)
            && in_unit(self.confidence)
            && self.x_min < self.x_max
            && self.y_min < self.y_max;
        if ok {
            Ok(())
        } else {
            Err(ImageError::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Pixel rows/columns touched by the box, as half-open `(x0, y0, x1, y1)`.
    /// Never empty: a box thinner than one pixel still covers the pixel it lies in.
    pub fn pixel_span(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        fn span(lo: f64, hi: f64, n: u32) -> (u32, u32) {
            let n_f = f64::from(n);
            let a = ((lo * n_f).floor().max(0.0) as u32).min(n - 1);
            let b = ((hi * n_f).ceil() as u32).clamp(a + 1, n);
            (a, b)
        }
        let (x0, x1) = span(self.x_min, self.x_max, width);
        let (y0, y1) = span(self.y_min, self.y_max, height);
        (x0, y0, x1, y1)
    }
}

/// Binary per-pixel mask, row-major. Never empty.
#[derive(Clone, PartialEq, Eq)]
pub struct SubjectMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl fmt::Debug for SubjectMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubjectMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("popcount", &self.popcount())
            .finish()
    }
}

impl SubjectMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(ImageError::DataLength {
                expected,
                actual: bits.len(),
            });
        }
        if !bits.iter().any(|&b| b) {
            return Err(ImageError::EmptyMask);
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, ImageError> {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    /// Mask of pixels whose alpha is non-zero in an RGBA image.
    pub fn from_alpha(image: &ImageBuffer) -> Result<Self, ImageError> {
        if image.channels() != Channels::Rgba8 {
            return Err(ImageError::WrongChannels {
                expected: Channels::Rgba8,
                actual: image.channels(),
            });
        }
        let bits = image.data().chunks_exact(4).map(|p| p[3] > 0).collect();
        Self::new(image.width(), image.height(), bits)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight pixel bounds of the set bits, half-open `(x0, y0, x1, y1)`.
    pub fn pixel_bounds(&self) -> (u32, u32, u32, u32) {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            let row = &self.bits[y as usize * self.width as usize..][..self.width as usize];
            let Some(first) = row.iter().position(|&b| b) else {
                continue;
            };
            let last = row.iter().rposition(|&b| b).unwrap_or(first);
            x0 = x0.min(first as u32);
            x1 = x1.max(last as u32 + 1);
            y0 = y0.min(y);
            y1 = y + 1;
        }
        (x0, y0, x1, y1)
    }

    /// Grayscale rendering: 255 where set, 0 elsewhere.
    pub fn to_luma(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

/// Fine-grained dataset class plus the coarser name used as detection prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub fine_name: String,
    pub superclass: String,
}

impl ClassLabel {
    pub fn new(
        fine_name: impl Into<String>,
        superclass: impl Into<String>,
    ) -> Result<Self, ImageError> {
        let label = Self {
            fine_name: fine_name.into(),
            superclass: superclass.into(),
        };
        if label.fine_name.trim().is_empty() || label.superclass.trim().is_empty() {
            return Err(ImageError::InvalidLabel(format!("{label:?}")));
        }
        Ok(label)
    }
}

/// RGBA cutout of a subject together with the mask it was cut with.
///
/// Canonical form: any pixel with alpha 0 has RGB `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSubject {
    cutout: ImageBuffer,
    mask: SubjectMask,
    source_box: BoundingBox,
}

impl MaskedSubject {
    /// Wraps an RGBA image, canonicalizing transparent pixels and deriving the mask from alpha.
    pub fn from_rgba(mut cutout: ImageBuffer) -> Result<Self, ImageError> {
        if cutout.channels() != Channels::Rgba8 {
            return Err(ImageError::WrongChannels {
                expected: Channels::Rgba8,
                actual: cutout.channels(),
            });
        }
        for p in cutout.data.chunks_exact_mut(4) {
            if p[3] == 0 {
                p[..3].fill(0);
            }
        }
        let mask = SubjectMask::from_alpha(&cutout)?;
        let source_box = tight_bbox(&mask);
        Ok(Self {
            cutout,
            mask,
            source_box,
        })
    }

    pub fn cutout(&self) -> &ImageBuffer {
        &self.cutout
    }

    pub fn mask(&self) -> &SubjectMask {
        &self.mask
    }

    pub fn source_box(&self) -> &BoundingBox {
        &self.source_box
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.cutout.dimensions()
    }

    /// Sum of alpha over all pixels, in units of fully opaque pixels.
    pub fn alpha_mass(&self) -> f64 {
        self.cutout
            .data
            .chunks_exact(4)
            .map(|p| f64::from(p[3]))
            .sum::<f64>()
            / 255.0
    }

    pub fn into_cutout(self) -> ImageBuffer {
        self.cutout
    }
}

/// Minimal normalized box around every set bit, with confidence 1.
pub fn tight_bbox(mask: &SubjectMask) -> BoundingBox {
    let (x0, y0, x1, y1) = mask.pixel_bounds();
    let (w, h) = (f64::from(mask.width), f64::from(mask.height));
    BoundingBox {
        x_min: f64::from(x0) / w,
        y_min: f64::from(y0) / h,
        x_max: f64::from(x1) / w,
        y_max: f64::from(y1) / h,
        confidence: 1.0,
    }
}

/// Cuts the masked region out of `image` into a canonical RGBA subject.
///
/// Accepts RGB or RGBA input; an input alpha channel is ignored and replaced by the mask.
pub fn cutout_subject(
    image: &ImageBuffer,
    mask: &SubjectMask,
) -> Result<MaskedSubject, ImageError> {
    if image.dimensions() != mask.dimensions() {
        return Err(mismatch(image.width, image.height, mask.width, mask.height));
    }
    let n = image.channels().count();
    let mut data = Vec::with_capacity(image.pixel_count() * 4);
    for (px, &bit) in image.data().chunks_exact(n).zip(&mask.bits) {
        if bit {
            data.extend_from_slice(&[px[0], px[1], px[2], 255]);
        } else {
            data.extend_from_slice(&[0, 0, 0, 0]);
        }
    }
    let cutout = ImageBuffer::new(image.width, image.height, Channels::Rgba8, data)?;
    Ok(MaskedSubject {
        cutout,
        mask: mask.clone(),
        source_box: tight_bbox(mask),
    })
}

/// Decodes PNG or JPEG bytes into an RGB or RGBA buffer (alpha kept only if present).
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let img = ::image::load_from_memory(bytes).map_err(|e| ImageError::Codec(e.to_string()))?;
    if img.color().has_alpha() {
        let rgba = img.to_rgba8();
        let (w, h) = rgba.dimensions();
        ImageBuffer::new(w, h, Channels::Rgba8, rgba.into_raw())
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImageBuffer::new(w, h, Channels::Rgb8, rgb.into_raw())
    }
}

/// Encodes to PNG with pinned encoder settings (default compression, adaptive filter),
/// so identical pixels always produce identical bytes.
pub fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>, ImageError> {
    let color = match image.channels() {
        Channels::Rgb8 => ::image::ExtendedColorType::Rgb8,
        Channels::Rgba8 => ::image::ExtendedColorType::Rgba8,
    };
    encode_png_raw(image.data(), image.width(), image.height(), color)
}

/// Encodes a mask as an 8-bit grayscale PNG.
pub fn encode_mask_png(mask: &SubjectMask) -> Result<Vec<u8>, ImageError> {
    encode_png_raw(
        &mask.to_luma(),
        mask.width,
        mask.height,
        ::image::ExtendedColorType::L8,
    )
}

fn encode_png_raw(
    data: &[u8],
    width: u32,
    height: u32,
    color: ::image::ExtendedColorType,
) -> Result<Vec<u8>, ImageError> {
    use ::image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use ::image::ImageEncoder;

    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive)
        .write_image(data, width, height, color)
        .map_err(|e| ImageError::Codec(e.to_string()))?;
    Ok(out)
}
