//! Deterministic in-process backends.
//!
//! Every mock output is a pure function of its inputs (scripted modes aside),
//! which is what makes whole runs byte-reproducible.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BackendError, BackendIdentity, BackendRole, BackgroundGenerator, Captioner, DetectionResponse,
    Detector, SegmentationResponse, Segmenter,
};
use crate::hashing::{sha256_hex, stable_hash};
use crate::raster::{BoundingBox, Channels, ImageBuffer, SubjectMask};

const MOCK_VERSION: &str = "1";

/// Box returned for every image: centered, a quarter of the area.
pub const MOCK_BOX: BoundingBox = BoundingBox {
    x_min: 0.25,
    y_min: 0.25,
    x_max: 0.75,
    y_max: 0.75,
    confidence: 0.9,
};

/// Fixed-box detector. Images whose pixel digest is registered with
/// [`MockDetector::fail_on`] (or every image, in always-empty mode) get no boxes.
#[derive(Debug)]
pub struct MockDetector {
    identity: BackendIdentity,
    always_empty: bool,
    empty_for: BTreeSet<String>,
}

impl Default for MockDetector {
    fn default() -> Self {
        Self::new()
    }
}

impl MockDetector {
    pub fn new() -> Self {
        Self {
            identity: BackendIdentity::new(
                BackendRole::Detector,
                "mock-detector",
                MOCK_VERSION,
                "mock",
            ),
            always_empty: false,
            empty_for: BTreeSet::new(),
        }
    }

    pub fn always_empty() -> Self {
        Self {
            always_empty: true,
            ..Self::new()
        }
    }

    /// Returns no detections for this exact image.
    pub fn fail_on(mut self, image: &ImageBuffer) -> Self {
        self.empty_for.insert(pixel_digest(image));
        self
    }
}

/// SHA-256 of dimensions, layout and pixels.
pub fn pixel_digest(image: &ImageBuffer) -> String {
    let mut bytes = Vec::with_capacity(image.data().len() + 9);
    bytes.extend_from_slice(&image.width().to_le_bytes());
    bytes.extend_from_slice(&image.height().to_le_bytes());
    bytes.push(image.channels().count() as u8);
    bytes.extend_from_slice(image.data());
    sha256_hex(&bytes)
}

impl Detector for MockDetector {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn detect(
        &self,
        image: &ImageBuffer,
        _text_prompt: &str,
    ) -> Result<DetectionResponse, BackendError> {
        if self.always_empty || self.empty_for.contains(&pixel_digest(image)) {
            return Ok(DetectionResponse::default());
        }
        Ok(DetectionResponse {
            boxes: vec![MOCK_BOX],
        })
    }
}

/// Wraps a detector and records every text prompt it receives.
#[derive(Debug)]
pub struct RecordingDetector<D> {
    inner: D,
    prompts: Mutex<Vec<String>>,
}

impl<D: Detector> RecordingDetector<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl<D: Detector> Detector for RecordingDetector<D> {
    fn identity(&self) -> &BackendIdentity {
        self.inner.identity()
    }

    fn detect(
        &self,
        image: &ImageBuffer,
        text_prompt: &str,
    ) -> Result<DetectionResponse, BackendError> {
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(text_prompt.to_owned());
        self.inner.detect(image, text_prompt)
    }
}

/// Segments the ellipse inscribed in the pixels the box touches.
#[derive(Debug)]
pub struct MockSegmenter {
    identity: BackendIdentity,
    return_empty: bool,
}

impl Default for MockSegmenter {
    fn default() -> Self {
        Self::new()
    }
}

impl MockSegmenter {
    pub fn new() -> Self {
        Self {
            identity: BackendIdentity::new(
                BackendRole::Segmenter,
                "mock-segmenter",
                MOCK_VERSION,
                "mock",
            ),
            return_empty: false,
        }
    }

    /// A segmenter that always reports an empty mask.
    pub fn empty() -> Self {
        Self {
            return_empty: true,
            ..Self::new()
        }
    }
}

/// Ellipse inscribed in `bbox`'s pixel span, tested at pixel centers.
///
/// The span's center pixel always lies inside, so the mask is never empty.
pub fn inscribed_ellipse(width: u32, height: u32, bbox: &BoundingBox) -> SubjectMask {
    let (x0, y0, x1, y1) = bbox.pixel_span(width, height);
    let (cx, cy) = (f64::from(x0 + x1) / 2.0, f64::from(y0 + y1) / 2.0);
    let (rx, ry) = (f64::from(x1 - x0) / 2.0, f64::from(y1 - y0) / 2.0);
    SubjectMask::from_fn(width, height, |x, y| {
        if x < x0 || x >= x1 || y < y0 || y >= y1 {
            return false;
        }
        let dx = (f64::from(x) + 0.5 - cx) / rx;
        let dy = (f64::from(y) + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
    .expect("inscribed ellipse always covers the span's center pixel")
}

impl Segmenter for MockSegmenter {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn segment(
        &self,
        image: &ImageBuffer,
        bbox: &BoundingBox,
    ) -> Result<SegmentationResponse, BackendError> {
        if self.return_empty {
            return Err(BackendError::EmptyMaskReturned);
        }
        Ok(SegmentationResponse {
            mask: inscribed_ellipse(image.width(), image.height(), bbox),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CaptionMode {
    /// Caption assembled from fixed word lists, picked by a hash of (prompt, nonce).
    Template,
    /// Returns the prompt unchanged.
    Echo,
    /// Template caption that, with the given probability (decided by the same
    /// hash), also mentions `word`.
    InjectAvoid { word: String, probability: f64 },
    /// Returns the scripted captions in call order, repeating the last one.
    Script(Vec<String>),
}

#[derive(Debug)]
pub struct MockCaptioner {
    identity: BackendIdentity,
    mode: CaptionMode,
    calls: AtomicUsize,
}

const MOODS: [&str; 8] = [
    "serene",
    "windswept",
    "misty",
    "sunlit",
    "quiet",
    "rugged",
    "lush",
    "overcast",
];
const VIEWS: [&str; 6] = [
    "wide view",
    "panorama",
    "close landscape",
    "open vista",
    "soft-focus scene",
    "photograph",
];
const LIGHTS: [&str; 8] = [
    "bathed in warm light",
    "under a pale sky",
    "with long shadows",
    "lit by diffuse light",
    "under drifting clouds",
    "glowing with low sun",
    "in cool blue tones",
    "beneath a clear sky",
];
const DETAILS: [&str; 8] = [
    "moss-covered stones",
    "scattered fallen leaves",
    "tall dry grass",
    "smooth wet pebbles",
    "twisted old branches",
    "patches of wildflowers",
    "weathered wooden posts",
    "ripples of sand",
];

impl MockCaptioner {
    pub fn new(mode: CaptionMode) -> Self {
        Self {
            identity: BackendIdentity::new(
                BackendRole::Captioner,
                "mock-captioner",
                MOCK_VERSION,
                "mock",
            ),
            mode,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `caption` calls made so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn template(prompt: &str, nonce: u64) -> (String, u64) {
        let h = stable_hash(&[b"caption", prompt.as_bytes(), &nonce.to_le_bytes()]);
        let pick =
            |list: &[&'static str], shift: u32| list[((h >> shift) % list.len() as u64) as usize];
        let text = format!(
            "A {} {} of {}, {}, {}.",
            pick(&MOODS, 0),
            pick(&VIEWS, 8),
            scene_of(prompt),
            pick(&LIGHTS, 16),
            pick(&DETAILS, 24)
        );
        (text, h)
    }
}

/// A short scene phrase lifted from the prompt: its first sentence, minus the
/// leading instruction word, lowercased.
fn scene_of(prompt: &str) -> String {
    let first = prompt.split('.').next().unwrap_or(prompt).trim();
    let rest = first.split_once(' ').map_or(first, |(_, r)| r);
    if rest.is_empty() {
        "an empty landscape".to_owned()
    } else {
        rest.to_lowercase()
    }
}

impl Captioner for MockCaptioner {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn caption(&self, prompt: &str, retry_nonce: u64) -> Result<String, BackendError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(match &self.mode {
            CaptionMode::Template => Self::template(prompt, retry_nonce).0,
            CaptionMode::Echo => prompt.to_owned(),
            CaptionMode::InjectAvoid { word, probability } => {
                let (text, h) = Self::template(prompt, retry_nonce);
                let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                if u < *probability {
                    format!("{} A lone {word} rests in the foreground.", text)
                } else {
                    text
                }
            }
            CaptionMode::Script(lines) => lines
                .get(call.min(lines.len().saturating_sub(1)))
                .cloned()
                .unwrap_or_default(),
        })
    }
}

/// Procedural "scene": a sky-to-ground gradient modulated by multi-octave value
/// noise, all seeded by a hash of (caption, seed).
#[derive(Debug)]
pub struct MockBackgroundGenerator {
    identity: BackendIdentity,
}

impl Default for MockBackgroundGenerator {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackgroundGenerator {
    pub fn new() -> Self {
        Self {
            identity: BackendIdentity::new(
                BackendRole::BackgroundGenerator,
                "mock-background",
                MOCK_VERSION,
                "mock",
            ),
        }
    }
}

/// Value noise on a `cells x cells` lattice over the unit square.
struct Lattice {
    cells: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let values = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.random::<f64>())
            .collect();
        Self { cells, values }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (gx, gy) = (u * self.cells as f64, v * self.cells as f64);
        let (ix, iy) = (
            (gx.floor() as usize).min(self.cells - 1),
            (gy.floor() as usize).min(self.cells - 1),
        );
        let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let n = self.cells + 1;
        let v00 = self.values[iy * n + ix];
        let v10 = self.values[iy * n + ix + 1];
        let v01 = self.values[(iy + 1) * n + ix];
        let v11 = self.values[(iy + 1) * n + ix + 1];
        let top = v00 + (v10 - v00) * tx;
        let bottom = v01 + (v11 - v01) * tx;
        top + (bottom - top) * ty
    }
}

pub fn procedural_scene(caption: &str, seed: u64, (width, height): (u32, u32)) -> ImageBuffer {
    let h = stable_hash(&[b"background", caption.as_bytes(), &seed.to_le_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut color = || [0; 3].map(|_: u8| rng.random_range(0.0..255.0));
    let sky = color();
    let ground = color();
    let tint = color();
    let horizon = rng.random_range(0.3..0.7);
    let octaves: Vec<(Lattice, f64)> = [(3usize, 0.5), (6, 0.25), (12, 0.15), (24, 0.1)]
        .into_iter()
        .map(|(cells, weight)| (Lattice::new(&mut rng, cells), weight))
        .collect();

    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        let v = (f64::from(y) + 0.5) / f64::from(height);
        for x in 0..width {
            let u = (f64::from(x) + 0.5) / f64::from(width);
            let noise: f64 = octaves.iter().map(|(l, w)| l.at(u, v) * w).sum();
            let edge = ((v - horizon + (noise - 0.5) * 0.3) * 12.0).clamp(-1.0, 1.0) * 0.5 + 0.5;
            for c in 0..3 {
                let base = sky[c] + (ground[c] - sky[c]) * edge;
                let value = base * 0.55 + tint[c] * noise * 0.45 + (noise - 0.5) * 60.0;
                data.push(value.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(width, height, Channels::Rgb8, data).expect("buffer sized from dimensions")
}

impl BackgroundGenerator for MockBackgroundGenerator {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn generate(
        &self,
        caption: &str,
        seed: u64,
        target: (u32, u32),
    ) -> Result<ImageBuffer, BackendError> {
        Ok(procedural_scene(caption, seed, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{detect, segment};
    use crate::prompt::{sanitize_caption, AvoidList, PromptLibrary};

    fn white(w: u32, h: u32) -> ImageBuffer {
        ImageBuffer::filled(w, h, &[255, 255, 255]).unwrap()
    }

    #[test]
    fn detector_returns_fixed_box() {
        let r = detect(&MockDetector::new(), &white(30, 20), "bird").unwrap();
        assert_eq!(r.boxes, vec![MOCK_BOX]);
        assert!((MOCK_BOX.area() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn detector_failure_injection_is_per_image() {
        let a = white(8, 8);
        let b = ImageBuffer::filled(8, 8, &[0, 0, 0]).unwrap();
        let det = MockDetector::new().fail_on(&a);
        assert!(det.detect(&a, "bird").unwrap().boxes.is_empty());
        assert_eq!(det.detect(&b, "bird").unwrap().boxes.len(), 1);
    }

    #[test]
    fn ellipse_area_matches_analytic() {
        let full = BoundingBox::new(0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let r = segment(&MockSegmenter::new(), &white(100, 100), &full).unwrap();
        let expected = std::f64::consts::FRAC_PI_4 * 10_000.0;
        let got = r.mask.popcount() as f64;
        assert!(
            (got - expected).abs() / expected < 0.02,
            "{got} vs {expected}"
        );
    }

    #[test]
    fn thin_box_gives_single_row_segment() {
        let thin = BoundingBox::new(0.2, 0.503, 0.6, 0.507, 1.0).unwrap();
        let mask = segment(&MockSegmenter::new(), &white(100, 100), &thin)
            .unwrap()
            .mask;
        // Rasterization oracle: the whole touched row span, nothing else.
        for y in 0..100 {
            for x in 0..100 {
                assert_eq!(
                    mask.get(x, y),
                    y == 50 && (20..60).contains(&x),
                    "({x}, {y})"
                );
            }
        }
    }

    #[test]
    fn ellipse_stays_inside_box() {
        let b = BoundingBox::new(0.1, 0.3, 0.45, 0.9, 1.0).unwrap();
        let mask = inscribed_ellipse(64, 48, &b);
        let (x0, y0, x1, y1) = b.pixel_span(64, 48);
        let (a0, b0, a1, b1) = mask.pixel_bounds();
        assert!(a0 >= x0 && b0 >= y0 && a1 <= x1 && b1 <= y1);
    }

    #[test]
    fn empty_segmenter_errors() {
        let full = BoundingBox::new(0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(
            segment(&MockSegmenter::empty(), &white(4, 4), &full),
            Err(BackendError::EmptyMaskReturned)
        );
    }

    #[test]
    fn captioner_is_deterministic_and_nonce_sensitive() {
        let c = MockCaptioner::new(CaptionMode::Template);
        let p = "Describe a scene in a dense forest at dawn.";
        assert_eq!(c.caption(p, 0).unwrap(), c.caption(p, 0).unwrap());
        assert_ne!(c.caption(p, 0).unwrap(), c.caption(p, 1).unwrap());
        assert_eq!(c.calls(), 4);
    }

    #[test]
    fn inject_mode_mentions_word() {
        let c = MockCaptioner::new(CaptionMode::InjectAvoid {
            word: "spider".into(),
            probability: 1.0,
        });
        let avoid = AvoidList::new(["spider"]).unwrap();
        assert!(!sanitize_caption(&c.caption("Describe a lake.", 0).unwrap(), &avoid).is_accept());
    }

    #[test]
    fn template_captions_avoid_builtin_words() {
        let lib = PromptLibrary::builtin();
        let c = MockCaptioner::new(CaptionMode::Template);
        let (ni, nb, nt) = lib.sets.sizes();
        for i in 0..ni {
            for b in 0..nb {
                for t in 0..nt {
                    let p = crate::prompt::render_prompt((i, b, t), &lib.sets, &lib.avoid).unwrap();
                    assert!(sanitize_caption(&c.caption(&p, 0).unwrap(), &lib.avoid).is_accept());
                }
            }
        }
    }

    #[test]
    fn backgrounds_are_deterministic_and_seeded() {
        let g = MockBackgroundGenerator::new();
        let a = g.generate("a quiet lake", 1, (64, 64)).unwrap();
        assert_eq!(a, g.generate("a quiet lake", 1, (64, 64)).unwrap());
        assert_ne!(a, g.generate("a quiet lake", 2, (64, 64)).unwrap());
        assert_eq!(a.dimensions(), (64, 64));
    }

    #[test]
    fn distinct_captions_give_distinct_backgrounds() {
        let g = MockBackgroundGenerator::new();
        let images: Vec<ImageBuffer> = (0..40)
            .map(|i| {
                g.generate(&format!("caption number {i}"), 0, (64, 64))
                    .unwrap()
            })
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..images.len() {
            for j in i + 1..images.len() {
                let l1: u64 = images[i]
                    .data()
                    .iter()
                    .zip(images[j].data())
                    .map(|(a, b)| u64::from(a.abs_diff(*b)))
                    .sum();
                min = min.min(l1 as f64 / images[i].data().len() as f64);
            }
        }
        assert!(min > 10.0, "closest pair mean L1 = {min}");
    }
}
