//! Subject-preserving background replacement for dataset augmentation.
//!
//! For every source image the pipeline isolates the labeled subject with a
//! detector and a segmenter, asks a captioner for a background description
//! built from a combinatorial prompt library, renders that background with an
//! image generator, flips/rotates/scales the subject, and pastes it back.
//! Model services sit behind the traits in [`backends`]; deterministic mocks
//! make whole runs reproducible byte for byte.

pub mod backends;
pub mod compositor;
pub mod fixtures;
pub mod geometry;
pub mod hashing;
pub mod isolation;
pub mod orchestrator;
pub mod prompt;
pub mod raster;

pub use backends::{BackendIdentity, BackendRole, Backends};
pub use compositor::{merge, resize_background, CompositeOutput};
pub use geometry::{apply_affine, to_matrix, AffineMatrix, AffineParams, AffineRanges, Flip};
pub use isolation::{isolate, IsolationPolicy, NoDetectionPolicy, SuperclassTable};
pub use prompt::{AvoidList, ModalitySets, PromptLibrary, PromptSpec};
pub use raster::{
    cutout_subject, tight_bbox, BoundingBox, ClassLabel, ImageBuffer, MaskedSubject, SubjectMask,
};
