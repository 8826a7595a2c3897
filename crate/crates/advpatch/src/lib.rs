//! Universal adversarial patches against contrastive image-text encoders:
//! patch application operators, a differentiable preprocessing pipeline,
//! targeted patch training, attack-success evaluation, and video keyframe
//! attacks.
//!
//! The crate is backend-agnostic: a deterministic toy encoder pair ships for
//! tests and desk-scale runs, and real pretrained towers attach through the
//! [`encoders::BackendRegistry`].

pub mod artifact;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
mod font;
pub mod image;
pub mod objectives;
pub mod patch;
pub mod preprocess;
pub mod report;
pub mod synth;
pub mod training;
mod util;
pub mod video;

pub use error::{Error, Result};
pub use image::{ImageBatch, ImageTensor, LabeledImage};
pub use patch::{PatchKind, PatchMetadata, PatchSpec, PlacementMode, PlacementPolicy};
pub use preprocess::{Interpolation, ModelInput, PreprocessConfig};

pub use util::{stable_hash64, subseed, subseed_n};
