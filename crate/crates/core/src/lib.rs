//! Text-to-manga page generation at desk scale.
//!
//! The crate covers the whole pipeline: Manga109-style annotations and their
//! enriched XML, panel reading order, training-record construction, story
//! splitting, page/panel composition, a multi-panel diffusion transformer with
//! intra-panel and inter-panel masked attention, DDPM training and sampling,
//! and Fréchet / cosine evaluation metrics.

pub mod annotation;
pub mod autograd;
pub mod bbox;
pub mod caption;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod order;
pub mod panelize;
pub mod pipeline;
pub mod model;
pub mod script;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use bbox::BBox;
pub use error::{Error, ErrorClass, Result};

/// Caption and script sentinel for padded panels. Matched case-sensitively.
pub const EMPTY_CAPTION: &str = "EMPTY";
