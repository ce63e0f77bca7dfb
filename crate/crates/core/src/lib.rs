//! Synthetic poster pipeline: corpus generation, curation, captioning, a
//! multimodal diffusion transformer with curriculum training, flexible-ratio
//! sampling and evaluation metrics.

pub mod captioner;
pub mod curriculum;
pub mod color;
pub mod error;
pub mod evalharness;
pub mod font;
pub mod imaging;
pub mod mmdit;
pub mod pairbuilder;
pub mod sampler;
pub mod filtering;
pub mod synthcorpus;

pub use error::{Error, Result};
pub use font::GlyphFont;
pub use imaging::{BinaryMask, Image, Rect};
pub use synthcorpus::{LayoutClass, PosterRecord, SpanRole, TextSpan};
