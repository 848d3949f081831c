//! Single-step multi-view latent refinement of coarse portrait novel views.
//!
//! The pipeline renders procedural heads ([`synthdata`]), degrades novel
//! views ([`coarse_synth`]), encodes them into a small latent space
//! ([`latent_codec`]) and refines all views of a subject jointly in one
//! U-Net pass ([`refiner`]) trained with an adversarial term ([`adversary`],
//! [`trainer`]). [`metrics`] scores the result.

pub mod adversary;
pub mod cli;
pub mod coarse_synth;
pub mod error;
pub mod image;
pub mod latent_codec;
pub mod metrics;
pub mod refiner;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
