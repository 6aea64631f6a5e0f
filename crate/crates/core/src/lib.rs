//! Vision-language content rating: synthetic app data, a content/style image
//! encoder pair with an EMA target branch, cross-attention image-text fusion
//! trained with a supervised sigmoid contrastive loss, a majority-vote rating
//! head, and audit tooling for rating malpractice and disguise.

pub mod audit;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod head;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod rating;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use rating::{rating_distance, ContentRating};
