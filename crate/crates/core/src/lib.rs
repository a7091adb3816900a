//! Spectral ODE feature transformation over tiny time intervals and a
//! prototype-based cross-domain few-shot segmentation pipeline.

pub mod backbone;
pub mod config;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod ttis;

pub use error::{Error, Result};
pub use rng::Rng;
pub use spectral::AmpPhase;
pub use tensor::{BinaryMask, FeatureMap, Image};
