//! One-shot atlas segmentation on desk-scale volumes.
//!
//! The crate pairs a variational deformable registration (local correlation,
//! feature consistency, smoothness and optional weak label supervision) with a
//! compact convolutional segmenter. Training pairs are produced by warping the
//! atlas onto each unlabeled image and transplanting the target's Fourier
//! amplitude into the warped atlas, so every image-mask pair stays aligned.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, which the pipeline and CLI use.

pub mod error;
pub mod features;
pub mod fields;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod real;
pub mod registration;
pub mod segmenter;
pub mod spectral;

pub use error::{Error, Result};
pub use fields::{DisplacementField, Dims, LabelMap, ProbMask, ScalarField};
pub use real::Real;

pub type Image = ScalarField<f64>;
pub type Image32 = ScalarField<f32>;
pub type Displacement = DisplacementField<f64>;
pub type Displacement32 = DisplacementField<f32>;
pub type Probs = ProbMask<f64>;
pub type Probs32 = ProbMask<f32>;
pub type Spectrum64 = spectral::Spectrum<f64>;
pub type Features = features::FeatureStack<f64>;
pub type Model = segmenter::SegModel<f64>;
pub type Model32 = segmenter::SegModel<f32>;
