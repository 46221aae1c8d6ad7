//! Cross-modal retrieval through learned and transferred single-modal similarities.
//!
//! Two Siamese networks learn a distance metric inside each modality. Their
//! distances then act as references for the cross-modal distances produced by
//! a pair of projection networks, trained adversarially against a modality
//! discriminator together with a shared label classifier.
//!
//! The numeric core ([`nn`], [`similarity`], [`common_space`]) is generic over
//! the float type through [`Scalar`]. Everything that touches files or
//! experiment orchestration works in `f64`; the aliases below name the
//! concrete instantiations used there.

pub mod common_space;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod nn;
pub mod scalar;
pub mod similarity;
pub mod training;

pub use error::{CmstError, Result};
pub use scalar::Scalar;

pub type MatrixF64 = nn::Matrix<f64>;
pub type MatrixF32 = nn::Matrix<f32>;
pub type MlpF64 = nn::MlpNetwork<f64>;
pub type MlpF32 = nn::MlpNetwork<f32>;
pub type NetGradsF64 = nn::NetGrads<f64>;
pub type OptimizerF64 = nn::Optimizer<f64>;
pub type SimilarityNetF64 = similarity::SimilarityNet<f64>;
pub type GeneratorPairF64 = common_space::GeneratorPair<f64>;
pub type LabelClassifierF64 = common_space::LabelClassifier<f64>;
pub type ModalityDiscriminatorF64 = common_space::ModalityDiscriminator<f64>;
