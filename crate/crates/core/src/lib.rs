//! Quality assessment of synthetic angiography from Mask / Contrast / Generated
//! image triplets.
//!
//! The crate holds a small reverse-mode autodiff engine ([`graph`]), the
//! multi-path fusion model ([`fusion`]) with five-level scoring heads
//! ([`head`]), the subjective-rating pipeline that turns raw ratings into MOS
//! labels ([`subjective`]), correlation metrics ([`correlation`]), a synthetic
//! triplet generator ([`synth`]) and the training loop ([`train`]).
//!
//! Numeric code is generic over [`Real`]; the aliases below fix it to `f64`,
//! which is what training and the gradient checks use.

pub mod correlation;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod params;
pub mod scalar;
pub mod subjective;
pub mod synth;
pub mod tensor;
pub mod train;

pub use fusion::{ModelConfig, ModelError, TokenSource, TripletImages};
pub use graph::{Gradients, Var};
pub use head::{level_of_score, score_of_logits, InstructionRecord, Level, Metric};
pub use scalar::Real;
pub use tensor::TensorError;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type QualityModel = fusion::QualityModel<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type LevelDistribution = head::LevelDistribution<f64>;
pub type Prediction = fusion::Prediction<f64>;
