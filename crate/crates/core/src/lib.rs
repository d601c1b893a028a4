//! CrossFi: siamese CSI similarity with quality-weighted templates.

pub mod archive;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod similarity;
pub mod templates;
pub mod tensor;
pub mod training;

pub use config::{Metric, Scenario, ScenarioConfig};
pub use data::{CsiSample, SampleShape};
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, ErrorKind, Result};
pub use similarity::{Embedding, HeadConfig, SimilarityMatrix};
pub use templates::{TemplateSet, WeightNet, WeightNetConfig};
pub use tensor::Tensor;
