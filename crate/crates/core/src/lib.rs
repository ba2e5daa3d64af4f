//! Video-text contrastive learning at desk scale: a vision transformer with
//! video proxy tokens, a causal text tower, the omnisource contrastive loss
//! family, retrieval metrics and a clustering-based language domain-gap
//! probe, all on a small reverse-mode tape with finite-difference checks.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ocl;
pub mod ops;
pub mod params;
pub mod probe;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transformer;
pub mod vision;

pub use error::{Error, Result};
pub use ocl::{OclBatchEmbeddings, OclVariant, Temperature};
pub use params::{ParamId, ParamStore};
pub use tensor::{BoolMask, Tensor};
pub use vision::{EncoderMode, ProxyViT, ProxyViTConfig};
pub use model::{DualEncoder, ModelConfig, OclInputs};
pub use probe::{ProbeConfig, ProbeReport, TextCorpus};
pub use retrieval::{RetrievalMetrics, SimilarityMatrix};
pub use synth::{SynthDataset, SynthSpec, VideoBatch};
pub use train::{evaluate, gradcheck_suite, train, EvalReport, ExperimentConfig, QuerySource, TrainConfig};
