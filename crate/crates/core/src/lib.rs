//! A convolutional billboard/no-billboard frame classifier built from scratch:
//! dense tensors with im2col convolution, hand-written backward passes, the
//! six VGG-style configurations (A, A-LRN, B, C, D, E) with a replaced
//! FC-1024/Dropout/FC-1024/FC-2 head, dataset curation from polygon
//! annotations, mini-batch SGD with layer freezing, and evaluation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod training;

pub use dataset::{AnnotatedImage, DatasetManifest, Label, SampleRecord, Split};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, EvalReport};
pub use layers::{Exec, LayerKind, LayerSpec, Mode};
pub use network::{build_config, Checkpoint, ConfigName, Model, NetworkSpec, Scale};
pub use tensor::{Scalar, Tensor};
pub use training::{TrainingConfig, TrainingLog};
