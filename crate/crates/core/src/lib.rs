pub mod checkpoint;
pub mod config;
mod container;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod lexing;
pub mod model;
pub mod optim;
pub mod soda;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Stage, TrainingConfig};
pub use contrastive::ContrastiveConfig;
pub use corpus::{CodeQueryPair, Corpus, Split, Vocabulary};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use evaluation::EvalReport;
pub use index::{EmbeddingIndex, SearchHit, Searcher};
pub use model::{BiEncoder, InputLimits};
pub use soda::{AugmentationConfig, SodaMethod};
