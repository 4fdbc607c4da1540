//! Generative-discriminator guided decoding with tabular class-conditional
//! language models.
//!
//! [`model::TabularCCLM`] is an order-k class-conditional LM. A trained CC-LM
//! can steer an unconditional base model through [`decode::gedi_generate`],
//! be trained with the hybrid objective in [`train`], and be evaluated
//! against exact synthetic sources from [`synth`] with [`eval`].

pub mod checkpoint;
pub mod cli;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod requests;
pub mod synth;
pub mod train;
pub mod vocab;

pub use decode::{direct_generate, gedi_generate, GenerationConfig, Preset};
pub use error::{GediError, Result};
pub use model::{InitScheme, LMState, TabularCCLM};
pub use synth::{LabeledCorpus, SourceSpec};
pub use train::{train, TrainConfig};
pub use vocab::{ControlCodeSet, TokenId, Vocab};
