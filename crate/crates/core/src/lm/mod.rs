//! Tiny decoder-only transformer used as the frozen backbone, with its
//! synthetic pretraining corpus.

pub mod corpus;
mod model;
pub mod pretrain;
pub mod vocab;

pub use corpus::{CorpusGenerator, MixWeights};
pub use model::{LanguageModel, LmBinding, LmConfig, LmWeights, MixedSequence, Segment, TapeSegment, LN_EPS};
pub use pretrain::{induction_accuracy, pretrain, PretrainConfig, PretrainReport};
pub use vocab::{TokenId, Vocab, ARROW, EOS, NEWLINE, PAD};
