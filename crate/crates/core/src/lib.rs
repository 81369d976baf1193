//! Builds a knowledge base of comparative statements about entity pairs.
//!
//! Entities come from a taxonomy, prompts are decoded under lexical
//! constraints by a pluggable language model, and the generations pass
//! through a filter cascade before being stored and measured.
//! [`pipeline`] ties the stages together with on-disk checkpoints.

pub mod config;
pub mod constraints;
pub mod decoder;
pub mod discriminator;
pub mod entity;
pub mod filter;
pub mod lexicon;
pub mod lm;
pub mod metrics;
pub mod pipeline;
pub mod remote;
pub mod store;
pub mod text;

pub use constraints::{ConstraintSet, ConstraintState};
pub use decoder::{DecodeParams, GenerationRecord};
pub use entity::{ComparativePrompt, EntityClass, EntityPair};
pub use lm::{LanguageModel, NgramModel, TokenId, TokenSequence};
pub use store::KnowledgeRecord;
