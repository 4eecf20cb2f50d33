//! Knowledge probing and fine-tuning dataset curation for closed-book QA.

pub mod annotate;
pub mod cli;
pub mod corpus;
pub mod dynamics;
pub mod eval;
pub mod export;
pub mod gateway;
pub mod plot;
pub mod ptrue;
pub mod regression;
pub mod simulate;
pub mod stats;
pub mod types;
pub mod variants;

pub use types::{CategoryMap, KnowledgeCategory, QAPair, Split};
