//! Prompt corpora, state extraction and the state dataset file format.

mod corpus;
mod dataset;
mod flatten;
mod tokenize;

pub(crate) use crate::binio::write_atomic;

pub use corpus::{persona_categories, persona_corpus, CorpusEntry, PromptCorpus};
pub use dataset::{
    extract_states, model_hash, prompt_condition, DatasetFingerprint, Normalization, StateDataset,
    StateRecord, DATASET_MAGIC, DATASET_VERSION, STD_FLOOR,
};
pub use flatten::{flatten_state, unflatten_state};
pub use tokenize::{detokenize, tokenize};
