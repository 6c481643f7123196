//! Knowledge-grounded dialogue at desk scale: a hashed TF-IDF retriever
//! that assembles knowledge candidates per turn, models that select a
//! knowledge sentence and rank or generate the next utterance, and the
//! metrics used to evaluate them.

pub mod beam;
pub mod bundle;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod generative_dialogue;
pub mod knowledge_selection;
pub mod metrics;
pub mod released;
pub mod retrieval_dialogue;
pub mod retriever;
pub mod text;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
