//! Core algorithms for probing whether a retrieval-augmented generator's
//! citations are faithful to the documents it actually used.
//!
//! The crate is `no_std` with `alloc`; the `std` feature only forwards to the
//! dependencies. File formats, HTTP and the command line live in the
//! `citeprobe` harness crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attribution;
pub mod corpus;
pub mod experiment;
pub mod forge;
pub mod model;
pub mod retrieval;
pub mod text;

mod digest;

pub use attribution::{AttributedAnswer, Citation, Span};
pub use corpus::{ChunkStore, DocumentChunk, QaPair, SourceDocument};
pub use experiment::{ExperimentSummary, TrialRecord};
pub use forge::{AdversarialVariant, ForgeCondition, Insertion};
pub use model::{AnswerGenerator, GenerationError, GenerationMode, GenerationRequest};
pub use retrieval::{Bm25Params, InvertedIndex, RetrievedContext};
