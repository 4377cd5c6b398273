//! Building blocks for text style transfer through roundtrip translation.
//!
//! The pipeline turns a monolingual in-style corpus into a pseudo-parallel
//! corpus by translating every sentence to a pivot language and back. The
//! translated side is treated as style-neutral and paired with the original
//! sentence. On top of the pairs sit a target-side similarity index, a
//! terminology bank, prompt rendering for finetuning and inference, and the
//! evaluation metrics (BLEU and style-classifier accuracy).

pub mod corpus;
pub mod dataset;
pub mod emitter;
pub mod eval;
pub mod inference;
pub mod mt;
pub mod prompting;
pub mod retrieval;
pub mod termbank;
pub mod util;

pub use corpus::{CleanPolicy, CorpusRecord, StyleDomain};
pub use dataset::{DatasetSplit, PseudoPair};
pub use mt::{MtBackendSpec, MtGateway, RoundtripResult};
pub use prompting::{PromptSpec, RenderedPrompt, Template};
pub use retrieval::{ShotSet, VectorIndex};
pub use termbank::{TermBank, TermPair};
pub use eval::{EvalReport, StyleJudge};
