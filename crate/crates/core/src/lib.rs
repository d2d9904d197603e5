//! Two-stage expert routing for multiple-choice AIOps QA.
//!
//! The pipeline classifies each question's task with a general-purpose
//! LLM (optionally grounded by retrieved similar questions), then routes
//! it to the expert a benchmark leaderboard designates for that task.
//! Everything is testable end to end against deterministic mock
//! providers.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod leaderboard;
pub mod llm_client;
pub mod prompting;
pub mod retrieval;
pub mod router;

pub use dataset::{Dataset, OptionLetter, Question, Split, TaskLabel};
pub use error::{Error, ErrorKind, Result};
pub use evaluation::{Averaging, BaselineSpec, Confusion, EvalReport};
pub use leaderboard::{AnswerLogs, CapabilityMatrix, ExpertRef, TaskExpertMap};
pub use llm_client::{ChatModel, ChatRequest, Checkpoint, EndpointConfig, Stage};
pub use prompting::{Choice, ClassifierOutput, ExpertAnswer, TaskPrediction, TemplateSet};
pub use retrieval::{EmbeddingProvider, EmbeddingVector, KnowledgeBase, RetrievalResult};
pub use router::{Pipeline, RoutingDecision};
