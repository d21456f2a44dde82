//! Dense retrieval with prompt-based pseudo-relevance feedback from
//! precomputed passage features, plus sparse baselines and evaluation.

pub mod backend;
pub mod corpus;
pub mod encode;
pub mod eval;
pub mod features;
pub mod index;
pub mod prf;
pub mod sparse;
pub mod synth;

pub use backend::{
    BackendError, CallCounts, ChatBackend, ChatMessage, ChatRequest, ChatResponse, CountingBackend,
    EmbedBackend, MockBackend, PlantedTopicBackend, RankSensitivity, RemoteBackend, RemoteConfig,
    Vector,
};
pub use corpus::{
    Corpus, CorpusError, Passage, PassageId, QrelSet, Query, QueryId, RunEntry, RunFile,
};
pub use encode::{DenseRepresentation, EncodeError, EncodePromptKind};
pub use eval::{EvalError, MetricReport, SignificanceResult};
pub use features::{FeatureError, FeatureRecord, FeatureStore, FeatureType};
pub use index::{DenseIndex, IndexError, SearchResult};
pub use prf::{FeedbackBundle, FeedbackItem, FeedbackSource, PrfConfig, PrfError, PrfRunRecord};
