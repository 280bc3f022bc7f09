//! Private personalized generation: a context-free server model drafts
//! tokens, a small client model holding the user's profile verifies and
//! corrects them, and the server only ever sees PII-filtered text.

pub mod audit;
pub mod config;
pub mod lm;
pub mod orchestrator;
pub mod pii;
pub mod protocol;
pub mod retrieval;
pub mod session;
pub mod synth;
pub mod transcript;
pub mod vocab;
