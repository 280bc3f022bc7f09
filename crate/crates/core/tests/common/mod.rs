#![allow(dead_code)]

use std::sync::Arc;

use specrag_core::config::ProtocolConfig;
use specrag_core::lm::{greedy_decode, LmBackend, TableLm};
use specrag_core::orchestrator::{Orchestrator, PromptTemplates};
use specrag_core::pii::PiiDetector;
use specrag_core::protocol::{DraftService, InProcessTransport};
use specrag_core::retrieval::{Bm25Retriever, Retriever, UserProfile};
use specrag_core::synth;

pub struct Rig {
    pub server: Arc<TableLm>,
    pub client: TableLm,
    pub transport: InProcessTransport,
    pub detector: PiiDetector,
    pub templates: PromptTemplates,
    pub keywords: Vec<String>,
}

impl Rig {
    pub fn new(server: TableLm, client: TableLm) -> Self {
        let server = Arc::new(server);
        let service = Arc::new(DraftService::new(server.clone(), "table"));
        Self {
            server,
            client,
            transport: InProcessTransport::new(service),
            detector: PiiDetector::default(),
            templates: PromptTemplates::default(),
            keywords: Vec::new(),
        }
    }

    pub fn plain(seed: u64) -> Self {
        let vocab = synth::vocabulary();
        let (server, client) = synth::table_pair(&vocab, seed);
        Self::new(server, client)
    }

    pub fn orch(&self) -> Orchestrator<'_> {
        Orchestrator {
            client: &self.client,
            transport: &self.transport,
            retriever: &Bm25Retriever,
            detector: &self.detector,
            templates: &self.templates,
            custom_keywords: &self.keywords,
        }
    }

    /// Standalone sampler on the server template alone.
    pub fn server_only(&self, query: &str, config: &ProtocolConfig) -> String {
        let vocab = self.server.vocabulary();
        let ctx = vocab.tokenize(&self.templates.render_gen(query)).unwrap();
        let out = self.server.sample_k(&ctx, config.max_new_tokens, &config.sampling).unwrap();
        vocab.detokenize(&out).unwrap()
    }

    /// Standalone greedy decode on the retrieval-conditioned template.
    pub fn client_greedy(&self, query: &str, profile: &UserProfile, config: &ProtocolConfig) -> String {
        let vocab = self.client.vocabulary();
        let context = Bm25Retriever.retrieve(profile, query, config.m).unwrap();
        let ctx = vocab.tokenize(&self.templates.render_rag(&context, query)).unwrap();
        let out = greedy_decode(&self.client, &ctx, config.max_new_tokens).unwrap();
        vocab.detokenize(&out).unwrap()
    }
}
