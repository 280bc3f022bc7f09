use std::path::Path;

use thiserror::Error;

use crate::retrieval::RetrievedContext;

const DEFAULT_GEN: &str = include_str!("../../templates/gen.txt");
const DEFAULT_RAG: &str = include_str!("../../templates/rag.txt");

pub const QUERY_SLOT: &str = "{query}";
pub const CONTEXT_SLOT: &str = "{context}";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("server template must not contain a {{context}} slot")]
    ContextInServerTemplate,
    #[error("{which} template is missing the {slot} slot")]
    MissingSlot { which: &'static str, slot: &'static str },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Server prompt (query only) and client prompt (context and query).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    template_gen: String,
    template_rag: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::new(DEFAULT_GEN, DEFAULT_RAG).expect("bundled templates are valid")
    }
}

impl PromptTemplates {
    pub fn new(template_gen: impl Into<String>, template_rag: impl Into<String>) -> Result<Self, TemplateError> {
        let template_gen = template_gen.into();
        let template_rag = template_rag.into();
        if template_gen.contains(CONTEXT_SLOT) {
            return Err(TemplateError::ContextInServerTemplate);
        }
        if !template_gen.contains(QUERY_SLOT) {
            return Err(TemplateError::MissingSlot {
                which: "server",
                slot: QUERY_SLOT,
            });
        }
        for slot in [QUERY_SLOT, CONTEXT_SLOT] {
            if !template_rag.contains(slot) {
                return Err(TemplateError::MissingSlot { which: "client", slot });
            }
        }
        Ok(Self {
            template_gen,
            template_rag,
        })
    }

    pub fn load(gen_path: Option<&Path>, rag_path: Option<&Path>) -> Result<Self, TemplateError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| TemplateError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let gen = gen_path.map(read).transpose()?.unwrap_or_else(|| DEFAULT_GEN.to_string());
        let rag = rag_path.map(read).transpose()?.unwrap_or_else(|| DEFAULT_RAG.to_string());
        Self::new(gen, rag)
    }

    pub fn template_gen(&self) -> &str {
        &self.template_gen
    }

    pub fn template_rag(&self) -> &str {
        &self.template_rag
    }

    pub fn render_gen(&self, query: &str) -> String {
        self.template_gen.replace(QUERY_SLOT, query)
    }

    /// Context slot first, so a `{query}` inside a document stays literal.
    pub fn render_rag(&self, context: &RetrievedContext, query: &str) -> String {
        let (head, tail) = self
            .template_rag
            .split_once(CONTEXT_SLOT)
            .expect("validated in constructor");
        let mut out = head.replace(QUERY_SLOT, query);
        out.push_str(&format_context(context));
        out.push_str(&tail.replace(QUERY_SLOT, query));
        out
    }
}

pub fn format_context(context: &RetrievedContext) -> String {
    context
        .texts()
        .map(|t| format!("- {t}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{ProfileDoc, ScoredDoc};

    #[test]
    fn server_template_cannot_carry_context() {
        assert!(matches!(
            PromptTemplates::new("{query} {context}", "{context}{query}"),
            Err(TemplateError::ContextInServerTemplate)
        ));
        assert!(PromptTemplates::new("{query}", "{query}").is_err());
    }

    #[test]
    fn defaults_render() {
        let t = PromptTemplates::default();
        let ctx = RetrievedContext {
            docs: vec![ScoredDoc {
                doc: ProfileDoc {
                    doc_id: 0,
                    text: "I keep bees {query}".into(),
                },
                score: 1.0,
            }],
        };
        let gen = t.render_gen("Why?");
        assert!(gen.contains("Why?") && !gen.contains("bees"));
        let rag = t.render_rag(&ctx, "Why?");
        assert!(rag.contains("- I keep bees {query}"));
        assert!(rag.contains("Why?"));
    }
}
