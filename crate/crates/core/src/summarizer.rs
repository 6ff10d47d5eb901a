//! Prompt registry and the summarization phase (poem -> summary).

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Poem;
use crate::providers::{ChatProvider, ChatRequest, ProviderError};

pub const POEM_PLACEHOLDER: &str = "{{poem}}";
pub const CONTEXT_PLACEHOLDER: &str = "{{context}}";

const DEFAULT_REGISTRY: &str = include_str!("../assets/prompts.json");

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("cannot read prompt registry {path}: {message}")]
    Read { path: String, message: String },
    #[error("prompt registry is not valid JSON: {0}")]
    Parse(String),
    #[error("template {id}: {message}")]
    Registry { id: String, message: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template {id} is a {actual} template, expected {expected}")]
    Kind {
        id: String,
        expected: TemplateKind,
        actual: TemplateKind,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Summarization,
    Instruction,
}

impl TemplateKind {
    pub fn placeholder(self) -> &'static str {
        match self {
            TemplateKind::Summarization => POEM_PLACEHOLDER,
            TemplateKind::Instruction => CONTEXT_PLACEHOLDER,
        }
    }
}

impl std::fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TemplateKind::Summarization => "summarization",
            TemplateKind::Instruction => "instruction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub kind: TemplateKind,
    pub text: String,
    pub round_index: u32,
}

impl PromptTemplate {
    /// Checks the placeholder rule: exactly one slot, of the kind's own name.
    pub fn validate(&self) -> Result<(), SummarizerError> {
        let err = |message: String| SummarizerError::Registry {
            id: self.id.clone(),
            message,
        };
        if self.id.trim().is_empty() {
            return Err(err("empty id".into()));
        }
        if self.round_index == 0 {
            return Err(err("round_index must be >= 1".into()));
        }
        let own = self.kind.placeholder();
        let count = self.text.matches(own).count();
        if count != 1 {
            return Err(err(format!("expected exactly one {own} placeholder, found {count}")));
        }
        let other = match self.kind {
            TemplateKind::Summarization => CONTEXT_PLACEHOLDER,
            TemplateKind::Instruction => POEM_PLACEHOLDER,
        };
        if self.text.contains(other) {
            return Err(err(format!("{other} is not allowed in a {} template", self.kind)));
        }
        Ok(())
    }

    /// The instruction sentence without its placeholder line.
    pub fn instruction_text(&self) -> &str {
        self.text
            .split(self.kind.placeholder())
            .next()
            .unwrap_or("")
            .trim_end()
    }

    pub fn expect_kind(&self, expected: TemplateKind) -> Result<(), SummarizerError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(SummarizerError::Kind {
                id: self.id.clone(),
                expected,
                actual: self.kind,
            })
        }
    }

    pub(crate) fn fill(&self, value: &str) -> String {
        self.text.replacen(self.kind.placeholder(), value, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    templates: Vec<PromptTemplate>,
}

impl PromptRegistry {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self, SummarizerError> {
        let mut seen = std::collections::HashSet::new();
        for t in &templates {
            t.validate()?;
            if !seen.insert(t.id.as_str()) {
                return Err(SummarizerError::Registry {
                    id: t.id.clone(),
                    message: "duplicate id".into(),
                });
            }
        }
        Ok(Self { templates })
    }

    pub fn from_json(text: &str) -> Result<Self, SummarizerError> {
        let templates: Vec<PromptTemplate> =
            serde_json::from_str(text).map_err(|e| SummarizerError::Parse(e.to_string()))?;
        Self::new(templates)
    }

    /// The bundled registry: seven summarization prompts (R1-R7) and six
    /// instruction prompts (I1-I6).
    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_REGISTRY).expect("bundled prompt registry is valid")
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, SummarizerError> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| SummarizerError::UnknownTemplate(id.to_string()))
    }

    pub fn of_kind(&self, kind: TemplateKind) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter().filter(move |t| t.kind == kind)
    }
}

pub fn registry_load(path: &Path) -> Result<PromptRegistry, SummarizerError> {
    let text = std::fs::read_to_string(path).map_err(|e| SummarizerError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    PromptRegistry::from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Prefix the poem with a `Title: ...` line.
    #[serde(default)]
    pub include_title: bool,
}

pub fn render_prompt(t: &PromptTemplate, poem: &Poem) -> Result<String, SummarizerError> {
    render_prompt_with(t, poem, RenderOptions::default())
}

pub fn render_prompt_with(
    t: &PromptTemplate,
    poem: &Poem,
    opts: RenderOptions,
) -> Result<String, SummarizerError> {
    t.expect_kind(TemplateKind::Summarization)?;
    if opts.include_title && !poem.title.trim().is_empty() {
        Ok(t.fill(&format!("Title: {}\n{}", poem.title, poem.text)))
    } else {
        Ok(t.fill(&poem.text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub poem_id: String,
    pub text: String,
    pub template_id: String,
    pub model_tag: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SummarizeOptions {
    pub render: RenderOptions,
    pub seed: u64,
}

pub fn summarize(
    poem: &Poem,
    t: &PromptTemplate,
    chat: &dyn ChatProvider,
    opts: SummarizeOptions,
) -> Result<Summary, SummarizerError> {
    let prompt = render_prompt_with(t, poem, opts.render)?;
    let text = chat.complete(&ChatRequest::new(prompt).with_seed(opts.seed))?;
    let text = text.trim();
    if text.is_empty() {
        return Err(ProviderError::EmptyResponse.into());
    }
    Ok(Summary {
        poem_id: poem.id.clone(),
        text: text.to_string(),
        template_id: t.id.clone(),
        model_tag: chat.model_tag().to_string(),
        created_at: Utc::now(),
    })
}
