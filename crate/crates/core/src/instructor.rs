//! Instruction generation (key elements -> diffusion instruction) and the
//! per-poem image call.

use serde::{Deserialize, Serialize};

use crate::corpus::word_count;
use crate::poekey::KeyElements;
use crate::providers::{
    ChatProvider, ChatRequest, ImageArtifact, ImageGenerator, ImageParams, ProviderError,
};
use crate::summarizer::{PromptTemplate, SummarizerError, TemplateKind};

pub const MAX_INSTRUCTION_WORDS: usize = 50;
pub const SHORTEN_REQUEST: &str = "Shorten to under 50 words.";
pub const OVER_LENGTH_WARNING: &str = "instruction exceeds 50 words";

/// `Emotion: ..\nTheme: ..\nVisual elements: a, b, c`, with `(none)` for an
/// empty element list.
pub fn context_block(e: &KeyElements) -> String {
    let visuals = if e.visual_elements.is_empty() {
        "(none)".to_string()
    } else {
        e.visual_elements.join(", ")
    };
    format!(
        "Emotion: {}\nTheme: {}\nVisual elements: {}",
        e.emotion, e.theme, visuals
    )
}

pub fn build_instruction_prompt(
    e: &KeyElements,
    t: &PromptTemplate,
) -> Result<String, SummarizerError> {
    build_instruction_prompt_with(e, t, None)
}

/// Like [`build_instruction_prompt`], optionally appending the summary after
/// the context block.
pub fn build_instruction_prompt_with(
    e: &KeyElements,
    t: &PromptTemplate,
    summary: Option<&str>,
) -> Result<String, SummarizerError> {
    t.expect_kind(TemplateKind::Instruction)?;
    let mut context = context_block(e);
    if let Some(s) = summary {
        context.push_str("\nSummary: ");
        context.push_str(s);
    }
    Ok(t.fill(&context))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub poem_id: String,
    pub template_id: String,
    pub context_block: String,
    pub instruction_text: String,
    pub word_count: usize,
    pub retries: u32,
    pub over_length: bool,
}

impl InstructionRecord {
    pub fn id(&self) -> String {
        format!("{}:{}", self.poem_id, self.template_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstructOptions {
    pub seed: u64,
    pub append_summary: Option<String>,
}

/// Asks the chat provider for an instruction. Over-long answers get one
/// corrective re-prompt; if still too long the text is kept and flagged.
pub fn generate_instruction(
    e: &KeyElements,
    t: &PromptTemplate,
    chat: &dyn ChatProvider,
    opts: &InstructOptions,
) -> Result<InstructionRecord, SummarizerError> {
    let prompt = build_instruction_prompt_with(e, t, opts.append_summary.as_deref())?;
    let ask = |p: String| -> Result<String, ProviderError> {
        let text = chat.complete(&ChatRequest::new(p).with_seed(opts.seed))?;
        let text = text.trim().to_string();
        if text.is_empty() {
            Err(ProviderError::EmptyResponse)
        } else {
            Ok(text)
        }
    };
    let mut text = ask(prompt.clone())?;
    let mut retries = 0;
    if word_count(&text) > MAX_INSTRUCTION_WORDS {
        retries = 1;
        text = ask(format!(
            "{prompt}\n\nPrevious answer:\n{text}\n\n{SHORTEN_REQUEST}"
        ))?;
    }
    let words = word_count(&text);
    Ok(InstructionRecord {
        poem_id: e.poem_id.clone(),
        template_id: t.id.clone(),
        context_block: context_block(e),
        instruction_text: text,
        word_count: words,
        retries,
        over_length: words > MAX_INSTRUCTION_WORDS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub poem_id: String,
    pub instruction_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationRecord {
    pub fn succeeded(&self) -> bool {
        self.image.is_some()
    }
}

/// One image per poem. Provider failures produce a record with the error
/// filled in instead of an `Err`, so a batch can carry on.
pub fn generate_image_for_poem(
    r: &InstructionRecord,
    imgp: &dyn ImageGenerator,
    params: &ImageParams,
) -> GenerationRecord {
    let outcome = imgp.generate(&r.instruction_text, params);
    let (image, error) = match outcome {
        Ok(img) => (Some(img), None),
        Err(e) => (None, Some(e.to_string())),
    };
    GenerationRecord {
        poem_id: r.poem_id.clone(),
        instruction_id: r.id(),
        image,
        image_path: None,
        seed: params.seed,
        error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poekey::{ExtractionMethod, ExtractionProvenance};
    use crate::providers::mock::{decode_png, MockChat, MockImageGenerator, ScriptedChat, INSTRUCTION_TEXT_KEY};
    use crate::summarizer::PromptRegistry;

    fn elements(visuals: &[&str]) -> KeyElements {
        KeyElements {
            poem_id: "parrot".into(),
            emotion: "sadness".into(),
            visual_elements: visuals.iter().map(|s| s.to_string()).collect(),
            theme: "death".into(),
            theme_similarity: 0.4,
            extraction_method: ExtractionProvenance {
                emotion: ExtractionMethod::EmbeddingCentroid,
                visual_elements: ExtractionMethod::RuleBased,
                theme: ExtractionMethod::EmbeddingCentroid,
            },
            warnings: vec![],
        }
    }

    fn words(n: usize) -> String {
        vec!["word"; n].join(" ")
    }

    #[test]
    fn prompt_contains_context_and_template() {
        let reg = PromptRegistry::bundled();
        let i5 = reg.get("I5").unwrap();
        let p = build_instruction_prompt(&elements(&["parrot", "jungle"]), i5).unwrap();
        assert!(p.contains("Emotion: sadness"));
        assert!(p.contains("Theme: death"));
        assert!(p.contains("Visual elements: parrot, jungle"));
        assert!(p.contains("reflects the poem's emotional depth"));
        assert!(!p.contains("{{context}}"));

        let p = build_instruction_prompt(&elements(&[]), i5).unwrap();
        assert!(p.contains("Visual elements: (none)"));
        assert_eq!(context_block(&elements(&["b", "a"])), context_block(&elements(&["b", "a"])));

        assert!(build_instruction_prompt(&elements(&[]), reg.get("R6").unwrap()).is_err());
        let with_summary =
            build_instruction_prompt_with(&elements(&[]), i5, Some("A parrot waits.")).unwrap();
        assert!(with_summary.ends_with("Summary: A parrot waits."));
    }

    #[test]
    fn mock_instruction() {
        let reg = PromptRegistry::bundled();
        let e = elements(&["parrot", "branch", "jungle"]);
        let chat = MockChat::new(5);
        let r = generate_instruction(&e, reg.get("I5").unwrap(), &chat, &InstructOptions::default())
            .unwrap();
        assert_eq!(r.word_count, word_count(&r.instruction_text));
        assert!(r.instruction_text.contains("parrot, branch, jungle"));
        assert!(!r.over_length);
        assert_eq!(r.id(), "parrot:I5");
    }

    #[test]
    fn shortening_retry() {
        let reg = PromptRegistry::bundled();
        let chat = ScriptedChat::new([words(60), words(40)]);
        let r = generate_instruction(&elements(&["a"]), reg.get("I5").unwrap(), &chat, &InstructOptions::default())
            .unwrap();
        assert_eq!((r.word_count, r.retries, r.over_length), (40, 1, false));
        assert!(chat.prompts()[1].ends_with(SHORTEN_REQUEST));

        let chat = ScriptedChat::new([words(60), words(55)]);
        let r = generate_instruction(&elements(&["a"]), reg.get("I5").unwrap(), &chat, &InstructOptions::default())
            .unwrap();
        assert_eq!((r.word_count, r.retries, r.over_length), (55, 1, true));
        assert_eq!(chat.calls(), 2);

        let chat = ScriptedChat::new([words(50)]);
        let r = generate_instruction(&elements(&["a"]), reg.get("I5").unwrap(), &chat, &InstructOptions::default())
            .unwrap();
        assert_eq!((r.retries, r.over_length), (0, false));
    }

    struct Failing;
    impl ImageGenerator for Failing {
        fn generate(&self, _: &str, _: &ImageParams) -> Result<ImageArtifact, ProviderError> {
            Err(ProviderError::Generation("content policy".into()))
        }
        fn provider_tag(&self) -> &str {
            "failing"
        }
    }

    #[test]
    fn image_generation_records() {
        let reg = PromptRegistry::bundled();
        let chat = MockChat::new(0);
        let r = generate_instruction(&elements(&["parrot"]), reg.get("I5").unwrap(), &chat, &InstructOptions::default())
            .unwrap();
        let params = ImageParams {
            width: 8,
            height: 8,
            seed: Some(9),
        };
        let a = generate_image_for_poem(&r, &MockImageGenerator::new(), &params);
        let b = generate_image_for_poem(&r, &MockImageGenerator::new(), &params);
        assert!(a.succeeded());
        assert_eq!(a.image.as_ref().unwrap().bytes, b.image.as_ref().unwrap().bytes);
        let decoded = decode_png(&a.image.as_ref().unwrap().bytes).unwrap();
        assert_eq!(decoded.text_value(INSTRUCTION_TEXT_KEY), Some(r.instruction_text.as_str()));
        assert_eq!(a.seed, Some(9));

        let failed = generate_image_for_poem(&r, &Failing, &params);
        assert!(!failed.succeeded());
        assert!(failed.error.unwrap().contains("content policy"));
    }
}
