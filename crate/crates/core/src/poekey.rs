//! Key-element extraction: dominant emotion, visual elements and theme of a
//! poem summary.
//!
//! Theme and emotion use nearest-centroid classification: the summary is
//! embedded once and compared by cosine similarity against the embedding of
//! each registry entry's `"name: description"` string. The highest score wins;
//! ties go to the entry listed first.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::providers::{ChatProvider, ChatRequest, Embedder, EmbeddingVector, ProviderError};
use crate::summarizer::Summary;
use crate::textmetrics::is_punctuation;

const DEFAULT_THEMES: &str = include_str!("../assets/themes.json");
const DEFAULT_EMOTIONS: &str = include_str!("../assets/emotions.json");
const DEFAULT_LEXICON: &str = include_str!("../assets/concrete_nouns.txt");

pub const FALLBACK_EMOTION: &str = "neutral";
pub const NO_VISUAL_ELEMENTS: &str = "no visual elements found";

const PRONOUNS: [&str; 12] = [
    "i", "me", "you", "he", "him", "she", "her", "it", "we", "us", "they", "them",
];

/// Capitalized words that never count as named entities.
const FUNCTION_WORDS: [&str; 40] = [
    "a", "an", "the", "and", "or", "but", "nor", "so", "yet", "for", "in", "on", "at", "to",
    "of", "by", "with", "from", "into", "upon", "as", "if", "when", "where", "while", "who",
    "what", "which", "that", "this", "these", "those", "there", "then", "how", "why", "not",
    "no", "all", "o",
];

#[derive(Debug, Error)]
pub enum PoeKeyError {
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("{0} registry is empty")]
    EmptyRegistry(&'static str),
    #[error("{kind} registry: {message}")]
    Registry {
        kind: &'static str,
        message: String,
    },
    #[error("fallback emotion `{FALLBACK_EMOTION}` is not in the emotion registry")]
    MissingFallback,
    #[error("chat-based extraction requested but no chat provider is configured")]
    NoChat,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub description: String,
    pub centroid: EmbeddingVector,
}

pub type ThemeEntry = LabelEntry;
pub type EmotionEntry = LabelEntry;

/// An immutable label registry (themes or emotions) with embedded centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRegistry {
    kind: &'static str,
    entries: Vec<LabelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CentroidCache {
    model_tag: String,
    fingerprint: String,
    centroids: Vec<Vec<f64>>,
}

fn fingerprint(specs: &[LabelSpec]) -> String {
    let mut h = Sha256::new();
    for s in specs {
        h.update(s.name.as_bytes());
        h.update([0]);
        h.update(s.description.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn centroid_text(spec: &LabelSpec) -> String {
    format!("{}: {}", spec.name, spec.description)
}

impl LabelRegistry {
    fn check_specs(kind: &'static str, specs: &[LabelSpec]) -> Result<(), PoeKeyError> {
        if specs.is_empty() {
            return Err(PoeKeyError::EmptyRegistry(kind));
        }
        let mut seen = HashSet::new();
        for s in specs {
            let reg = |message: String| PoeKeyError::Registry { kind, message };
            if s.name.trim().is_empty() {
                return Err(reg("entry with empty name".into()));
            }
            if s.description.trim().is_empty() {
                return Err(reg(format!("`{}` has an empty description", s.name)));
            }
            if !seen.insert(s.name.to_lowercase()) {
                return Err(reg(format!("duplicate label `{}`", s.name)));
            }
        }
        Ok(())
    }

    /// Embeds every entry's `"name: description"` string.
    pub fn build(
        kind: &'static str,
        specs: Vec<LabelSpec>,
        embedder: &dyn Embedder,
    ) -> Result<Self, PoeKeyError> {
        Self::check_specs(kind, &specs)?;
        let texts: Vec<String> = specs.iter().map(centroid_text).collect();
        let vectors = embedder.embed(&texts)?;
        crate::providers::check_embedding_batch(texts.len(), &vectors)?;
        Ok(Self::assemble(kind, specs, vectors))
    }

    fn assemble(kind: &'static str, specs: Vec<LabelSpec>, vectors: Vec<EmbeddingVector>) -> Self {
        let entries = specs
            .into_iter()
            .zip(vectors)
            .map(|(s, centroid)| LabelEntry {
                name: s.name,
                description: s.description,
                centroid,
            })
            .collect();
        Self { kind, entries }
    }

    pub fn parse_specs(kind: &'static str, json: &str) -> Result<Vec<LabelSpec>, PoeKeyError> {
        serde_json::from_str(json).map_err(|e| PoeKeyError::Registry {
            kind,
            message: e.to_string(),
        })
    }

    /// Loads `[{"name", "description"}]` from `path`, reusing centroids cached
    /// beside it for the embedder's model tag when the registry is unchanged.
    pub fn load(
        kind: &'static str,
        path: &Path,
        embedder: &dyn Embedder,
    ) -> Result<Self, PoeKeyError> {
        let json = std::fs::read_to_string(path).map_err(|e| PoeKeyError::Registry {
            kind,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let specs = Self::parse_specs(kind, &json)?;
        Self::check_specs(kind, &specs)?;
        let cache_path = Self::cache_path(path, embedder.model_tag());
        let print = fingerprint(&specs);
        if let Some(cached) = std::fs::read_to_string(&cache_path)
            .ok()
            .and_then(|t| serde_json::from_str::<CentroidCache>(&t).ok())
            .filter(|c| {
                c.model_tag == embedder.model_tag()
                    && c.fingerprint == print
                    && c.centroids.len() == specs.len()
            })
        {
            let vectors = cached
                .centroids
                .into_iter()
                .map(|v| EmbeddingVector::new(v, embedder.model_tag()))
                .collect();
            return Ok(Self::assemble(kind, specs, vectors));
        }
        let registry = Self::build(kind, specs, embedder)?;
        let cache = CentroidCache {
            model_tag: embedder.model_tag().to_string(),
            fingerprint: print,
            centroids: registry
                .entries
                .iter()
                .map(|e| e.centroid.values.clone())
                .collect(),
        };
        // a read-only registry directory just means no cache
        if let Ok(text) = serde_json::to_string(&cache) {
            let _ = std::fs::write(&cache_path, text);
        }
        Ok(registry)
    }

    pub fn cache_path(path: &Path, model_tag: &str) -> PathBuf {
        let safe: String = model_tag
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".centroids.{safe}.json"));
        path.with_file_name(name)
    }

    pub fn bundled_themes(embedder: &dyn Embedder) -> Result<Self, PoeKeyError> {
        Self::build("theme", Self::parse_specs("theme", DEFAULT_THEMES)?, embedder)
    }

    pub fn bundled_emotions(embedder: &dyn Embedder) -> Result<Self, PoeKeyError> {
        Self::build("emotion", Self::parse_specs("emotion", DEFAULT_EMOTIONS)?, embedder)
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    fn find_ignore_case(&self, name: &str) -> Option<&LabelEntry> {
        self.entries.iter().find(|e| e.name.eq_ignore_ascii_case(name))
    }
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, PoeKeyError> {
    cosine_values(&u.values, &v.values)
}

pub fn cosine_values(u: &[f64], v: &[f64]) -> Result<f64, PoeKeyError> {
    if u.len() != v.len() {
        return Err(PoeKeyError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(PoeKeyError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Argmax of cosine similarity over the entries; the first entry wins ties.
pub fn nearest_label<'a>(
    query: &EmbeddingVector,
    entries: &'a [LabelEntry],
) -> Result<(&'a LabelEntry, f64), PoeKeyError> {
    let mut best: Option<(&LabelEntry, f64)> = None;
    for entry in entries {
        let score = cosine_similarity(query, &entry.centroid)?;
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((entry, score));
        }
    }
    best.ok_or(PoeKeyError::EmptyRegistry("label"))
}

fn embed_summary(summary: &Summary, embedder: &dyn Embedder) -> Result<EmbeddingVector, PoeKeyError> {
    let mut v = embedder.embed(std::slice::from_ref(&summary.text))?;
    crate::providers::check_embedding_batch(1, &v)?;
    Ok(v.remove(0))
}

pub fn extract_theme(
    summary: &Summary,
    themes: &LabelRegistry,
    embedder: &dyn Embedder,
) -> Result<(String, f64), PoeKeyError> {
    let query = embed_summary(summary, embedder)?;
    let (entry, score) = nearest_label(&query, themes.entries())?;
    Ok((entry.name.clone(), score))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    EmbeddingCentroid,
    ChatExtraction,
    RuleBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionMethod {
    #[default]
    Embedding,
    Chat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMethod {
    #[default]
    RuleBased,
    ChatExtraction,
}

pub fn emotion_prompt(emotions: &LabelRegistry, summary_text: &str) -> String {
    let labels: Vec<&str> = emotions.names().collect();
    format!(
        "Identify the single most dominant emotion in the poem summary below. Answer with exactly one label from: {}\n{}",
        labels.join(", "),
        summary_text
    )
}

/// Classifies the dominant emotion. The chat method asks once, retries once
/// on an off-registry answer, then falls back to `neutral`.
pub fn extract_emotion(
    summary: &Summary,
    emotions: &LabelRegistry,
    method: EmotionMethod,
    embedder: &dyn Embedder,
    chat: Option<&dyn ChatProvider>,
) -> Result<(String, ExtractionMethod), PoeKeyError> {
    match method {
        EmotionMethod::Embedding => {
            let query = embed_summary(summary, embedder)?;
            let (entry, _) = nearest_label(&query, emotions.entries())?;
            Ok((entry.name.clone(), ExtractionMethod::EmbeddingCentroid))
        }
        EmotionMethod::Chat => {
            let chat = chat.ok_or(PoeKeyError::NoChat)?;
            let fallback = emotions
                .find_ignore_case(FALLBACK_EMOTION)
                .ok_or(PoeKeyError::MissingFallback)?;
            let req = ChatRequest::new(emotion_prompt(emotions, &summary.text));
            for _ in 0..2 {
                let answer = chat.complete(&req)?;
                let label = answer.trim().trim_matches(is_punctuation).trim();
                if let Some(entry) = emotions.find_ignore_case(label) {
                    return Ok((entry.name.clone(), ExtractionMethod::ChatExtraction));
                }
            }
            Ok((fallback.name.clone(), ExtractionMethod::RuleBased))
        }
    }
}

/// Bundled concrete-noun lexicon for the rule-based extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounLexicon {
    nouns: HashSet<String>,
}

impl NounLexicon {
    pub fn parse(text: &str) -> Self {
        let nouns = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { nouns }
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_LEXICON)
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self {
            nouns: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    /// Matches the word itself or a simple plural of a listed noun.
    pub fn contains(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        if self.nouns.contains(&w) {
            return true;
        }
        let singulars = [
            w.strip_suffix("ies").map(|s| format!("{s}y")),
            w.strip_suffix("es").map(str::to_string),
            w.strip_suffix('s').map(str::to_string),
        ];
        singulars.into_iter().flatten().any(|s| self.nouns.contains(&s))
    }

    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }
}

fn ends_sentence(raw: &str) -> bool {
    let trimmed = raw.trim_end_matches(['"', '\'', ')', '\u{201D}', '\u{2019}']);
    trimmed.ends_with(['.', '!', '?', ':'])
}

/// Named entities (capitalized mid-sentence), lexicon nouns and personal
/// pronouns, in summary order, deduplicated case-insensitively.
pub fn rule_based_visual_elements(text: &str, lexicon: &NounLexicon) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut sentence_start = true;
    for raw in text.split_whitespace() {
        let word = raw.trim_matches(is_punctuation);
        let starts = sentence_start;
        sentence_start = ends_sentence(raw);
        if word.is_empty() {
            continue;
        }
        let lower = word.to_lowercase();
        let capitalized = word.chars().next().is_some_and(char::is_uppercase);
        let named_entity = capitalized
            && !starts
            && word.chars().any(char::is_lowercase)
            && !FUNCTION_WORDS.contains(&lower.as_str());
        let hit = named_entity || lexicon.contains(word) || PRONOUNS.contains(&lower.as_str());
        if hit && seen.insert(lower) {
            out.push(word.to_string());
        }
    }
    out
}

pub fn visual_prompt(summary_text: &str) -> String {
    format!(
        "List the concrete nouns, pronouns, and named entities that appear in the poem summary below. Respond with a JSON array of strings only.\n{summary_text}"
    )
}

/// Extracts a JSON string array from a chat answer, tolerating code fences
/// and surrounding prose.
pub fn parse_json_list(answer: &str) -> Option<Vec<String>> {
    let start = answer.find('[')?;
    let end = answer.rfind(']')?;
    if end < start {
        return None;
    }
    let items: Vec<String> = serde_json::from_str(&answer[start..=end]).ok()?;
    Some(
        items
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    )
}

fn dedupe_case_insensitive(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|s| seen.insert(s.to_lowercase()))
        .collect()
}

pub fn extract_visual_elements(
    summary: &Summary,
    method: VisualMethod,
    chat: Option<&dyn ChatProvider>,
    lexicon: &NounLexicon,
) -> Result<(Vec<String>, ExtractionMethod), PoeKeyError> {
    if method == VisualMethod::ChatExtraction {
        let chat = chat.ok_or(PoeKeyError::NoChat)?;
        let req = ChatRequest::new(visual_prompt(&summary.text));
        for _ in 0..2 {
            let answer = chat.complete(&req)?;
            if let Some(items) = parse_json_list(&answer) {
                return Ok((dedupe_case_insensitive(items), ExtractionMethod::ChatExtraction));
            }
        }
    }
    Ok((
        rule_based_visual_elements(&summary.text, lexicon),
        ExtractionMethod::RuleBased,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionProvenance {
    pub emotion: ExtractionMethod,
    pub visual_elements: ExtractionMethod,
    pub theme: ExtractionMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyElements {
    pub poem_id: String,
    pub emotion: String,
    pub visual_elements: Vec<String>,
    pub theme: String,
    pub theme_similarity: f64,
    pub extraction_method: ExtractionProvenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PoeKeyRegistries {
    pub themes: LabelRegistry,
    pub emotions: LabelRegistry,
    pub lexicon: NounLexicon,
}

impl PoeKeyRegistries {
    pub fn bundled(embedder: &dyn Embedder) -> Result<Self, PoeKeyError> {
        Ok(Self {
            themes: LabelRegistry::bundled_themes(embedder)?,
            emotions: LabelRegistry::bundled_emotions(embedder)?,
            lexicon: NounLexicon::bundled(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoeKeyOptions {
    #[serde(default)]
    pub emotion: EmotionMethod,
    #[serde(default)]
    pub visual: VisualMethod,
}

/// Runs the three extractors on one summary. An empty visual-element list is
/// flagged in `warnings`, never an error.
pub fn poekey(
    summary: &Summary,
    registries: &PoeKeyRegistries,
    embedder: &dyn Embedder,
    chat: Option<&dyn ChatProvider>,
    opts: PoeKeyOptions,
) -> Result<KeyElements, PoeKeyError> {
    let query = embed_summary(summary, embedder)?;
    let (theme, theme_similarity) = nearest_label(&query, registries.themes.entries())?;

    let (emotion, emotion_method) = match opts.emotion {
        EmotionMethod::Embedding => {
            let (entry, _) = nearest_label(&query, registries.emotions.entries())?;
            (entry.name.clone(), ExtractionMethod::EmbeddingCentroid)
        }
        EmotionMethod::Chat => extract_emotion(
            summary,
            &registries.emotions,
            EmotionMethod::Chat,
            embedder,
            chat,
        )?,
    };

    let (visual_elements, visual_method) =
        extract_visual_elements(summary, opts.visual, chat, &registries.lexicon)?;
    let mut warnings = Vec::new();
    if visual_elements.is_empty() {
        warnings.push(NO_VISUAL_ELEMENTS.to_string());
    }

    Ok(KeyElements {
        poem_id: summary.poem_id.clone(),
        emotion,
        visual_elements,
        theme: theme.name.clone(),
        theme_similarity,
        extraction_method: ExtractionProvenance {
            emotion: emotion_method,
            visual_elements: visual_method,
            theme: ExtractionMethod::EmbeddingCentroid,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{MockChat, MockEmbedder, ScriptedChat};
    use chrono::TimeZone;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "t")
    }

    fn summary(text: &str) -> Summary {
        Summary {
            poem_id: "p".into(),
            text: text.into(),
            template_id: "R6".into(),
            model_tag: "t".into(),
            created_at: chrono::Utc.timestamp_opt(0, 0).unwrap(),
        }
    }

    fn entry(name: &str, centroid: &[f64]) -> LabelEntry {
        LabelEntry {
            name: name.into(),
            description: format!("{name} description"),
            centroid: v(centroid),
        }
    }

    /// Embedder that returns a fixed vector for every text.
    struct Fixed(Vec<f64>);
    impl Embedder for Fixed {
        fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
            Ok(texts.iter().map(|_| v(&self.0)).collect())
        }
        fn model_tag(&self) -> &str {
            "fixed"
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(PoeKeyError::ZeroVector)
        ));
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(PoeKeyError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn theme_argmax_and_ties() {
        let reg = LabelRegistry {
            kind: "theme",
            entries: vec![entry("A", &[1.0, 0.0]), entry("B", &[0.0, 1.0])],
        };
        let (name, sim) = extract_theme(&summary("x"), &reg, &Fixed(vec![1.0, 0.0])).unwrap();
        assert_eq!((name.as_str(), sim), ("A", 1.0));

        let tied = LabelRegistry {
            kind: "theme",
            entries: vec![entry("first", &[0.6, 0.8]), entry("second", &[0.6, 0.8])],
        };
        let (name, _) = extract_theme(&summary("x"), &tied, &Fixed(vec![0.3, 0.1])).unwrap();
        assert_eq!(name, "first");
    }

    #[test]
    fn emotion_embedding_and_chat_fallback() {
        let reg = LabelRegistry {
            kind: "emotion",
            entries: vec![
                entry("sadness", &[1.0, 0.0]),
                entry("joy", &[0.0, 1.0]),
                entry("neutral", &[0.5, 0.5]),
            ],
        };
        let embedder = Fixed(vec![1.0, 0.0]);
        let (e, m) =
            extract_emotion(&summary("x"), &reg, EmotionMethod::Embedding, &embedder, None).unwrap();
        assert_eq!((e.as_str(), m), ("sadness", ExtractionMethod::EmbeddingCentroid));

        let chat = ScriptedChat::new(["melancholy", "melancholy"]);
        let (e, m) =
            extract_emotion(&summary("x"), &reg, EmotionMethod::Chat, &embedder, Some(&chat))
                .unwrap();
        assert_eq!((e.as_str(), m), ("neutral", ExtractionMethod::RuleBased));
        assert_eq!(chat.calls(), 2);

        let chat = ScriptedChat::new(["melancholy", " Joy."]);
        let (e, m) =
            extract_emotion(&summary("x"), &reg, EmotionMethod::Chat, &embedder, Some(&chat))
                .unwrap();
        assert_eq!((e.as_str(), m), ("joy", ExtractionMethod::ChatExtraction));

        let no_neutral = LabelRegistry {
            kind: "emotion",
            entries: vec![entry("joy", &[1.0])],
        };
        let chat = ScriptedChat::new(["x"]);
        assert!(matches!(
            extract_emotion(&summary("x"), &no_neutral, EmotionMethod::Chat, &embedder, Some(&chat)),
            Err(PoeKeyError::MissingFallback)
        ));
    }

    #[test]
    fn rule_based_visuals() {
        let lex = NounLexicon::from_words(["parrot", "jungle"]);
        assert_eq!(
            rule_based_visual_elements("A parrot waits in the jungle.", &lex),
            ["parrot", "jungle"]
        );
        assert!(rule_based_visual_elements("Quietly waiting, always.", &lex).is_empty());

        let lex = NounLexicon::bundled();
        let out = rule_based_visual_elements(
            "The speaker remembers Mary by the River. She sees parrots and a Parrot in Brazil.",
            &lex,
        );
        assert_eq!(out, ["Mary", "River", "She", "parrots", "Parrot", "Brazil"]);
    }

    #[test]
    fn chat_visuals_parse_and_fallback() {
        let lex = NounLexicon::from_words(["parrot", "jungle"]);
        let chat = ScriptedChat::new([r#"```json
["parrot","branch","jungle","Parrot"]
```"#]);
        let (items, m) = extract_visual_elements(
            &summary("A parrot waits in the jungle."),
            VisualMethod::ChatExtraction,
            Some(&chat),
            &lex,
        )
        .unwrap();
        assert_eq!(items, ["parrot", "branch", "jungle"]);
        assert_eq!(m, ExtractionMethod::ChatExtraction);

        let chat = ScriptedChat::new(["not json", "still not json"]);
        let (items, m) = extract_visual_elements(
            &summary("A parrot waits in the jungle."),
            VisualMethod::ChatExtraction,
            Some(&chat),
            &lex,
        )
        .unwrap();
        assert_eq!(items, ["parrot", "jungle"]);
        assert_eq!(m, ExtractionMethod::RuleBased);
        assert_eq!(chat.calls(), 2);
    }

    #[test]
    fn poekey_is_deterministic_and_flags_empty_visuals() {
        let embedder = MockEmbedder::new(11);
        let regs = PoeKeyRegistries::bundled(&embedder).unwrap();
        assert_eq!(regs.themes.entries().len(), 12);
        assert_eq!(regs.emotions.entries().len(), 7);
        let s = summary("A parrot waits in the jungle for a friend who died.");
        let a = poekey(&s, &regs, &embedder, None, PoeKeyOptions::default()).unwrap();
        let b = poekey(&s, &regs, &embedder, None, PoeKeyOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(regs.themes.contains(&a.theme));
        assert!(regs.emotions.contains(&a.emotion));

        let chat = MockChat::new(0);
        let c = poekey(
            &summary("Quietly, always, softly."),
            &regs,
            &embedder,
            Some(&chat),
            PoeKeyOptions {
                emotion: EmotionMethod::Chat,
                visual: VisualMethod::RuleBased,
            },
        )
        .unwrap();
        assert!(c.visual_elements.is_empty());
        assert_eq!(c.warnings, [NO_VISUAL_ELEMENTS]);
        assert_eq!(c.extraction_method.emotion, ExtractionMethod::ChatExtraction);
    }

    #[test]
    fn centroid_cache_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("themes.json");
        std::fs::write(&path, DEFAULT_THEMES).unwrap();
        let embedder = MockEmbedder::new(0);
        let first = LabelRegistry::load("theme", &path, &embedder).unwrap();
        let cache = LabelRegistry::cache_path(&path, embedder.model_tag());
        assert!(cache.exists());
        let second = LabelRegistry::load("theme", &path, &Fixed(vec![1.0])).unwrap();
        // different model tag: recomputed, not read from the mock cache
        assert_eq!(second.entries()[0].centroid.dimension(), 1);
        let third = LabelRegistry::load("theme", &path, &embedder).unwrap();
        assert_eq!(first, third);

        std::fs::write(&path, r#"[{"name":"x","description":""}]"#).unwrap();
        assert!(LabelRegistry::load("theme", &path, &embedder).is_err());
    }
}
