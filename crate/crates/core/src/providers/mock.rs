//! Deterministic offline providers.
//!
//! Every mock is a pure function of its inputs and a configured seed, so a
//! pipeline run against mocks reproduces byte for byte.
//!
//! Chat rules, checked in order against the user prompt (the "payload" is the
//! text after the first line break, or the whole prompt when there is none):
//!
//! 1. contains `Summarize` -> `SUMMARY: ` + first 30 whitespace tokens of the payload
//! 2. contains an `Emotion:`/`Theme:`/`Visual elements:` block -> a one-sentence image
//!    instruction assembled from those fields and a hash-chosen art style
//! 3. contains `Answer with exactly one label from:` -> the first listed label that
//!    occurs as a token after the label line, otherwise a hash-chosen label
//! 4. contains `JSON array` -> JSON array of up to six distinct payload words of
//!    five or more letters, in order
//! 5. anything else -> `RESPONSE <8 hex>: ` + first 30 payload tokens

use std::collections::HashSet;
use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    AlignmentScore, AlignmentScorer, ChatProvider, ChatRequest, Embedder, EmbeddingVector,
    ImageArtifact, ImageGenerator, ImageParams, ProviderError,
};
use crate::textmetrics::{is_punctuation, tokenize};

pub const MOCK_EMBEDDING_DIM: usize = 384;
pub const INSTRUCTION_TEXT_KEY: &str = "instruction";

const LABEL_MARKER: &str = "Answer with exactly one label from:";
const STYLES: [&str; 6] = [
    "watercolor",
    "oil painting",
    "ink wash",
    "soft pastel",
    "cinematic photograph",
    "storybook illustration",
];

pub fn digest(seed: u64, text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    h.finalize().into()
}

fn digest_u64(seed: u64, text: &str) -> u64 {
    let d = digest(seed, text);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn payload(prompt: &str) -> &str {
    prompt.split_once('\n').map(|(_, rest)| rest).unwrap_or(prompt)
}

fn first_tokens(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn field<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.trim().strip_prefix(name))
        .map(str::trim)
}

#[derive(Debug, Clone)]
pub struct MockChat {
    seed: u64,
}

impl MockChat {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn respond(&self, prompt: &str) -> String {
        let hash = digest_u64(self.seed, prompt);
        let body = payload(prompt);

        if prompt.contains("Summarize") {
            return format!("SUMMARY: {}", first_tokens(body, 30));
        }

        if let (Some(emotion), Some(theme), Some(visuals)) = (
            field(prompt, "Emotion:"),
            field(prompt, "Theme:"),
            field(prompt, "Visual elements:"),
        ) {
            let subject = if visuals == "(none)" || visuals.is_empty() {
                "an evocative open scene".to_string()
            } else {
                visuals.to_string()
            };
            let style = STYLES[(hash % STYLES.len() as u64) as usize];
            return format!(
                "Create a {style} image of {subject}, conveying {emotion} and the theme of {theme}."
            );
        }

        if let Some(pos) = prompt.find(LABEL_MARKER) {
            let rest = &prompt[pos + LABEL_MARKER.len()..];
            let (list_line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            let labels: Vec<&str> = list_line
                .split(',')
                .map(|l| l.trim().trim_end_matches('.'))
                .filter(|l| !l.is_empty())
                .collect();
            if !labels.is_empty() {
                let words: HashSet<String> = tokenize(tail).tokens.into_iter().collect();
                let chosen = labels
                    .iter()
                    .find(|l| words.contains(&l.to_lowercase()))
                    .copied()
                    .unwrap_or(labels[(hash % labels.len() as u64) as usize]);
                return chosen.to_string();
            }
        }

        if prompt.contains("JSON array") {
            let mut seen = HashSet::new();
            let words: Vec<String> = body
                .split_whitespace()
                .map(|w| w.trim_matches(is_punctuation))
                .filter(|w| w.chars().count() >= 5 && w.chars().all(char::is_alphabetic))
                .filter(|w| seen.insert(w.to_lowercase()))
                .take(6)
                .map(str::to_string)
                .collect();
            return serde_json::to_string(&words).expect("string list serializes");
        }

        format!("RESPONSE {:08x}: {}", hash as u32, first_tokens(body, 30))
    }
}

impl ChatProvider for MockChat {
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let out = self.respond(&req.user_prompt);
        if out.trim().is_empty() {
            return Err(ProviderError::EmptyResponse);
        }
        Ok(out)
    }

    fn model_tag(&self) -> &str {
        "mock-chat"
    }
}

/// Returns queued responses in order, then repeats the last one.
/// Handy for exercising retry and fallback paths.
#[derive(Debug)]
pub struct ScriptedChat {
    responses: Vec<Result<String, ProviderError>>,
    cursor: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedChat {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(responses.into_iter().map(|s| Ok(s.into())))
    }

    pub fn from_results<I>(responses: I) -> Self
    where
        I: IntoIterator<Item = Result<String, ProviderError>>,
    {
        let responses: Vec<_> = responses.into_iter().collect();
        assert!(!responses.is_empty(), "ScriptedChat needs at least one response");
        Self {
            responses,
            cursor: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl ChatProvider for ScriptedChat {
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(req.user_prompt.clone());
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        let r = &self.responses[i.min(self.responses.len() - 1)];
        match r {
            Ok(s) if s.trim().is_empty() => Err(ProviderError::EmptyResponse),
            other => other.clone(),
        }
    }

    fn model_tag(&self) -> &str {
        "scripted-chat"
    }
}

/// Bag-of-tokens hashing embedder: every token contributes a pseudorandom
/// unit vector drawn from a generator seeded by `sha256(seed || token)`;
/// the sum is normalized to unit length.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dimension: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_dimension(seed, MOCK_EMBEDDING_DIM)
    }

    pub fn with_dimension(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0);
        Self { seed, dimension }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::from_seed(digest(self.seed, token));
        let mut v: Vec<f64> = (0..self.dimension)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        normalize(&mut v);
        v
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::InvalidInput("cannot embed empty text".into()));
        }
        let mut tokens = tokenize(text).tokens;
        if tokens.is_empty() {
            tokens.push(text.trim().to_string());
        }
        let mut acc = vec![0.0; self.dimension];
        for tok in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += v;
            }
        }
        if !normalize(&mut acc) {
            // tokens cancelled out exactly; fall back to the whole-text vector
            acc = self.token_vector(text);
        }
        Ok(EmbeddingVector::new(acc, self.model_tag()))
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidInput("empty embedding batch".into()));
        }
        texts.iter().map(|t| self.embed_one(t)).collect()
    }

    fn model_tag(&self) -> &str {
        "mock-embed-384"
    }
}

/// Renders a solid-color PNG whose RGB comes from `sha256(seed || instruction)`,
/// with the instruction stored verbatim in an iTXt chunk.
#[derive(Debug, Clone, Default)]
pub struct MockImageGenerator;

impl MockImageGenerator {
    pub fn new() -> Self {
        Self
    }
}

pub fn mock_color(instruction: &str, seed: Option<u64>) -> [u8; 3] {
    let d = digest(seed.unwrap_or(0), instruction);
    [d[0], d[1], d[2]]
}

pub fn encode_solid_png(
    width: u32,
    height: u32,
    rgb: [u8; 3],
    text: &[(&str, &str)],
) -> Result<Vec<u8>, ProviderError> {
    let err = |e: png::EncodingError| ProviderError::Generation(e.to_string());
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_itxt_chunk(k.to_string(), v.to_string()).map_err(err)?;
        }
        let mut writer = enc.write_header().map_err(err)?;
        let row: Vec<u8> = rgb.iter().copied().cycle().take(width as usize * 3).collect();
        let mut data = Vec::with_capacity(row.len() * height as usize);
        for _ in 0..height {
            data.extend_from_slice(&row);
        }
        writer.write_image_data(&data).map_err(err)?;
        writer.finish().map_err(err)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPng {
    pub width: u32,
    pub height: u32,
    pub text: Vec<(String, String)>,
}

impl DecodedPng {
    pub fn text_value(&self, key: &str) -> Option<&str> {
        self.text
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Fully decodes a PNG and returns its size and UTF-8 text chunks.
pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng, ProviderError> {
    let err = |e: png::DecodingError| ProviderError::InvalidInput(format!("undecodable image: {e}"));
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ProviderError::InvalidInput("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    reader.finish().map_err(err)?;
    let mut text = Vec::new();
    for chunk in &reader.info().utf8_text {
        text.push((chunk.keyword.clone(), chunk.get_text().map_err(err)?));
    }
    for chunk in &reader.info().uncompressed_latin1_text {
        text.push((chunk.keyword.clone(), chunk.text.clone()));
    }
    Ok(DecodedPng {
        width: info.width,
        height: info.height,
        text,
    })
}

impl ImageGenerator for MockImageGenerator {
    fn generate(
        &self,
        instruction: &str,
        params: &ImageParams,
    ) -> Result<ImageArtifact, ProviderError> {
        if instruction.trim().is_empty() {
            return Err(ProviderError::InvalidInput("instruction is empty".into()));
        }
        if params.width == 0 || params.height == 0 || params.width > 4096 || params.height > 4096 {
            return Err(ProviderError::Generation(format!(
                "unsupported size {}x{}",
                params.width, params.height
            )));
        }
        let rgb = mock_color(instruction, params.seed);
        let bytes = encode_solid_png(
            params.width,
            params.height,
            rgb,
            &[(INSTRUCTION_TEXT_KEY, instruction)],
        )?;
        Ok(ImageArtifact {
            bytes,
            width: params.width,
            height: params.height,
            provider_tag: self.provider_tag().to_string(),
            seed: params.seed,
            instruction_text: instruction.to_string(),
        })
    }

    fn provider_tag(&self) -> &str {
        "mock-image"
    }
}

/// Dice overlap of the token multisets of `text` and the instruction stored
/// in the image, reported as both ITM and ITC.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

pub fn token_dice(a: &str, b: &str) -> f64 {
    let a = tokenize(a).tokens;
    let b = tokenize(b).tokens;
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let overlap = crate::textmetrics::ngram_overlap(&a, &b, 1);
    2.0 * overlap as f64 / (a.len() + b.len()) as f64
}

impl AlignmentScorer for MockScorer {
    fn score(&self, image: &ImageArtifact, text: &str) -> Result<AlignmentScore, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::InvalidInput("text is empty".into()));
        }
        let decoded = decode_png(&image.bytes)?;
        let embedded = decoded.text_value(INSTRUCTION_TEXT_KEY).ok_or_else(|| {
            ProviderError::InvalidInput("image carries no instruction text chunk".into())
        })?;
        let s = token_dice(text, embedded);
        Ok(AlignmentScore { itm: s, itc: s })
    }
}
