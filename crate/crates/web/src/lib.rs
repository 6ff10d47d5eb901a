//! Browser bindings for the demo page. Every export takes plain strings and
//! returns a JSON string: the result, or `{"error": "..."}`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use poempixel_core::corpus::Poem;
use poempixel_core::instructor::{generate_instruction, InstructOptions};
use poempixel_core::poekey::{poekey, PoeKeyOptions, PoeKeyRegistries};
use poempixel_core::providers::mock::{MockChat, MockEmbedder, MockImageGenerator};
use poempixel_core::providers::{ImageGenerator, ImageParams};
use poempixel_core::summarizer::{summarize, PromptRegistry, SummarizeOptions};
use poempixel_core::textmetrics::TextScores;
use poempixel_core::tuning::{replay, TuningMode, TuningSession, IMAGE_TUNING_SCORES, SUMMARY_TUNING_SCORES};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const DEMO_IMAGE_SIZE: u32 = 256;

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// ROUGE-1/2/L, BLEU-1..4 and METEOR of `candidate` against `reference`.
#[wasm_bindgen]
pub fn text_metrics(candidate: &str, reference: &str) -> String {
    respond(serde_json::to_value(TextScores::compute(candidate, reference)).map_err(|e| e.to_string()))
}

/// Replays rows of per-rater scores through a tuning session. An empty
/// `scores_json` uses the built-in expert history for `mode`.
#[wasm_bindgen]
pub fn tuning_replay(mode: &str, scores_json: &str) -> String {
    respond(replay_inner(mode, scores_json))
}

fn replay_inner(mode: &str, scores_json: &str) -> Result<Value, String> {
    let mode: TuningMode = mode.parse()?;
    let rows: Vec<Vec<f64>> = if scores_json.trim().is_empty() {
        match mode {
            TuningMode::Summary => SUMMARY_TUNING_SCORES.iter().map(|r| r.to_vec()).collect(),
            TuningMode::Image => IMAGE_TUNING_SCORES.iter().map(|r| r.to_vec()).collect(),
        }
    } else {
        serde_json::from_str(scores_json).map_err(|e| format!("scores must be a JSON array of rows: {e}"))?
    };
    let registry = PromptRegistry::bundled();
    let templates: Vec<_> = registry.of_kind(mode.template_kind()).cloned().collect();
    if rows.len() > templates.len() {
        return Err(format!("at most {} rounds in {mode} mode", templates.len()));
    }
    let (session, _) = replay(TuningSession::new("demo", mode), &templates, &rows).map_err(|e| e.to_string())?;
    let rounds: Vec<Value> = session
        .rounds
        .iter()
        .map(|r| json!({"index": r.index, "template_id": r.template_id, "aggregate": r.aggregate}))
        .collect();
    Ok(json!({
        "mode": mode.to_string(),
        "rounds": rounds,
        "stopped": session.stopped,
        "selected_round": session.selected_round,
        "selected_template": session.selected_template(),
        "status": session.status_line(),
    }))
}

/// Runs one poem through the offline chain: summary, key elements,
/// instruction and a mock image returned as a PNG data URL.
#[wasm_bindgen]
pub fn poem_to_pixel(poem_text: &str, seed: u32) -> String {
    respond(pixel_inner(poem_text, u64::from(seed)))
}

fn pixel_inner(poem_text: &str, seed: u64) -> Result<Value, String> {
    if poem_text.trim().is_empty() {
        return Err("enter a poem first".into());
    }
    let chat = MockChat::new(seed);
    let embedder = MockEmbedder::new(seed);
    let prompts = PromptRegistry::bundled();
    let poem = Poem::new("demo", "", poem_text);
    let summary_template = prompts.get("R6").map_err(|e| e.to_string())?;
    let summary = summarize(&poem, summary_template, &chat, SummarizeOptions { seed, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let registries = PoeKeyRegistries::bundled(&embedder).map_err(|e| e.to_string())?;
    let elements = poekey(&summary, &registries, &embedder, Some(&chat), PoeKeyOptions::default())
        .map_err(|e| e.to_string())?;
    let instruction_template = prompts.get("I5").map_err(|e| e.to_string())?;
    let instruction = generate_instruction(
        &elements,
        instruction_template,
        &chat,
        &InstructOptions {
            seed,
            append_summary: None,
        },
    )
    .map_err(|e| e.to_string())?;
    let params = ImageParams {
        width: DEMO_IMAGE_SIZE,
        height: DEMO_IMAGE_SIZE,
        seed: Some(seed),
    };
    let image = MockImageGenerator::new()
        .generate(&instruction.instruction_text, &params)
        .map_err(|e| e.to_string())?;
    Ok(json!({
        "summary": summary.text,
        "emotion": elements.emotion,
        "visual_elements": elements.visual_elements,
        "theme": elements.theme,
        "theme_similarity": elements.theme_similarity,
        "warnings": elements.warnings,
        "instruction": instruction.instruction_text,
        "instruction_words": instruction.word_count,
        "image": format!("data:image/png;base64,{}", B64.encode(&image.bytes)),
    }))
}
