//! End-to-end runs: dataset -> summaries -> key elements -> instructions ->
//! images -> alignment scores, one append-only jsonl file per stage under a
//! run directory, then metric reports and a manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_dataset, read_jsonl, CorpusError, Dataset, DatasetFormat};
use crate::instructor::{
    context_block, generate_image_for_poem, generate_instruction, GenerationRecord,
    InstructOptions, InstructionRecord, MAX_INSTRUCTION_WORDS, OVER_LENGTH_WARNING,
};
use crate::poekey::{poekey, KeyElements, LabelRegistry, NounLexicon, PoeKeyError, PoeKeyOptions, PoeKeyRegistries};
use crate::providers::mock::digest;
use crate::providers::{AlignmentScorer, Embedder, ImageArtifact, ImageParams, ProviderError, Providers};
use crate::summarizer::{
    registry_load, summarize, PromptRegistry, RenderOptions, SummarizeOptions, SummarizerError,
    Summary, TemplateKind,
};
use crate::textmetrics::TextScores;

const FIXTURE: &str = include_str!("../assets/fixture_poems.jsonl");
pub const FIXTURE_NAME: &str = "fixture";
pub const DEFAULT_WORKERS: usize = 4;
pub const INJECTED_FAULT: &str = "injected fault";
/// Template id recorded when a stage is bypassed by a preset.
pub const PASSTHROUGH: &str = "passthrough";

/// The bundled 10-poem PoemSum-format fixture.
pub fn bundled_fixture() -> Dataset {
    read_jsonl(FIXTURE_NAME, FIXTURE.as_bytes()).expect("bundled fixture is valid")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("run directory {0} already exists (use --resume to continue it)")]
    RunExists(PathBuf),
    #[error("missing {what} for: {}", .ids.join(", "))]
    MissingArtifacts { what: &'static str, ids: Vec<String> },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] SummarizerError),
    #[error(transparent)]
    PoeKey(#[from] PoeKeyError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Full,
    /// Poem text goes straight to the image provider.
    NoSummary,
    /// First-round templates (R1, I1) instead of the tuned ones.
    NoPromptTuning,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::NoSummary => "no_summary",
            Preset::NoPromptTuning => "no_prompt_tuning",
        })
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Preset::Full),
            "no_summary" => Ok(Preset::NoSummary),
            "no_prompt_tuning" => Ok(Preset::NoPromptTuning),
            other => Err(format!(
                "unknown preset `{other}` (expected full, no_summary or no_prompt_tuning)"
            )),
        }
    }
}

/// Which text an image is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentText {
    #[default]
    Summary,
    Instruction,
    Poem,
}

impl std::str::FromStr for AlignmentText {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summary" => Ok(AlignmentText::Summary),
            "instruction" => Ok(AlignmentText::Instruction),
            "poem" => Ok(AlignmentText::Poem),
            other => Err(format!("unknown alignment text `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl Default for ImageSize {
    fn default() -> Self {
        let p = ImageParams::default();
        Self {
            width: p.width,
            height: p.height,
        }
    }
}

fn default_summary_template() -> String {
    "R6".into()
}

fn default_instruction_template() -> String {
    "I5".into()
}

fn default_fraction() -> f64 {
    1.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset file; the bundled fixture when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub provider_config: Option<PathBuf>,
    #[serde(default = "default_summary_template")]
    pub summary_template_id: String,
    #[serde(default = "default_instruction_template")]
    pub instruction_template_id: String,
    #[serde(default)]
    pub prompt_registry: Option<PathBuf>,
    #[serde(default)]
    pub theme_registry: Option<PathBuf>,
    #[serde(default)]
    pub emotion_registry: Option<PathBuf>,
    #[serde(default)]
    pub image: ImageSize,
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub include_title: bool,
    #[serde(default)]
    pub alignment_text: AlignmentText,
    #[serde(default)]
    pub poekey: PoeKeyOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            provider_config: None,
            summary_template_id: default_summary_template(),
            instruction_template_id: default_instruction_template(),
            prompt_registry: None,
            theme_registry: None,
            emotion_registry: None,
            image: ImageSize::default(),
            sample_fraction: 1.0,
            seed: 0,
            output_dir: default_output_dir(),
            preset: Preset::Full,
            include_title: false,
            alignment_text: AlignmentText::Summary,
            poekey: PoeKeyOptions::default(),
        }
    }
}

impl RunConfig {
    /// Reads JSON (by `.json` extension) or TOML.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
        }
    }

    /// Summary and instruction template ids after the preset is applied.
    pub fn templates(&self) -> (&str, &str) {
        match self.preset {
            Preset::NoPromptTuning => ("R1", "I1"),
            _ => (&self.summary_template_id, &self.instruction_template_id),
        }
    }

    pub fn prompt_registry(&self) -> Result<PromptRegistry, PipelineError> {
        match &self.prompt_registry {
            Some(p) => Ok(registry_load(p)?),
            None => Ok(PromptRegistry::bundled()),
        }
    }

    pub fn validate(&self, registry: &PromptRegistry) -> Result<(), PipelineError> {
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(PipelineError::Config(format!(
                "sample_fraction must be in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if self.image.width == 0 || self.image.height == 0 {
            return Err(PipelineError::Config("image size must be non-zero".into()));
        }
        let (summary, instruction) = self.templates();
        registry.get(summary)?.expect_kind(TemplateKind::Summarization)?;
        registry.get(instruction)?.expect_kind(TemplateKind::Instruction)?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, PipelineError> {
        match &self.dataset {
            Some(p) => Ok(load_dataset(p, DatasetFormat::from_path(p))?),
            None => Ok(bundled_fixture()),
        }
    }

    pub fn dataset_name(&self) -> String {
        self.dataset
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| FIXTURE_NAME.to_string())
    }

    pub fn registries(&self, embedder: &dyn Embedder) -> Result<PoeKeyRegistries, PipelineError> {
        let themes = match &self.theme_registry {
            Some(p) => LabelRegistry::load("theme", p, embedder)?,
            None => LabelRegistry::bundled_themes(embedder)?,
        };
        let emotions = match &self.emotion_registry {
            Some(p) => LabelRegistry::load("emotion", p, embedder)?,
            None => LabelRegistry::bundled_emotions(embedder)?,
        };
        Ok(PoeKeyRegistries {
            themes,
            emotions,
            lexicon: NounLexicon::bundled(),
        })
    }
}

/// Deterministic subset keeping dataset order: `ceil(fraction * n)` poems
/// (at least one) chosen by a generator seeded from `seed`.
pub fn sample_poems(d: &Dataset, fraction: f64, seed: u64) -> Dataset {
    if fraction >= 1.0 || d.is_empty() {
        return d.clone();
    }
    let k = ((d.len() as f64 * fraction).ceil() as usize).clamp(1, d.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, d.len(), k).into_vec();
    picked.sort_unstable();
    Dataset {
        name: d.name.clone(),
        poems: picked.into_iter().map(|i| d.poems[i].clone()).collect(),
    }
}

/// UTC timestamp plus a 6-character suffix drawn from `seed`.
pub fn new_run_id(seed: u64, now: DateTime<Utc>) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suffix: String = (0..6)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect();
    format!("{}-{suffix}", now.format("%Y%m%dT%H%M%S%.3fZ"))
}

/// Per-poem image seed derived from the run seed.
pub fn poem_seed(seed: u64, poem_id: &str) -> u64 {
    let d = digest(seed, poem_id);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// File name under `images/` for a poem id.
pub fn image_file_name(poem_id: &str) -> String {
    let safe: String = poem_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.png")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Summarize,
    Poekey,
    Instruct,
    Image,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Summarize,
        Stage::Poekey,
        Stage::Instruct,
        Stage::Image,
        Stage::Score,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::Summarize => "summaries.jsonl",
            Stage::Poekey => "keyelements.jsonl",
            Stage::Instruct => "instructions.jsonl",
            Stage::Image => "generations.jsonl",
            Stage::Score => "scores.jsonl",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Summarize => "summarize",
            Stage::Poekey => "poekey",
            Stage::Instruct => "instruct",
            Stage::Image => "image",
            Stage::Score => "score",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Makes one poem fail at one stage, for testing isolation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultPlan {
    pub stage: Stage,
    pub poem_id: String,
}

impl std::str::FromStr for FaultPlan {
    type Err = String;

    /// `stage:poem_id`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (stage, id) = s
            .split_once(':')
            .ok_or_else(|| format!("expected stage:poem_id, got `{s}`"))?;
        Ok(Self {
            stage: stage.parse()?,
            poem_id: id.to_string(),
        })
    }
}

pub const POEMS_FILE: &str = "poems.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub poem_id: String,
    pub itm: f64,
    pub itc: f64,
    pub text_source: AlignmentText,
}

trait Keyed {
    fn poem_id(&self) -> &str;
}

macro_rules! keyed {
    ($($t:ty),*) => {
        $(impl Keyed for $t {
            fn poem_id(&self) -> &str {
                &self.poem_id
            }
        })*
    };
}

keyed!(Summary, KeyElements, InstructionRecord, GenerationRecord, ScoreRecord);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub poems: usize,
    pub summaries: usize,
    pub key_elements: usize,
    pub instructions: usize,
    pub images: usize,
    pub scores: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub poem_id: String,
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notice {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poem_id: Option<String>,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderTags {
    pub chat: String,
    pub embedder: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub config: RunConfig,
    pub providers: ProviderTags,
    pub counts: StageCounts,
    pub failures: Vec<Failure>,
    #[serde(default)]
    pub warnings: Vec<Notice>,
    pub wall_time_ms: BTreeMap<String, u64>,
    pub resumed: bool,
}

impl RunManifest {
    pub fn failures_at(&self, stage: Stage) -> usize {
        self.failures.iter().filter(|f| f.stage == stage).count()
    }

    /// Each stage's output plus its failures equals its input.
    pub fn identities_hold(&self) -> bool {
        let c = &self.counts;
        let chain = [
            (c.poems, c.summaries, Stage::Summarize),
            (c.summaries, c.key_elements, Stage::Poekey),
            (c.key_elements, c.instructions, Stage::Instruct),
            (c.instructions, c.images, Stage::Image),
            (c.images, c.scores, Stage::Score),
        ];
        chain
            .iter()
            .all(|&(input, output, stage)| output + self.failures_at(stage) == input)
    }

    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        read_json(&run_dir.join(MANIFEST_FILE))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory name; generated when absent.
    pub run_id: Option<String>,
    /// Continue an existing run, skipping poems already done per stage.
    pub resume: bool,
    pub fault: Option<FaultPlan>,
    /// Worker pool size per stage (default 4).
    pub workers: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub report: Option<MetricReport>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Reads a stage file. A torn last line (crash mid-write) is cut off so
/// appends continue from a clean record boundary.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(path, e))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    let mut torn = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if Some(i) == last => torn = true,
            Err(e) => return Err(io_err(path, format!("line {}: {e}", i + 1))),
        }
    }
    if torn {
        let kept: String = lines[..last.unwrap_or(0)]
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(path, kept).map_err(|e| io_err(path, e))?;
    }
    Ok(out)
}

struct Runner<'a> {
    dir: &'a Path,
    workers: usize,
    fault: Option<&'a FaultPlan>,
    failures: Vec<Failure>,
    wall_time_ms: BTreeMap<String, u64>,
}

impl Runner<'_> {
    /// Runs `work` over the inputs not yet recorded in the stage file, a
    /// chunk of `workers` poems at a time. Each chunk is appended in input
    /// order, so the file layout does not depend on thread timing. Returns
    /// the stage's records in input order.
    fn stage<I, O, F>(
        &mut self,
        stage: Stage,
        inputs: &[(String, I)],
        work: F,
    ) -> Result<Vec<O>, PipelineError>
    where
        I: Sync,
        O: Serialize + DeserializeOwned + Send + Keyed,
        F: Fn(&I) -> Result<O, String> + Sync,
    {
        let started = Instant::now();
        let path = self.dir.join(stage.file_name());
        let mut done: HashMap<String, O> = read_records::<O>(&path)?
            .into_iter()
            .map(|r| (r.poem_id().to_string(), r))
            .collect();
        let pending: Vec<&(String, I)> = inputs.iter().filter(|(id, _)| !done.contains_key(id)).collect();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let fault = self.fault;
        let work = &work;
        for chunk in pending.chunks(self.workers.max(1)) {
            let results: Vec<Result<O, String>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(id, input)| {
                        s.spawn(move || {
                            if fault.is_some_and(|f| f.stage == stage && &f.poem_id == id) {
                                return Err(INJECTED_FAULT.to_string());
                            }
                            work(input)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err("worker panicked".to_string())))
                    .collect()
            });
            let mut buf = Vec::new();
            for ((id, _), result) in chunk.iter().map(|p| (&p.0, &p.1)).zip(results) {
                match result {
                    Ok(record) => {
                        serde_json::to_writer(&mut buf, &record).map_err(|e| io_err(&path, e))?;
                        buf.push(b'\n');
                        done.insert(id.clone(), record);
                    }
                    Err(error) => self.failures.push(Failure {
                        poem_id: id.clone(),
                        stage,
                        error,
                    }),
                }
            }
            file.write_all(&buf).map_err(|e| io_err(&path, e))?;
            file.sync_data().map_err(|e| io_err(&path, e))?;
        }
        self.wall_time_ms
            .insert(stage.to_string(), started.elapsed().as_millis() as u64);
        Ok(inputs.iter().filter_map(|(id, _)| done.remove(id)).collect())
    }
}

fn pick_text(which: AlignmentText, poem: &str, summary: &str, instruction: &str) -> String {
    match which {
        AlignmentText::Summary => summary,
        AlignmentText::Instruction => instruction,
        AlignmentText::Poem => poem,
    }
    .to_string()
}

/// Reads a generated image back from a run directory.
pub fn load_image(dir: &Path, g: &GenerationRecord) -> Result<ImageArtifact, String> {
    let rel = g.image_path.as_deref().ok_or("generation has no image path")?;
    let bytes = fs::read(dir.join(rel)).map_err(|e| format!("cannot read {rel}: {e}"))?;
    let mut art = g.image.clone().ok_or("generation has no image metadata")?;
    art.bytes = bytes;
    Ok(art)
}

/// Runs every stage for `cfg` and writes the run directory. Config errors
/// abort before any work; per-poem failures are recorded and skipped.
pub fn run_pipeline(
    cfg: &RunConfig,
    providers: &Providers,
    opts: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let registry = cfg.prompt_registry()?;
    cfg.validate(&registry)?;
    let run_id = match (&opts.run_id, opts.resume) {
        (Some(id), _) => id.clone(),
        (None, true) => return Err(PipelineError::Config("--resume needs a run id".into())),
        (None, false) => new_run_id(cfg.seed, Utc::now()),
    };
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(PipelineError::Config(format!("invalid run id `{run_id}`")));
    }
    let dir = cfg.output_dir.join(&run_id);
    if opts.resume {
        if !dir.is_dir() {
            return Err(PipelineError::Config(format!("no run to resume at {}", dir.display())));
        }
        let stored: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
        if &stored != cfg {
            return Err(PipelineError::Config(format!(
                "config differs from the one stored in {}",
                dir.display()
            )));
        }
    } else if dir.exists() {
        return Err(PipelineError::RunExists(dir));
    }

    let dataset = if opts.resume && dir.join(POEMS_FILE).is_file() {
        let f = File::open(dir.join(POEMS_FILE)).map_err(|e| io_err(&dir, e))?;
        read_jsonl(&cfg.dataset_name(), BufReader::new(f))?
    } else {
        sample_poems(&cfg.load_dataset()?, cfg.sample_fraction, cfg.seed)
    };
    if dataset.is_empty() {
        return Err(PipelineError::Config("dataset is empty".into()));
    }
    let registries = cfg.registries(providers.embedder.as_ref())?;
    let (summary_id, instruction_id) = cfg.templates();
    let summary_template = registry.get(summary_id)?;
    let instruction_template = registry.get(instruction_id)?;

    for sub in [IMAGES_DIR, REPORTS_DIR] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir, e))?;
    }
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    if !dir.join(POEMS_FILE).is_file() {
        let path = dir.join(POEMS_FILE);
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        dataset.write_jsonl(std::io::BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
    }

    let mut runner = Runner {
        dir: &dir,
        workers: opts.workers.unwrap_or(DEFAULT_WORKERS),
        fault: opts.fault.as_ref(),
        failures: Vec::new(),
        wall_time_ms: BTreeMap::new(),
    };
    let chat = providers.chat.as_ref();
    let bypass = cfg.preset == Preset::NoSummary;

    let poems: Vec<(String, &crate::corpus::Poem)> =
        dataset.poems.iter().map(|p| (p.id.clone(), p)).collect();
    let summaries: Vec<Summary> = runner.stage(Stage::Summarize, &poems, |poem| {
        if bypass {
            return Ok(Summary {
                poem_id: poem.id.clone(),
                text: poem.text.clone(),
                template_id: PASSTHROUGH.into(),
                model_tag: PASSTHROUGH.into(),
                created_at: Utc::now(),
            });
        }
        let opts = SummarizeOptions {
            render: RenderOptions {
                include_title: cfg.include_title,
            },
            seed: cfg.seed,
        };
        summarize(poem, summary_template, chat, opts).map_err(|e| e.to_string())
    })?;

    let inputs: Vec<(String, &Summary)> = summaries.iter().map(|s| (s.poem_id.clone(), s)).collect();
    let elements: Vec<KeyElements> = runner.stage(Stage::Poekey, &inputs, |summary| {
        poekey(summary, &registries, providers.embedder.as_ref(), Some(chat), cfg.poekey)
            .map_err(|e| e.to_string())
    })?;

    let by_poem: HashMap<&str, &Summary> = summaries.iter().map(|s| (s.poem_id.as_str(), s)).collect();
    let inputs: Vec<(String, (&KeyElements, &Summary))> = elements
        .iter()
        .filter_map(|e| by_poem.get(e.poem_id.as_str()).map(|s| (e.poem_id.clone(), (e, *s))))
        .collect();
    let instructions: Vec<InstructionRecord> = runner.stage(Stage::Instruct, &inputs, |(e, s)| {
        if bypass {
            let words = crate::corpus::word_count(&s.text);
            return Ok(InstructionRecord {
                poem_id: e.poem_id.clone(),
                template_id: PASSTHROUGH.into(),
                context_block: context_block(e),
                instruction_text: s.text.clone(),
                word_count: words,
                retries: 0,
                over_length: words > MAX_INSTRUCTION_WORDS,
            });
        }
        let opts = InstructOptions {
            seed: cfg.seed,
            append_summary: None,
        };
        generate_instruction(e, instruction_template, chat, &opts).map_err(|e| e.to_string())
    })?;

    let inputs: Vec<(String, &InstructionRecord)> =
        instructions.iter().map(|r| (r.poem_id.clone(), r)).collect();
    let image_dir = dir.join(IMAGES_DIR);
    let generations: Vec<GenerationRecord> = runner.stage(Stage::Image, &inputs, |r| {
        let params = ImageParams {
            width: cfg.image.width,
            height: cfg.image.height,
            seed: Some(poem_seed(cfg.seed, &r.poem_id)),
        };
        let mut g = generate_image_for_poem(r, providers.image.as_ref(), &params);
        if let Some(err) = g.error.take() {
            return Err(err);
        }
        let name = image_file_name(&r.poem_id);
        let bytes = &g.image.as_ref().expect("succeeded").bytes;
        let path = image_dir.join(&name);
        fs::write(&path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        g.image_path = Some(format!("{IMAGES_DIR}/{name}"));
        Ok(g)
    })?;

    let poem_text: HashMap<&str, &str> = dataset.poems.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect();
    let instr_text: HashMap<&str, &str> = instructions
        .iter()
        .map(|r| (r.poem_id.as_str(), r.instruction_text.as_str()))
        .collect();
    let inputs: Vec<(String, (&GenerationRecord, String))> = generations
        .iter()
        .map(|g| {
            let id = g.poem_id.as_str();
            let text = pick_text(
                cfg.alignment_text,
                poem_text.get(id).copied().unwrap_or_default(),
                by_poem.get(id).map(|s| s.text.as_str()).unwrap_or_default(),
                instr_text.get(id).copied().unwrap_or_default(),
            );
            (g.poem_id.clone(), (g, text))
        })
        .collect();
    let scores: Vec<ScoreRecord> = runner.stage(Stage::Score, &inputs, |(g, text)| {
        let art = load_image(&dir, g)?;
        let s = providers.scorer.score(&art, text).map_err(|e| e.to_string())?;
        Ok(ScoreRecord {
            poem_id: g.poem_id.clone(),
            itm: s.itm,
            itc: s.itc,
            text_source: cfg.alignment_text,
        })
    })?;

    let mut warnings = Vec::new();
    for e in &elements {
        for w in &e.warnings {
            warnings.push(Notice {
                poem_id: Some(e.poem_id.clone()),
                stage: Stage::Poekey.to_string(),
                message: w.clone(),
            });
        }
    }
    for r in instructions.iter().filter(|r| r.over_length) {
        warnings.push(Notice {
            poem_id: Some(r.poem_id.clone()),
            stage: Stage::Instruct.to_string(),
            message: OVER_LENGTH_WARNING.to_string(),
        });
    }

    let Runner {
        mut failures,
        wall_time_ms,
        ..
    } = runner;
    failures.sort_by(|a, b| (a.stage, &a.poem_id).cmp(&(b.stage, &b.poem_id)));

    let has_refs = dataset.poems.iter().all(|p| p.reference_summary.is_some());
    let request = EvalRequest {
        text: has_refs && !bypass,
        image: true,
        alignment_text: None,
    };
    let report = match evaluate_run(&dir, &request, Some(providers.scorer.as_ref())) {
        Ok(r) => Some(r),
        Err(e) => {
            warnings.push(Notice {
                poem_id: None,
                stage: "evaluate".into(),
                message: e.to_string(),
            });
            None
        }
    };

    let manifest = RunManifest {
        run_id,
        created_at: Utc::now(),
        config: cfg.clone(),
        providers: ProviderTags {
            chat: providers.chat.model_tag().to_string(),
            embedder: providers.embedder.model_tag().to_string(),
            image: providers.image.provider_tag().to_string(),
        },
        counts: StageCounts {
            poems: dataset.len(),
            summaries: summaries.len(),
            key_elements: elements.len(),
            instructions: instructions.len(),
            images: generations.len(),
            scores: scores.len(),
        },
        failures,
        warnings,
        wall_time_ms,
        resumed: opts.resume,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunOutcome {
        run_dir: dir,
        manifest,
        report,
    })
}

/// Resumes the run in `run_dir` with its stored config.
pub fn resume_pipeline(
    run_dir: &Path,
    providers: &Providers,
    opts: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let mut cfg: RunConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    let run_id = run_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| PipelineError::Config(format!("bad run directory {}", run_dir.display())))?;
    let parent = run_dir.parent().map(Path::to_path_buf).unwrap_or_default();
    if cfg.output_dir != parent {
        // the run directory was moved; follow it
        cfg.output_dir = parent;
        write_json(&run_dir.join(CONFIG_FILE), &cfg)?;
    }
    let opts = RunOptions {
        run_id: Some(run_id),
        resume: true,
        ..opts.clone()
    };
    run_pipeline(&cfg, providers, &opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalRequest {
    pub text: bool,
    pub image: bool,
    /// Overrides the run's configured alignment text.
    pub alignment_text: Option<AlignmentText>,
}

impl Default for EvalRequest {
    fn default() -> Self {
        Self {
            text: true,
            image: true,
            alignment_text: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRow {
    pub poem_id: String,
    #[serde(flatten)]
    pub scores: TextScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextReport {
    pub label: String,
    pub rows: Vec<TextRow>,
    pub mean: TextScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub label: String,
    pub dataset: String,
    pub rows: Vec<ScoreRecord>,
    pub mean_itm: f64,
    pub mean_itc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub text: Option<TextReport>,
    pub image: Option<ImageReport>,
}

const TEXT_ROWS: [&str; 8] = ["R1", "R2", "RL", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR"];

impl TextReport {
    /// Metrics as rows, one column for the run.
    pub fn table(&self) -> String {
        let mut out = format!("| Metric | {} |\n|---|---|\n", self.label);
        for (name, v) in TEXT_ROWS.iter().zip(self.mean.values()) {
            out.push_str(&format!("| {name} | {v:.4} |\n"));
        }
        out
    }
}

impl ImageReport {
    pub fn table(&self) -> String {
        format!(
            "| Dataset | Metric | {} |\n|---|---|---|\n| {} | ITM | {:.4} |\n|  | ITC | {:.4} |\n",
            self.label, self.dataset, self.mean_itm, self.mean_itc
        )
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| io_err(path, e))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Scores a finished run and writes `reports/metrics_{text,image}.jsonl`
/// and `reports/table_{text,image}.md`.
pub fn evaluate_run(
    run_dir: &Path,
    request: &EvalRequest,
    scorer: Option<&dyn AlignmentScorer>,
) -> Result<MetricReport, PipelineError> {
    let cfg: RunConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    let poems_path = run_dir.join(POEMS_FILE);
    let f = File::open(&poems_path).map_err(|e| io_err(&poems_path, e))?;
    let dataset = read_jsonl(&cfg.dataset_name(), BufReader::new(f))?;
    let summaries: Vec<Summary> = read_records(&run_dir.join(Stage::Summarize.file_name()))?;
    let reports = run_dir.join(REPORTS_DIR);
    fs::create_dir_all(&reports).map_err(|e| io_err(&reports, e))?;
    let mut report = MetricReport::default();

    if request.text {
        if summaries.is_empty() {
            return Err(PipelineError::MissingArtifacts {
                what: "summaries",
                ids: dataset.poems.iter().map(|p| p.id.clone()).collect(),
            });
        }
        let missing: Vec<String> = summaries
            .iter()
            .filter(|s| dataset.get(&s.poem_id).and_then(|p| p.reference_summary.as_ref()).is_none())
            .map(|s| s.poem_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::MissingArtifacts {
                what: "reference summaries",
                ids: missing,
            });
        }
        let rows: Vec<TextRow> = summaries
            .iter()
            .map(|s| {
                let reference = dataset
                    .get(&s.poem_id)
                    .and_then(|p| p.reference_summary.as_deref())
                    .unwrap_or_default();
                TextRow {
                    poem_id: s.poem_id.clone(),
                    scores: TextScores::compute(&s.text, reference),
                }
            })
            .collect();
        let mean = TextScores::mean(&rows.iter().map(|r| r.scores.clone()).collect::<Vec<_>>())
            .expect("non-empty");
        let text = TextReport {
            label: summaries[0].model_tag.clone(),
            rows,
            mean,
        };
        write_lines(&reports.join("metrics_text.jsonl"), &text.rows)?;
        fs::write(reports.join("table_text.md"), text.table()).map_err(|e| io_err(&reports, e))?;
        report.text = Some(text);
    }

    if request.image {
        let scorer = scorer.ok_or_else(|| PipelineError::Config("image evaluation needs a scorer".into()))?;
        let instructions: Vec<InstructionRecord> = read_records(&run_dir.join(Stage::Instruct.file_name()))?;
        let generations: Vec<GenerationRecord> = read_records(&run_dir.join(Stage::Image.file_name()))?;
        let by_poem: HashMap<&str, &GenerationRecord> =
            generations.iter().map(|g| (g.poem_id.as_str(), g)).collect();
        let mut missing = Vec::new();
        let mut images = Vec::new();
        for r in &instructions {
            match by_poem.get(r.poem_id.as_str()).map(|g| load_image(run_dir, g)) {
                Some(Ok(art)) => images.push((r, art)),
                _ => missing.push(r.poem_id.clone()),
            }
        }
        if instructions.is_empty() {
            missing.extend(dataset.poems.iter().map(|p| p.id.clone()));
        }
        if !missing.is_empty() {
            return Err(PipelineError::MissingArtifacts {
                what: "images",
                ids: missing,
            });
        }
        let which = request.alignment_text.unwrap_or(cfg.alignment_text);
        let summary_text: HashMap<&str, &str> =
            summaries.iter().map(|s| (s.poem_id.as_str(), s.text.as_str())).collect();
        let mut rows = Vec::new();
        for (r, art) in &images {
            let id = r.poem_id.as_str();
            let text = pick_text(
                which,
                dataset.get(id).map(|p| p.text.as_str()).unwrap_or_default(),
                summary_text.get(id).copied().unwrap_or_default(),
                &r.instruction_text,
            );
            let s = scorer.score(art, &text)?;
            rows.push(ScoreRecord {
                poem_id: r.poem_id.clone(),
                itm: s.itm,
                itc: s.itc,
                text_source: which,
            });
        }
        let n = rows.len() as f64;
        let image = ImageReport {
            label: cfg.preset.to_string(),
            dataset: cfg.dataset_name(),
            mean_itm: rows.iter().map(|r| r.itm).sum::<f64>() / n,
            mean_itc: rows.iter().map(|r| r.itc).sum::<f64>() / n,
            rows,
        };
        write_lines(&reports.join("metrics_image.jsonl"), &image.rows)?;
        fs::write(reports.join("table_image.md"), image.table()).map_err(|e| io_err(&reports, e))?;
        report.image = Some(image);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            output_dir: dir.to_path_buf(),
            image: ImageSize { width: 8, height: 8 },
            seed: 7,
            ..RunConfig::default()
        }
    }

    fn opts(id: &str) -> RunOptions {
        RunOptions {
            run_id: Some(id.into()),
            ..RunOptions::default()
        }
    }

    #[test]
    fn fixture_shape() {
        let d = bundled_fixture();
        assert_eq!(d.len(), 10);
        assert!(d.poems.iter().all(|p| p.reference_summary.is_some()));
        assert!(d.get("parrot").is_some());
    }

    #[test]
    fn mock_run_counts() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_pipeline(&small(dir.path()), &Providers::mock(7), &opts("a")).unwrap();
        let m = &out.manifest;
        assert_eq!(
            m.counts,
            StageCounts {
                poems: 10,
                summaries: 10,
                key_elements: 10,
                instructions: 10,
                images: 10,
                scores: 10
            }
        );
        assert!(m.failures.is_empty());
        assert!(m.identities_hold());
        for f in [POEMS_FILE, CONFIG_FILE, MANIFEST_FILE, "reports/table_text.md", "reports/table_image.md"] {
            assert!(out.run_dir.join(f).is_file(), "{f}");
        }
        assert!(out.run_dir.join("images/parrot.png").is_file());
        assert!(matches!(
            run_pipeline(&small(dir.path()), &Providers::mock(7), &opts("a")),
            Err(PipelineError::RunExists(_))
        ));
    }

    #[test]
    fn fault_at_image_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = opts("f");
        o.fault = Some("image:parrot".parse().unwrap());
        let m = run_pipeline(&small(dir.path()), &Providers::mock(7), &o).unwrap().manifest;
        assert_eq!((m.counts.instructions, m.counts.images, m.counts.scores), (10, 9, 9));
        assert_eq!(m.failures.len(), 1);
        assert_eq!((m.failures[0].poem_id.as_str(), m.failures[0].stage), ("parrot", Stage::Image));
        assert!(m.identities_hold());
    }

    #[test]
    fn config_errors_abort_early() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.sample_fraction = 0.0;
        assert!(matches!(run_pipeline(&cfg, &Providers::mock(0), &opts("x")), Err(PipelineError::Config(_))));
        let mut cfg = small(dir.path());
        cfg.summary_template_id = "I5".into();
        assert!(run_pipeline(&cfg, &Providers::mock(0), &opts("x")).is_err());
        assert!(!dir.path().join("x").exists());
    }

    #[test]
    fn sampling_is_seeded() {
        let d = bundled_fixture();
        let a = sample_poems(&d, 0.3, 1);
        assert_eq!(a.len(), 3);
        assert_eq!(a, sample_poems(&d, 0.3, 1));
        let order: Vec<usize> = a
            .poems
            .iter()
            .map(|p| d.poems.iter().position(|q| q.id == p.id).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_poems(&d, 0.01, 1).len(), 1);
    }

    #[test]
    fn run_id_shape() {
        let now = DateTime::parse_from_rfc3339("2026-10-16T10:11:12.345Z").unwrap().with_timezone(&Utc);
        let id = new_run_id(7, now);
        assert!(id.starts_with("20261016T101112.345Z-"));
        assert_eq!(id.len(), "20261016T101112.345Z-".len() + 6);
        assert_eq!(id, new_run_id(7, now));
        assert_ne!(id, new_run_id(8, now));
    }

    #[test]
    fn presets() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.preset = Preset::NoSummary;
        let out = run_pipeline(&cfg, &Providers::mock(1), &opts("ns")).unwrap();
        let instr: Vec<InstructionRecord> = read_records(&out.run_dir.join("instructions.jsonl")).unwrap();
        let poems = bundled_fixture();
        assert_eq!(instr[0].instruction_text, poems.poems[0].text);
        assert!(out.manifest.identities_hold());

        cfg.preset = Preset::NoPromptTuning;
        assert_eq!(cfg.templates(), ("R1", "I1"));
        let out = run_pipeline(&cfg, &Providers::mock(1), &opts("npt")).unwrap();
        let summaries: Vec<Summary> = read_records(&out.run_dir.join("summaries.jsonl")).unwrap();
        assert!(summaries.iter().all(|s| s.template_id == "R1"));
    }

    #[test]
    fn config_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        fs::write(&toml_path, "seed = 3\nsample_fraction = 0.5\npreset = \"no_summary\"\n[image]\nwidth = 64\nheight = 32\n").unwrap();
        let cfg = RunConfig::load(&toml_path).unwrap();
        assert_eq!((cfg.seed, cfg.preset, cfg.image.width), (3, Preset::NoSummary, 64));
        assert_eq!(cfg.summary_template_id, "R6");
        let json_path = dir.path().join("run.json");
        fs::write(&json_path, r#"{"seed": 1, "bogus": true}"#).unwrap();
        assert!(matches!(RunConfig::load(&json_path), Err(PipelineError::Config(_))));
    }

    #[test]
    fn torn_line_is_trimmed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.jsonl");
        fs::write(&p, "{\"poem_id\":\"a\",\"itm\":1.0,\"itc\":1.0,\"text_source\":\"summary\"}\n{\"poem_id\":\"b\",\"it").unwrap();
        let rows: Vec<ScoreRecord> = read_records(&p).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(fs::read_to_string(&p).unwrap().ends_with("}\n"));
    }
}
