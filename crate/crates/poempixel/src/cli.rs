//! Command-line surface. Exit codes: 0 success, 1 validation or usage
//! error, 2 provider error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use poempixel_core::corpus::{
    dataset_stats, has_errors, load_dataset, read_jsonl, validate_dataset, CorpusError, Dataset,
    DatasetFormat, Severity,
};
use poempixel_core::instructor::{
    generate_image_for_poem, generate_instruction, GenerationRecord, InstructOptions,
    InstructionRecord,
};
use poempixel_core::pipeline::{
    bundled_fixture, evaluate_run, image_file_name, load_image, poem_seed, read_records,
    resume_pipeline, run_pipeline, AlignmentText, EvalRequest, FaultPlan, PipelineError, Preset,
    RunConfig, RunOptions, RunOutcome, Stage, FIXTURE_NAME, IMAGES_DIR, POEMS_FILE,
};
use poempixel_core::poekey::{poekey, KeyElements, PoeKeyError, PoeKeyOptions};
use poempixel_core::providers::config::ConfigError;
use poempixel_core::providers::{ImageParams, ProviderConfig, ProviderError, Providers};
use poempixel_core::summarizer::{
    registry_load, summarize, PromptRegistry, RenderOptions, SummarizeOptions, Summary,
    SummarizerError, TemplateKind,
};
use poempixel_core::tuning::{
    format_aggregate, replay, run_automated_round, AutomatedSample, CandidatePayload, ImagePair,
    RoundItem, RoundStatus, ScoreEvent, SessionStore, SummaryPair, TuningError, TuningMode,
    TuningSession, DEFAULT_MAX_ROUNDS, IMAGE_TUNING_SCORES, SUMMARY_TUNING_SCORES,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::live::build_providers;
use crate::reviewsvc::{self, ReviewConfig, TOKEN_ENV};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Invalid(String),
    Provider(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Invalid(_) => 1,
            CliError::Provider(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Invalid(m) | CliError::Provider(m) => m,
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::NotConfigured(_) => CliError::Invalid(e.to_string()),
            other => CliError::Provider(other.to_string()),
        }
    }
}

impl From<SummarizerError> for CliError {
    fn from(e: SummarizerError) -> Self {
        match e {
            SummarizerError::Provider(p) => p.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<PoeKeyError> for CliError {
    fn from(e: PoeKeyError) -> Self {
        match e {
            PoeKeyError::Provider(p) => p.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Provider(p) => p.into(),
            PipelineError::Prompt(p) => p.into(),
            PipelineError::PoeKey(p) => p.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<TuningError> for CliError {
    fn from(e: TuningError) -> Self {
        match e {
            TuningError::Provider(p) => p.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Invalid(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "poempixel", version, about = "Turn poems into images through summaries and key elements")]
struct Cli {
    /// Provider config file (TOML or JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use mock providers for every endpoint
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset and optionally write it as canonical JSONL
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print corpus statistics
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        format: Option<String>,
    },
    /// Summarize every poem in a dataset
    Summarize {
        /// Dataset file; the bundled fixture when absent
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "R6")]
        template: String,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        include_title: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract emotion, visual elements and theme from summaries
    Poekey {
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long, default_value = "embedding")]
        emotion: String,
        #[arg(long, default_value = "rule_based")]
        visual: String,
        #[arg(long)]
        themes: Option<PathBuf>,
        #[arg(long)]
        emotions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write image instructions from key elements
    Instruct {
        #[arg(long)]
        keyelements: PathBuf,
        #[arg(long, default_value = "I5")]
        template: String,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one image per instruction
    Generate {
        #[arg(long)]
        instructions: PathBuf,
        /// Directory for the PNG files
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 1024)]
        height: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a finished run and write its report tables
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// text, image or both
        #[arg(long, default_value = "both")]
        mode: String,
        /// Text the images are scored against: summary, instruction or poem
        #[arg(long)]
        alignment_text: Option<AlignmentText>,
    },
    /// Run the whole chain and write a run directory
    Run(RunArgs),
    /// Prompt tuning sessions
    Tune {
        #[arg(long, default_value = "sessions", global = true)]
        store: PathBuf,
        #[command(subcommand)]
        command: TuneCommand,
    },
    /// Start the review service
    Serve {
        #[arg(long, default_value = "sessions")]
        store: PathBuf,
        /// Directory holding the images under review
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Shared token required in the x-review-token header
        #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
        token: Option<String>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run config file (TOML or JSON)
    #[arg(long)]
    run_config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Continue an existing run (id under the output dir, or a path)
    #[arg(long)]
    resume: Option<String>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    summary_template: Option<String>,
    #[arg(long)]
    instruction_template: Option<String>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    include_title: bool,
    #[arg(long)]
    alignment_text: Option<AlignmentText>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, hide = true)]
    inject_fault: Option<FaultPlan>,
}

#[derive(Debug, Subcommand)]
enum TuneCommand {
    /// Create a session, optionally opening round 1
    Start {
        #[arg(long)]
        session: String,
        #[arg(long)]
        mode: TuningMode,
        #[arg(long)]
        template: Option<String>,
        /// Run directory supplying the candidates for the round
        #[arg(long)]
        run: Option<PathBuf>,
        /// Number of poems to review (default: all with candidates)
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "expert1,expert2,expert3,expert4")]
        raters: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
        max_rounds: u32,
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Show the session's state and round history
    Status {
        #[arg(long)]
        session: String,
    },
    /// Close the open round and apply the stopping rule
    CloseRound {
        #[arg(long)]
        session: String,
    },
    /// Open the next round with a new template
    Advance {
        #[arg(long)]
        session: String,
        #[arg(long)]
        template: String,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Record one score for the open round
    Score {
        #[arg(long)]
        session: String,
        #[arg(long)]
        item: String,
        #[arg(long)]
        rater: String,
        #[arg(long, allow_negative_numbers = true)]
        value: f64,
    },
    /// Compute automated metrics for the latest round from a run directory
    Auto {
        #[arg(long)]
        session: String,
        #[arg(long)]
        run: PathBuf,
    },
    /// Replay a score history (rows of per-rater scores) into a new session
    Replay {
        #[arg(long)]
        session: String,
        #[arg(long)]
        mode: TuningMode,
        /// JSON array of rows; the built-in expert histories when absent
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

struct Globals {
    config: Option<PathBuf>,
    mock: bool,
    seed: Option<u64>,
}

impl Globals {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn provider_config(&self, fallback: Option<&Path>) -> Result<ProviderConfig> {
        if self.mock {
            return Ok(ProviderConfig::all_mock());
        }
        match self.config.as_deref().or(fallback) {
            Some(p) => Ok(ProviderConfig::load(p)?),
            None => Ok(ProviderConfig::all_mock()),
        }
    }

    fn providers(&self, seed: u64, fallback: Option<&Path>) -> Result<Providers> {
        Ok(build_providers(&self.provider_config(fallback)?, seed)?)
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let g = Globals {
        config: cli.config,
        mock: cli.mock,
        seed: cli.seed,
    };
    match cli.command {
        Command::Ingest { dataset, format, out: dest } => ingest(&dataset, format, dest, out),
        Command::Stats { dataset, format } => {
            let d = read_dataset(Some(&dataset), format)?;
            writeln!(out, "{}", dataset_stats(&d)?)?;
            Ok(())
        }
        Command::Summarize {
            dataset,
            template,
            prompts,
            include_title,
            out: dest,
        } => {
            let d = read_dataset(dataset.as_deref(), None)?;
            let registry = prompt_registry(prompts.as_deref())?;
            let t = registry.get(&template)?;
            t.expect_kind(TemplateKind::Summarization)?;
            let providers = g.providers(g.seed(), None)?;
            let opts = SummarizeOptions {
                render: RenderOptions { include_title },
                seed: g.seed(),
            };
            let results = d
                .poems
                .iter()
                .map(|p| (p.id.clone(), summarize(p, t, providers.chat.as_ref(), opts).map_err(CliError::from)))
                .collect();
            finish_stage(Stage::Summarize, results, dest.as_deref(), out, err)
        }
        Command::Poekey {
            summaries,
            emotion,
            visual,
            themes,
            emotions,
            out: dest,
        } => {
            let opts = PoeKeyOptions {
                emotion: parse_choice(&emotion, "emotion method")?,
                visual: parse_choice(&visual, "visual method")?,
            };
            let summaries: Vec<Summary> = read_input(&summaries)?;
            let providers = g.providers(g.seed(), None)?;
            let cfg = RunConfig {
                theme_registry: themes,
                emotion_registry: emotions,
                ..RunConfig::default()
            };
            let registries = cfg.registries(providers.embedder.as_ref())?;
            let results = summaries
                .iter()
                .map(|s| {
                    let r = poekey(
                        s,
                        &registries,
                        providers.embedder.as_ref(),
                        Some(providers.chat.as_ref()),
                        opts,
                    );
                    (s.poem_id.clone(), r.map_err(CliError::from))
                })
                .collect();
            finish_stage(Stage::Poekey, results, dest.as_deref(), out, err)
        }
        Command::Instruct {
            keyelements,
            template,
            prompts,
            out: dest,
        } => {
            let elements: Vec<KeyElements> = read_input(&keyelements)?;
            let registry = prompt_registry(prompts.as_deref())?;
            let t = registry.get(&template)?;
            t.expect_kind(TemplateKind::Instruction)?;
            let providers = g.providers(g.seed(), None)?;
            let opts = InstructOptions {
                seed: g.seed(),
                append_summary: None,
            };
            let results = elements
                .iter()
                .map(|e| {
                    let r = generate_instruction(e, t, providers.chat.as_ref(), &opts);
                    (e.poem_id.clone(), r.map_err(CliError::from))
                })
                .collect();
            finish_stage(Stage::Instruct, results, dest.as_deref(), out, err)
        }
        Command::Generate {
            instructions,
            images,
            width,
            height,
            out: dest,
        } => {
            let records: Vec<InstructionRecord> = read_input(&instructions)?;
            let providers = g.providers(g.seed(), None)?;
            fs::create_dir_all(&images)?;
            let results = records
                .iter()
                .map(|r| {
                    let params = ImageParams {
                        width,
                        height,
                        seed: Some(poem_seed(g.seed(), &r.poem_id)),
                    };
                    (r.poem_id.clone(), write_generation(r, &providers, &params, &images))
                })
                .collect();
            finish_stage(Stage::Image, results, dest.as_deref(), out, err)
        }
        Command::Evaluate {
            run,
            mode,
            alignment_text,
        } => {
            let (text, image) = match mode.as_str() {
                "text" => (true, false),
                "image" => (false, true),
                "both" => (true, true),
                other => return Err(CliError::Usage(format!("unknown mode `{other}` (expected text, image or both)"))),
            };
            let cfg = RunConfig::load(&run.join(poempixel_core::pipeline::CONFIG_FILE))?;
            let providers = g.providers(g.seed.unwrap_or(cfg.seed), cfg.provider_config.as_deref())?;
            let req = EvalRequest {
                text,
                image,
                alignment_text,
            };
            let report = evaluate_run(&run, &req, Some(providers.scorer.as_ref()))?;
            if let Some(t) = &report.text {
                writeln!(out, "{}", t.table())?;
            }
            if let Some(i) = &report.image {
                writeln!(out, "{}", i.table())?;
            }
            Ok(())
        }
        Command::Run(args) => run_command(&g, args, out, err),
        Command::Tune { store, command } => tune(&g, &store, command, out),
        Command::Serve {
            store,
            images,
            addr,
            token,
        } => serve(ReviewConfig {
            store_root: store,
            images_dir: images,
            token,
            addr,
        }, out),
    }
}

fn parse_choice<T: DeserializeOwned>(value: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown {what} `{value}`")))
}

fn read_dataset(path: Option<&Path>, format: Option<String>) -> Result<Dataset> {
    match path {
        None => Ok(bundled_fixture()),
        Some(p) if !p.exists() && p.as_os_str() == FIXTURE_NAME => Ok(bundled_fixture()),
        Some(p) => {
            let format = match format {
                Some(f) => f.parse::<DatasetFormat>()?,
                None => DatasetFormat::from_path(p),
            };
            Ok(load_dataset(p, format)?)
        }
    }
}

fn ingest(dataset: &Path, format: Option<String>, dest: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let d = read_dataset(Some(dataset), format)?;
    let findings = validate_dataset(&d);
    for f in &findings {
        writeln!(out, "{f}")?;
    }
    let errors = findings.iter().filter(|f| f.severity == Severity::Error).count();
    writeln!(
        out,
        "{} poems, {} errors, {} warnings",
        d.len(),
        errors,
        findings.len() - errors
    )?;
    if has_errors(&findings) {
        return Err(CliError::Invalid(format!("dataset {} has {errors} errors", dataset.display())));
    }
    if let Some(dest) = dest {
        let f = fs::File::create(&dest)?;
        d.write_jsonl(std::io::BufWriter::new(f))?;
        writeln!(out, "wrote {}", dest.display())?;
    }
    Ok(())
}

fn prompt_registry(path: Option<&Path>) -> Result<PromptRegistry> {
    match path {
        Some(p) => Ok(registry_load(p)?),
        None => Ok(PromptRegistry::bundled()),
    }
}

fn read_input<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(CliError::Invalid(format!("{} does not exist", path.display())));
    }
    Ok(read_records(path)?)
}

fn write_generation(
    r: &InstructionRecord,
    providers: &Providers,
    params: &ImageParams,
    images: &Path,
) -> Result<GenerationRecord> {
    let mut g = generate_image_for_poem(r, providers.image.as_ref(), params);
    if let Some(e) = g.error.take() {
        return Err(CliError::Provider(e));
    }
    let name = image_file_name(&r.poem_id);
    let bytes = &g.image.as_ref().expect("no error means an image").bytes;
    fs::write(images.join(&name), bytes)?;
    g.image_path = Some(images.join(name).display().to_string());
    Ok(g)
}

/// Writes the successful records and reports failures. Any failed poem
/// makes the command exit non-zero after the rest are written.
fn finish_stage<T: Serialize>(
    stage: Stage,
    results: Vec<(String, Result<T>)>,
    dest: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let mut buf = Vec::new();
    let mut failed: Vec<(String, CliError)> = Vec::new();
    let mut done = 0;
    for (id, r) in results {
        match r {
            Ok(rec) => {
                serde_json::to_writer(&mut buf, &rec).map_err(|e| CliError::Invalid(e.to_string()))?;
                buf.push(b'\n');
                done += 1;
            }
            Err(e) => failed.push((id, e)),
        }
    }
    match dest {
        Some(p) => {
            fs::write(p, &buf)?;
            writeln!(err, "{stage}: wrote {done} records to {}", p.display())?;
        }
        None => out.write_all(&buf)?,
    }
    for (id, e) in &failed {
        writeln!(err, "{stage} failed for {id}: {}", e.message())?;
    }
    match failed.into_iter().next() {
        None => Ok(()),
        Some((_, e @ CliError::Provider(_))) => Err(CliError::Provider(format!("{stage}: {}", e.message()))),
        Some((_, e)) => Err(e),
    }
}

fn run_command(g: &Globals, args: RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let opts = RunOptions {
        run_id: args.run_id.clone(),
        resume: false,
        fault: args.inject_fault.clone(),
        workers: args.workers,
    };
    let outcome = if let Some(target) = &args.resume {
        let output_dir = args.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        let under = output_dir.join(target);
        let dir = if under.is_dir() { under } else { PathBuf::from(target) };
        if !dir.is_dir() {
            return Err(CliError::Invalid(format!("no run directory for `{target}`")));
        }
        let cfg = RunConfig::load(&dir.join(poempixel_core::pipeline::CONFIG_FILE))?;
        let providers = g.providers(cfg.seed, cfg.provider_config.as_deref())?;
        resume_pipeline(&dir, &providers, &opts)?
    } else {
        let mut cfg = match &args.run_config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        apply_overrides(&mut cfg, g, &args);
        let providers = g.providers(cfg.seed, cfg.provider_config.as_deref())?;
        run_pipeline(&cfg, &providers, &opts)?
    };
    report_run(&outcome, out, err)
}

fn apply_overrides(cfg: &mut RunConfig, g: &Globals, args: &RunArgs) {
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(p) = args.preset {
        cfg.preset = p;
    }
    if let Some(t) = &args.summary_template {
        cfg.summary_template_id = t.clone();
    }
    if let Some(t) = &args.instruction_template {
        cfg.instruction_template_id = t.clone();
    }
    if let Some(f) = args.sample_fraction {
        cfg.sample_fraction = f;
    }
    if let Some(w) = args.width {
        cfg.image.width = w;
    }
    if let Some(h) = args.height {
        cfg.image.height = h;
    }
    if args.include_title {
        cfg.include_title = true;
    }
    if let Some(a) = args.alignment_text {
        cfg.alignment_text = a;
    }
    if g.mock {
        cfg.provider_config = None;
    } else if let Some(p) = &g.config {
        cfg.provider_config = Some(p.clone());
    }
}

fn report_run(outcome: &RunOutcome, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let m = &outcome.manifest;
    let c = &m.counts;
    writeln!(out, "run {} -> {}", m.run_id, outcome.run_dir.display())?;
    writeln!(
        out,
        "poems {}  summaries {}  key_elements {}  instructions {}  images {}  scores {}",
        c.poems, c.summaries, c.key_elements, c.instructions, c.images, c.scores
    )?;
    writeln!(out, "failures: {}", m.failures.len())?;
    for f in &m.failures {
        writeln!(err, "  {} at {}: {}", f.poem_id, f.stage, f.error)?;
    }
    for w in &m.warnings {
        match &w.poem_id {
            Some(id) => writeln!(err, "warning: {} {id}: {}", w.stage, w.message)?,
            None => writeln!(err, "warning: {}: {}", w.stage, w.message)?,
        }
    }
    if let Some(report) = &outcome.report {
        if let Some(t) = &report.text {
            writeln!(out, "\n{}", t.table())?;
        }
        if let Some(i) = &report.image {
            writeln!(out, "\n{}", i.table())?;
        }
    }
    Ok(())
}

fn tune(g: &Globals, root: &Path, command: TuneCommand, out: &mut dyn Write) -> Result<()> {
    let store = SessionStore::new(root);
    match command {
        TuneCommand::Start {
            session,
            mode,
            template,
            run,
            sample,
            raters,
            max_rounds,
            prompts,
        } => {
            if store.exists(&session) {
                return Err(CliError::Invalid(format!("session `{session}` already exists")));
            }
            fs::create_dir_all(root)?;
            let mut s = TuningSession::new(&session, mode)
                .with_raters(raters)
                .with_max_rounds(max_rounds);
            if let Some(tid) = template {
                let registry = prompt_registry(prompts.as_deref())?;
                let t = registry.get(&tid)?;
                let items = match &run {
                    Some(dir) => round_items(mode, &tid, dir, None, sample)?,
                    None => Vec::new(),
                };
                s.advance(t, items)?;
            }
            store.create(&s)?;
            writeln!(out, "created session {session} ({mode} mode)")?;
            writeln!(out, "{}", s.status_line())?;
        }
        TuneCommand::Status { session } => {
            let s = store.load(&session)?;
            let events = store.events(&session)?;
            print_status(&s, &events, out)?;
        }
        TuneCommand::CloseRound { session } => {
            let mut s = store.load(&session)?;
            let events = store.events(&session)?;
            let aggregate = s.close_round(&events)?;
            store.save(&s)?;
            let k = s.rounds.last().map_or(0, |r| r.index);
            writeln!(out, "closed round {k} with aggregate {}", format_aggregate(aggregate))?;
            writeln!(out, "{}", s.status_line())?;
        }
        TuneCommand::Advance {
            session,
            template,
            run,
            prompts,
        } => {
            let mut s = store.load(&session)?;
            let registry = prompt_registry(prompts.as_deref())?;
            let t = registry.get(&template)?;
            // keep reviewing the same poems as the previous round
            let keep: Option<Vec<String>> = s
                .rounds
                .last()
                .filter(|r| !r.items.is_empty())
                .map(|r| r.items.iter().map(|i| i.poem_id.clone()).collect());
            let items = match &run {
                Some(dir) => round_items(s.mode, &template, dir, keep.as_deref(), None)?,
                None => Vec::new(),
            };
            s.advance(t, items)?;
            store.save(&s)?;
            writeln!(out, "{}", s.status_line())?;
        }
        TuneCommand::Score {
            session,
            item,
            rater,
            value,
        } => {
            if rater.trim().is_empty() {
                return Err(CliError::Invalid("rater must not be empty".into()));
            }
            let s = store.load(&session)?;
            let round = s.check_submission(&item, value)?;
            store.append_event(&session, &ScoreEvent::new(round, &item, &rater, value))?;
            writeln!(out, "recorded {value} from {rater} for {item} in round {round}")?;
        }
        TuneCommand::Auto { session, run } => {
            let mut s = store.load(&session)?;
            let idx = s
                .rounds
                .len()
                .checked_sub(1)
                .ok_or_else(|| CliError::Invalid("session has no rounds".into()))?;
            let poem_ids: Vec<String> = s.rounds[idx].items.iter().map(|i| i.poem_id.clone()).collect();
            let sample = automated_sample(s.mode, &run, &poem_ids)?;
            let cfg = RunConfig::load(&run.join(poempixel_core::pipeline::CONFIG_FILE))?;
            let providers = g.providers(g.seed.unwrap_or(cfg.seed), cfg.provider_config.as_deref())?;
            let metrics = run_automated_round(&mut s.rounds[idx], &sample, Some(providers.scorer.as_ref()))?;
            store.save(&s)?;
            for (k, v) in metrics {
                writeln!(out, "{k} {v:.4}")?;
            }
        }
        TuneCommand::Replay {
            session,
            mode,
            scores,
            prompts,
        } => {
            if store.exists(&session) {
                return Err(CliError::Invalid(format!("session `{session}` already exists")));
            }
            let rows: Vec<Vec<f64>> = match scores {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?,
                None => match mode {
                    TuningMode::Summary => SUMMARY_TUNING_SCORES.iter().map(|r| r.to_vec()).collect(),
                    TuningMode::Image => IMAGE_TUNING_SCORES.iter().map(|r| r.to_vec()).collect(),
                },
            };
            let registry = prompt_registry(prompts.as_deref())?;
            let templates: Vec<_> = registry.of_kind(mode.template_kind()).cloned().collect();
            if rows.len() > templates.len() {
                return Err(CliError::Invalid(format!(
                    "{} rows of scores but only {} {} templates",
                    rows.len(),
                    templates.len(),
                    mode.template_kind()
                )));
            }
            let (s, events) = replay(TuningSession::new(&session, mode), &templates, &rows)?;
            fs::create_dir_all(root)?;
            store.create(&s)?;
            store.append_events(&session, &events)?;
            print_status(&s, &events, out)?;
        }
    }
    Ok(())
}

fn print_status(s: &TuningSession, events: &[ScoreEvent], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{}", s.status_line())?;
    for r in &s.rounds {
        let (aggregate, complete) = match (r.aggregate, s.round_summary(r.index, events)) {
            (Some(a), summary) => (format_aggregate(a), summary.map(|x| x.complete).unwrap_or(false)),
            (None, Ok(summary)) => (format!("{} so far", format_aggregate(summary.aggregate)), summary.complete),
            (None, Err(_)) => ("-".to_string(), false),
        };
        let status = match r.status {
            RoundStatus::Open => "open",
            RoundStatus::Closed => "closed",
        };
        let mark = if s.selected_round == Some(r.index) { "  *" } else { "" };
        writeln!(
            out,
            "  round {:<2} {:<4} {:<7} {:<10} {}{mark}",
            r.index,
            r.template_id,
            status,
            aggregate,
            if complete { "complete" } else { "incomplete" }
        )?;
    }
    Ok(())
}

fn run_poems(dir: &Path) -> Result<Dataset> {
    let path = dir.join(POEMS_FILE);
    let f = fs::File::open(&path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(read_jsonl("run", BufReader::new(f))?)
}

/// Review items for one round, built from a run's artifacts. The run must
/// have been produced with the round's template.
fn round_items(
    mode: TuningMode,
    template: &str,
    dir: &Path,
    keep: Option<&[String]>,
    sample: Option<usize>,
) -> Result<Vec<RoundItem>> {
    let poems = run_poems(dir)?;
    let wanted = |id: &str| keep.is_none_or(|k| k.iter().any(|x| x == id));
    let mut items = Vec::new();
    match mode {
        TuningMode::Summary => {
            let summaries: Vec<Summary> = read_records(&dir.join(Stage::Summarize.file_name()))?;
            let by_id: HashMap<&str, &Summary> = summaries.iter().map(|s| (s.poem_id.as_str(), s)).collect();
            for p in poems.poems.iter().filter(|p| wanted(&p.id)) {
                let Some(s) = by_id.get(p.id.as_str()) else { continue };
                if s.template_id != template {
                    return Err(CliError::Invalid(format!(
                        "run {} used summary template {} but the round is for {template}",
                        dir.display(),
                        s.template_id
                    )));
                }
                let reference = p
                    .reference_summary
                    .clone()
                    .ok_or_else(|| TuningError::MissingReferences(vec![p.id.clone()]))?;
                items.push(RoundItem {
                    item_id: p.id.clone(),
                    poem_id: p.id.clone(),
                    poem_text: p.text.clone(),
                    candidate: CandidatePayload::Summary {
                        summary_text: s.text.clone(),
                        reference_text: reference,
                    },
                });
            }
        }
        TuningMode::Image => {
            let generations: Vec<GenerationRecord> = read_records(&dir.join(Stage::Image.file_name()))?;
            let by_id: HashMap<&str, &GenerationRecord> =
                generations.iter().map(|g| (g.poem_id.as_str(), g)).collect();
            for p in poems.poems.iter().filter(|p| wanted(&p.id)) {
                let Some(g) = by_id.get(p.id.as_str()).filter(|g| g.image_path.is_some()) else { continue };
                let used = g.instruction_id.rsplit(':').next().unwrap_or_default();
                if used != template {
                    return Err(CliError::Invalid(format!(
                        "run {} used instruction template {used} but the round is for {template}",
                        dir.display()
                    )));
                }
                items.push(RoundItem {
                    item_id: p.id.clone(),
                    poem_id: p.id.clone(),
                    poem_text: p.text.clone(),
                    candidate: CandidatePayload::Image {
                        image_ref: format!("{IMAGES_DIR}/{}", image_file_name(&p.id)),
                        poem_text: p.text.clone(),
                    },
                });
            }
        }
    }
    if let Some(n) = sample {
        items.truncate(n);
    }
    if items.is_empty() {
        return Err(CliError::Invalid(format!("run {} has no candidates to review", dir.display())));
    }
    Ok(items)
}

fn automated_sample(mode: TuningMode, dir: &Path, poem_ids: &[String]) -> Result<AutomatedSample> {
    let poems = run_poems(dir)?;
    let ids: Vec<String> = if poem_ids.is_empty() {
        poems.poems.iter().map(|p| p.id.clone()).collect()
    } else {
        poem_ids.to_vec()
    };
    match mode {
        TuningMode::Summary => {
            let summaries: Vec<Summary> = read_records(&dir.join(Stage::Summarize.file_name()))?;
            let pairs = summaries
                .iter()
                .filter(|s| ids.contains(&s.poem_id))
                .map(|s| SummaryPair {
                    poem_id: s.poem_id.clone(),
                    candidate: s.text.clone(),
                    reference: poems.get(&s.poem_id).and_then(|p| p.reference_summary.clone()),
                })
                .collect();
            Ok(AutomatedSample::Summary(pairs))
        }
        TuningMode::Image => {
            let summaries: Vec<Summary> = read_records(&dir.join(Stage::Summarize.file_name()))?;
            let generations: Vec<GenerationRecord> = read_records(&dir.join(Stage::Image.file_name()))?;
            let pairs = ids
                .iter()
                .map(|id| ImagePair {
                    poem_id: id.clone(),
                    image: generations
                        .iter()
                        .find(|g| &g.poem_id == id)
                        .and_then(|g| load_image(dir, g).ok()),
                    text: summaries
                        .iter()
                        .find(|s| &s.poem_id == id)
                        .map(|s| s.text.clone())
                        .unwrap_or_default(),
                })
                .collect();
            Ok(AutomatedSample::Image(pairs))
        }
    }
}

fn serve(cfg: ReviewConfig, out: &mut dyn Write) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    let (tx, rx) = tokio::sync::oneshot::channel();
    let addr = cfg.addr;
    let result = rt.block_on(async move {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        tokio::spawn(async move {
            if let Ok(a) = rx.await {
                eprintln!("review service listening on http://{a}");
            }
        });
        reviewsvc::serve(cfg, shutdown, Some(tx)).await
    });
    result.map_err(|e| CliError::Invalid(e.to_string()))?;
    writeln!(out, "review service on {addr} stopped")?;
    Ok(())
}
