//! Prompt-tuning feedback loop.
//!
//! A session runs rounds of (generate -> score -> refine). Each round uses one
//! template and collects rater scores: +1/-1 votes summed in summary mode,
//! 1-5 ratings averaged in image mode. The loop stops as soon as a round's
//! aggregate is strictly lower than the previous one, and the round right
//! before the drop is selected. Writing the next template is left to people;
//! the session only sequences, scores and stops.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{AlignmentScorer, ImageArtifact, ProviderError};
use crate::summarizer::{PromptTemplate, TemplateKind};
use crate::textmetrics::{meteor, rouge_l, tokenize};

pub const DEFAULT_MAX_ROUNDS: u32 = 10;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("value {value} is outside the {mode} domain (allowed: {allowed})")]
    InvalidValue {
        mode: TuningMode,
        value: f64,
        allowed: &'static str,
    },
    #[error("events span several rounds: {0:?}")]
    MixedRounds(Vec<u32>),
    #[error("no scores recorded")]
    NoEvents,
    #[error("{0}")]
    State(String),
    #[error("unknown round {0}")]
    UnknownRound(u32),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("template {template} is a {kind} template but the session is in {mode} mode")]
    ModeMismatch {
        template: String,
        kind: TemplateKind,
        mode: TuningMode,
    },
    #[error("missing reference summaries for: {}", .0.join(", "))]
    MissingReferences(Vec<String>),
    #[error("missing generated images for: {}", .0.join(", "))]
    MissingImages(Vec<String>),
    #[error("session store: {0}")]
    Store(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    Summary,
    Image,
}

impl TuningMode {
    pub fn aggregation(self) -> Aggregation {
        match self {
            TuningMode::Summary => Aggregation::Sum,
            TuningMode::Image => Aggregation::Mean,
        }
    }

    pub fn template_kind(self) -> TemplateKind {
        match self {
            TuningMode::Summary => TemplateKind::Summarization,
            TuningMode::Image => TemplateKind::Instruction,
        }
    }

    pub fn allowed_values(self) -> &'static str {
        match self {
            TuningMode::Summary => "-1, +1",
            TuningMode::Image => "1, 2, 3, 4, 5",
        }
    }

    pub fn validate_value(self, value: f64) -> Result<(), TuningError> {
        let ok = match self {
            TuningMode::Summary => value == 1.0 || value == -1.0,
            TuningMode::Image => value.fract() == 0.0 && (1.0..=5.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(TuningError::InvalidValue {
                mode: self,
                value,
                allowed: self.allowed_values(),
            })
        }
    }
}

impl std::fmt::Display for TuningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TuningMode::Summary => "summary",
            TuningMode::Image => "image",
        })
    }
}

impl std::str::FromStr for TuningMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summary" => Ok(TuningMode::Summary),
            "image" => Ok(TuningMode::Image),
            other => Err(format!("unknown mode `{other}` (expected summary or image)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    Human,
    Automated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvent {
    pub round_index: u32,
    pub item_id: String,
    pub rater_id: String,
    pub value: f64,
    #[serde(default)]
    pub source: ScoreSource,
    pub created_at: DateTime<Utc>,
}

impl ScoreEvent {
    pub fn new(round_index: u32, item_id: &str, rater_id: &str, value: f64) -> Self {
        Self {
            round_index,
            item_id: item_id.to_string(),
            rater_id: rater_id.to_string(),
            value,
            source: ScoreSource::Human,
            created_at: Utc::now(),
        }
    }

    fn key(&self) -> (u32, &str, &str) {
        (self.round_index, &self.item_id, &self.rater_id)
    }
}

/// Keeps the latest event per (round, item, rater): newest timestamp wins,
/// and among equal timestamps the one later in the log. Order of first
/// appearance is preserved.
pub fn latest_events(events: &[ScoreEvent]) -> Vec<ScoreEvent> {
    let mut slot: HashMap<(u32, &str, &str), usize> = HashMap::new();
    let mut order: Vec<usize> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        match slot.get(&e.key()) {
            Some(&j) if events[order[j]].created_at > e.created_at => {}
            Some(&j) => order[j] = i,
            None => {
                slot.insert(e.key(), order.len());
                order.push(i);
            }
        }
    }
    order.into_iter().map(|i| events[i].clone()).collect()
}

/// Sum (summary mode) or mean (image mode) of the latest events of one round.
pub fn aggregate_round(events: &[ScoreEvent], mode: TuningMode) -> Result<f64, TuningError> {
    if events.is_empty() {
        return Err(TuningError::NoEvents);
    }
    let rounds: std::collections::BTreeSet<u32> = events.iter().map(|e| e.round_index).collect();
    if rounds.len() > 1 {
        return Err(TuningError::MixedRounds(rounds.into_iter().collect()));
    }
    for e in events {
        mode.validate_value(e.value)?;
    }
    let latest = latest_events(events);
    let total: f64 = latest.iter().map(|e| e.value).sum();
    Ok(match mode.aggregation() {
        Aggregation::Sum => total,
        Aggregation::Mean => total / latest.len() as f64,
    })
}

/// True iff the last aggregate is strictly below its predecessor.
pub fn should_stop(history: &[f64]) -> bool {
    match history {
        [.., prev, last] => last < prev,
        _ => false,
    }
}

/// 1-based index of the selected round: the one before the drop when the
/// loop stopped, the last one when the round cap was hit, otherwise none yet.
pub fn select_best(history: &[f64], stopped: bool, max_rounds_hit: bool) -> Option<usize> {
    if history.is_empty() {
        return None;
    }
    if stopped && history.len() >= 2 {
        Some(history.len() - 1)
    } else if max_rounds_hit || stopped {
        Some(history.len())
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidatePayload {
    Summary {
        summary_text: String,
        reference_text: String,
    },
    Image {
        image_ref: String,
        poem_text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundItem {
    pub item_id: String,
    pub poem_id: String,
    pub poem_text: String,
    pub candidate: CandidatePayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRound {
    pub index: u32,
    pub template_id: String,
    #[serde(default)]
    pub aggregate: Option<f64>,
    #[serde(default)]
    pub automated_metrics: BTreeMap<String, f64>,
    pub status: RoundStatus,
    #[serde(default)]
    pub items: Vec<RoundItem>,
}

impl TuningRound {
    pub fn item(&self, item_id: &str) -> Option<&RoundItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Decrease,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSession {
    pub id: String,
    pub mode: TuningMode,
    pub aggregation: Aggregation,
    pub rounds: Vec<TuningRound>,
    pub stopped: bool,
    #[serde(default)]
    pub stop_reason: Option<StopReason>,
    pub selected_round: Option<u32>,
    pub max_rounds: u32,
    /// Expected raters; a round is complete once each has scored each item.
    #[serde(default)]
    pub raters: Vec<String>,
}

impl TuningSession {
    pub fn new(id: impl Into<String>, mode: TuningMode) -> Self {
        Self {
            id: id.into(),
            mode,
            aggregation: mode.aggregation(),
            rounds: Vec::new(),
            stopped: false,
            stop_reason: None,
            selected_round: None,
            max_rounds: DEFAULT_MAX_ROUNDS,
            raters: Vec::new(),
        }
    }

    pub fn with_raters<I: IntoIterator<Item = S>, S: Into<String>>(mut self, raters: I) -> Self {
        self.raters = raters.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_max_rounds(mut self, max_rounds: u32) -> Self {
        self.max_rounds = max_rounds.max(1);
        self
    }

    pub fn current(&self) -> Option<&TuningRound> {
        self.rounds.last()
    }

    pub fn round(&self, index: u32) -> Result<&TuningRound, TuningError> {
        self.rounds
            .iter()
            .find(|r| r.index == index)
            .ok_or(TuningError::UnknownRound(index))
    }

    /// Aggregates of the closed rounds, in order.
    pub fn history(&self) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.aggregate).collect()
    }

    pub fn selected_template(&self) -> Option<&str> {
        let k = self.selected_round?;
        self.round(k).ok().map(|r| r.template_id.as_str())
    }

    /// Opens the next round with `template`. Refused once stopped, while a
    /// round is still open, or for a template already used in this session.
    pub fn advance(
        &mut self,
        template: &PromptTemplate,
        items: Vec<RoundItem>,
    ) -> Result<&TuningRound, TuningError> {
        if self.stopped {
            return Err(TuningError::State(format!(
                "session {} is stopped; no further rounds",
                self.id
            )));
        }
        if let Some(r) = self.current().filter(|r| r.status == RoundStatus::Open) {
            return Err(TuningError::State(format!(
                "round {} is still open; close it before advancing",
                r.index
            )));
        }
        if template.kind != self.mode.template_kind() {
            return Err(TuningError::ModeMismatch {
                template: template.id.clone(),
                kind: template.kind,
                mode: self.mode,
            });
        }
        if self.rounds.iter().any(|r| r.template_id == template.id) {
            return Err(TuningError::State(format!(
                "template {} was already used in this session",
                template.id
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = items.iter().find(|i| !seen.insert(i.item_id.as_str())) {
            return Err(TuningError::State(format!("duplicate item id `{}`", dup.item_id)));
        }
        let index = self.rounds.len() as u32 + 1;
        self.rounds.push(TuningRound {
            index,
            template_id: template.id.clone(),
            aggregate: None,
            automated_metrics: BTreeMap::new(),
            status: RoundStatus::Open,
            items,
        });
        Ok(self.rounds.last().expect("just pushed"))
    }

    /// Validates a submission against the open round and returns its index.
    pub fn check_submission(&self, item_id: &str, value: f64) -> Result<u32, TuningError> {
        let round = self
            .current()
            .filter(|r| r.status == RoundStatus::Open)
            .ok_or_else(|| TuningError::State("no open round; submissions rejected".into()))?;
        if !round.items.is_empty() && round.item(item_id).is_none() {
            return Err(TuningError::UnknownItem(item_id.to_string()));
        }
        self.mode.validate_value(value)?;
        Ok(round.index)
    }

    /// Closes the open round from its latest events and applies the stopping rule.
    pub fn close_round(&mut self, events: &[ScoreEvent]) -> Result<f64, TuningError> {
        let mode = self.mode;
        let round = self
            .rounds
            .last_mut()
            .filter(|r| r.status == RoundStatus::Open)
            .ok_or_else(|| TuningError::State("no open round to close".into()))?;
        let mine: Vec<ScoreEvent> = events
            .iter()
            .filter(|e| e.round_index == round.index)
            .cloned()
            .collect();
        let aggregate = aggregate_round(&mine, mode)?;
        round.aggregate = Some(aggregate);
        round.status = RoundStatus::Closed;

        let history = self.history();
        if should_stop(&history) {
            self.stopped = true;
            self.stop_reason = Some(StopReason::Decrease);
        } else if self.rounds.len() as u32 >= self.max_rounds {
            self.stopped = true;
            self.stop_reason = Some(StopReason::MaxRounds);
        }
        if self.stopped {
            self.selected_round = select_best(
                &history,
                self.stop_reason == Some(StopReason::Decrease),
                self.stop_reason == Some(StopReason::MaxRounds),
            )
            .map(|k| k as u32);
        }
        Ok(aggregate)
    }

    /// Pending items of `round` for `rater`, in round order. Closed rounds
    /// have nothing pending.
    pub fn pending<'a>(
        &'a self,
        round: u32,
        rater: &str,
        events: &[ScoreEvent],
    ) -> Result<Vec<&'a RoundItem>, TuningError> {
        let r = self.round(round)?;
        if r.status == RoundStatus::Closed {
            return Ok(Vec::new());
        }
        let done: HashSet<&str> = events
            .iter()
            .filter(|e| e.round_index == round && e.rater_id == rater)
            .map(|e| e.item_id.as_str())
            .collect();
        Ok(r.items.iter().filter(|i| !done.contains(i.item_id.as_str())).collect())
    }

    /// Aggregate of a round's latest events, the number of raters seen, and
    /// whether every (item, rater) pair has been scored.
    pub fn round_summary(&self, round: u32, events: &[ScoreEvent]) -> Result<RoundAggregate, TuningError> {
        let r = self.round(round)?;
        let mine: Vec<ScoreEvent> = events
            .iter()
            .filter(|e| e.round_index == round)
            .cloned()
            .collect();
        let aggregate = aggregate_round(&mine, self.mode)?;
        let latest = latest_events(&mine);
        let raters: Vec<&str> = if self.raters.is_empty() {
            let mut seen = Vec::new();
            for e in &latest {
                if !seen.contains(&e.rater_id.as_str()) {
                    seen.push(e.rater_id.as_str());
                }
            }
            seen
        } else {
            self.raters.iter().map(String::as_str).collect()
        };
        let scored: HashSet<(&str, &str)> = latest
            .iter()
            .map(|e| (e.item_id.as_str(), e.rater_id.as_str()))
            .collect();
        let rater_count = latest
            .iter()
            .map(|e| e.rater_id.as_str())
            .collect::<HashSet<_>>()
            .len();
        let complete = !r.items.is_empty()
            && r.items
                .iter()
                .all(|i| raters.iter().all(|rt| scored.contains(&(i.item_id.as_str(), rt))));
        Ok(RoundAggregate {
            aggregate,
            rater_count,
            complete,
        })
    }

    pub fn status_line(&self) -> String {
        if self.stopped {
            let template = self.selected_template().unwrap_or("?");
            return match self.stop_reason {
                Some(StopReason::MaxRounds) => format!(
                    "stopped at the round cap after round {}, selected {template}",
                    self.rounds.len()
                ),
                _ => format!("stopped after round {}, selected {template}", self.rounds.len()),
            };
        }
        match self.current() {
            None => "no rounds yet".to_string(),
            Some(r) if r.status == RoundStatus::Open => {
                format!("round {} open with template {}", r.index, r.template_id)
            }
            Some(r) => format!(
                "round {} closed with aggregate {}; waiting for the next template",
                r.index,
                format_aggregate(r.aggregate.unwrap_or_default())
            ),
        }
    }
}

pub fn format_aggregate(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// Functional form of [`TuningSession::advance`] with no review items.
pub fn advance_session(
    s: &TuningSession,
    next_template: &PromptTemplate,
) -> Result<TuningSession, TuningError> {
    let mut next = s.clone();
    next.advance(next_template, Vec::new())?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundAggregate {
    pub aggregate: f64,
    pub rater_count: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryPair {
    pub poem_id: String,
    pub candidate: String,
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub poem_id: String,
    pub image: Option<ImageArtifact>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AutomatedSample {
    Summary(Vec<SummaryPair>),
    Image(Vec<ImagePair>),
}

/// Mean ROUGE-L F1 and METEOR (summary mode) or mean ITM and ITC (image mode)
/// over the sample, stored on the round and returned.
pub fn run_automated_round(
    round: &mut TuningRound,
    sample: &AutomatedSample,
    scorer: Option<&dyn AlignmentScorer>,
) -> Result<BTreeMap<String, f64>, TuningError> {
    let metrics = match sample {
        AutomatedSample::Summary(pairs) => {
            let missing: Vec<String> = pairs
                .iter()
                .filter(|p| p.reference.as_deref().map_or(true, |r| r.trim().is_empty()))
                .map(|p| p.poem_id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(TuningError::MissingReferences(missing));
            }
            if pairs.is_empty() {
                return Err(TuningError::State("empty automated sample".into()));
            }
            let (mut rl, mut mt) = (0.0, 0.0);
            for p in pairs {
                let c = tokenize(&p.candidate);
                let r = tokenize(p.reference.as_deref().unwrap_or_default());
                rl += rouge_l(&c, &r).f1;
                mt += meteor(&c, &r);
            }
            let n = pairs.len() as f64;
            BTreeMap::from([("meteor".to_string(), mt / n), ("rougeL".to_string(), rl / n)])
        }
        AutomatedSample::Image(pairs) => {
            let missing: Vec<String> = pairs
                .iter()
                .filter(|p| p.image.is_none())
                .map(|p| p.poem_id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(TuningError::MissingImages(missing));
            }
            if pairs.is_empty() {
                return Err(TuningError::State("empty automated sample".into()));
            }
            let scorer = scorer
                .ok_or_else(|| TuningError::State("image mode needs an alignment scorer".into()))?;
            let (mut itm, mut itc) = (0.0, 0.0);
            for p in pairs {
                let s = scorer.score(p.image.as_ref().expect("checked above"), &p.text)?;
                itm += s.itm;
                itc += s.itc;
            }
            let n = pairs.len() as f64;
            BTreeMap::from([("itc".to_string(), itc / n), ("itm".to_string(), itm / n)])
        }
    };
    round.automated_metrics = metrics.clone();
    Ok(metrics)
}

/// File-backed sessions: `<root>/<id>/session.json` plus an append-only
/// `<root>/<id>/events.jsonl`.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

fn store_err(context: &str, path: &Path, e: impl std::fmt::Display) -> TuningError {
    TuningError::Store(format!("{context} {}: {e}", path.display()))
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Opens an existing store directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, TuningError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(TuningError::Store(format!(
                "store path {} does not exist",
                root.display()
            )));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf, TuningError> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
            return Err(TuningError::Store(format!("invalid session id `{id}`")));
        }
        Ok(self.root.join(id))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.dir(id).map(|d| d.join("session.json").is_file()).unwrap_or(false)
    }

    pub fn create(&self, session: &TuningSession) -> Result<(), TuningError> {
        let dir = self.dir(&session.id)?;
        if dir.join("session.json").exists() {
            return Err(TuningError::Store(format!("session `{}` already exists", session.id)));
        }
        fs::create_dir_all(&dir).map_err(|e| store_err("cannot create", &dir, e))?;
        File::create(dir.join("events.jsonl")).map_err(|e| store_err("cannot create", &dir, e))?;
        self.save(session)
    }

    pub fn load(&self, id: &str) -> Result<TuningSession, TuningError> {
        let path = self.dir(id)?.join("session.json");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(TuningError::UnknownSession(id.to_string()))
            }
            Err(e) => return Err(store_err("cannot read", &path, e)),
        };
        serde_json::from_str(&text).map_err(|e| store_err("corrupt", &path, e))
    }

    /// Writes session.json through a temporary file and rename.
    pub fn save(&self, session: &TuningSession) -> Result<(), TuningError> {
        let dir = self.dir(&session.id)?;
        let tmp = dir.join("session.json.tmp");
        let text = serde_json::to_string_pretty(session).map_err(|e| store_err("cannot encode", &tmp, e))?;
        fs::write(&tmp, text + "\n").map_err(|e| store_err("cannot write", &tmp, e))?;
        fs::rename(&tmp, dir.join("session.json")).map_err(|e| store_err("cannot replace", &dir, e))
    }

    pub fn append_event(&self, id: &str, event: &ScoreEvent) -> Result<(), TuningError> {
        self.append_events(id, std::slice::from_ref(event))
    }

    pub fn append_events(&self, id: &str, events: &[ScoreEvent]) -> Result<(), TuningError> {
        let path = self.dir(id)?.join("events.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| store_err("cannot open", &path, e))?;
        let mut buf = Vec::new();
        for event in events {
            serde_json::to_writer(&mut buf, event).map_err(|e| store_err("cannot encode", &path, e))?;
            buf.push(b'\n');
        }
        f.write_all(&buf).map_err(|e| store_err("cannot append", &path, e))?;
        f.sync_data().map_err(|e| store_err("cannot sync", &path, e))
    }

    /// All events in log order (unresolved; see [`latest_events`]).
    pub fn events(&self, id: &str) -> Result<Vec<ScoreEvent>, TuningError> {
        let path = self.dir(id)?.join("events.jsonl");
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(store_err("cannot open", &path, e)),
        };
        let lines: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| store_err("cannot read", &path, e))?;
        let last = lines.iter().rposition(|l| !l.trim().is_empty());
        let mut out = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => out.push(e),
                // a torn final line from a crash is dropped
                Err(_) if Some(i) == last => {}
                Err(e) => {
                    return Err(store_err(&format!("corrupt line {} in", i + 1), &path, e));
                }
            }
        }
        Ok(out)
    }

    pub fn list(&self) -> Result<Vec<String>, TuningError> {
        let mut ids = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| store_err("cannot list", &self.root, e))?;
        for entry in entries.flatten() {
            if entry.path().join("session.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// Per-expert scores from the paper's tuning tables, one row per round.
pub const SUMMARY_TUNING_SCORES: [[f64; 4]; 7] = [
    [1.0, -1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, -1.0],
];

pub const IMAGE_TUNING_SCORES: [[f64; 4]; 6] = [
    [2.0, 2.0, 1.0, 2.0],
    [3.0, 3.0, 2.0, 4.0],
    [3.0, 3.0, 3.0, 3.0],
    [3.0, 4.0, 4.0, 4.0],
    [3.0, 5.0, 4.0, 5.0],
    [3.0, 4.0, 4.0, 5.0],
];

/// Drives a session through rounds of per-rater scores (one item per
/// round), stopping early when the stopping rule fires. Returns the session
/// and every event submitted.
pub fn replay(
    mut session: TuningSession,
    templates: &[PromptTemplate],
    scores: &[Vec<f64>],
) -> Result<(TuningSession, Vec<ScoreEvent>), TuningError> {
    if session.raters.is_empty() {
        let width = scores.iter().map(Vec::len).max().unwrap_or(0);
        session.raters = (1..=width).map(|i| format!("expert{i}")).collect();
    }
    let mut all = Vec::new();
    for (template, row) in templates.iter().zip(scores) {
        if session.stopped {
            break;
        }
        let item = RoundItem {
            item_id: format!("{}-item", template.id),
            poem_id: "replay".into(),
            poem_text: String::new(),
            candidate: CandidatePayload::Summary {
                summary_text: String::new(),
                reference_text: String::new(),
            },
        };
        let round = session.advance(template, vec![item.clone()])?.index;
        let events: Vec<ScoreEvent> = row
            .iter()
            .zip(&session.raters)
            .map(|(&v, rater)| ScoreEvent::new(round, &item.item_id, rater, v))
            .collect();
        session.close_round(&events)?;
        all.extend(events);
    }
    Ok((session, all))
}
