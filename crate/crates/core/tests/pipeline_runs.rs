use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use poempixel_core::pipeline::{
    evaluate_run, read_records, resume_pipeline, run_pipeline, AlignmentText, EvalRequest,
    ImageSize, PipelineError, RunConfig, RunManifest, RunOptions, Stage, POEMS_FILE,
};
use poempixel_core::providers::mock::{MockChat, MockEmbedder};
use poempixel_core::providers::{ChatProvider, ChatRequest, EmbeddingVector, Embedder, ProviderError, Providers};
use poempixel_core::summarizer::Summary;
use poempixel_core::textmetrics::TextScores;

const JSONL: [&str; 6] = [
    "poems.jsonl",
    "summaries.jsonl",
    "keyelements.jsonl",
    "instructions.jsonl",
    "generations.jsonl",
    "scores.jsonl",
];

fn config(dir: &Path, seed: u64) -> RunConfig {
    RunConfig {
        output_dir: dir.to_path_buf(),
        image: ImageSize { width: 16, height: 16 },
        seed,
        ..RunConfig::default()
    }
}

fn named(id: &str) -> RunOptions {
    RunOptions {
        run_id: Some(id.into()),
        ..RunOptions::default()
    }
}

/// Drops every `"created_at":"..."` field so runs can be compared byte-wise.
fn without_timestamps(text: &str) -> String {
    let key = "\"created_at\":\"";
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find(key) {
        out.push_str(&rest[..start]);
        let after = &rest[start + key.len()..];
        let end = after.find('"').expect("closing quote");
        rest = after[end + 1..].strip_prefix(',').unwrap_or(&after[end + 1..]);
    }
    out.push_str(rest);
    out
}

#[test]
fn same_seed_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(&config(dir.path(), 7), &Providers::mock(7), &named("a")).unwrap();
    let b = run_pipeline(&config(dir.path(), 7), &Providers::mock(7), &named("b")).unwrap();
    for f in JSONL {
        let x = fs::read_to_string(a.run_dir.join(f)).unwrap();
        let y = fs::read_to_string(b.run_dir.join(f)).unwrap();
        assert_eq!(x.lines().count(), 10, "{f}");
        assert_eq!(without_timestamps(&x), without_timestamps(&y), "{f}");
    }
    assert_eq!(
        fs::read(a.run_dir.join("images/parrot.png")).unwrap(),
        fs::read(b.run_dir.join("images/parrot.png")).unwrap()
    );
    let (ma, mb) = (a.manifest, b.manifest);
    assert_eq!((ma.counts, &ma.failures, &ma.warnings), (mb.counts, &mb.failures, &mb.warnings));

    let c = run_pipeline(&config(dir.path(), 8), &Providers::mock(8), &named("c")).unwrap();
    let x = fs::read_to_string(a.run_dir.join("generations.jsonl")).unwrap();
    let z = fs::read_to_string(c.run_dir.join("generations.jsonl")).unwrap();
    assert_ne!(x, z, "seed reaches the image stage");
}

#[test]
fn a_fault_at_each_stage_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    for stage in Stage::ALL {
        let mut opts = named(&format!("fault-{stage}"));
        opts.fault = Some(format!("{stage}:hope").parse().unwrap());
        let m = run_pipeline(&config(dir.path(), 7), &Providers::mock(7), &opts).unwrap().manifest;
        assert!(m.identities_hold(), "{stage}: {:?}", m.counts);
        assert_eq!(m.failures.len(), 1, "{stage}");
        assert_eq!((m.failures[0].stage, m.failures[0].poem_id.as_str()), (stage, "hope"));
        let done = [m.counts.summaries, m.counts.key_elements, m.counts.instructions, m.counts.images, m.counts.scores];
        let idx = Stage::ALL.iter().position(|s| *s == stage).unwrap();
        for (i, n) in done.iter().enumerate() {
            assert_eq!(*n, if i < idx { 10 } else { 9 }, "{stage} stage {i}");
        }
        let on_disk = RunManifest::load(&dir.path().join(format!("fault-{stage}"))).unwrap();
        assert_eq!(on_disk.counts, m.counts);
    }
}

struct Counting<P> {
    inner: P,
    calls: Arc<AtomicUsize>,
}

impl<P: ChatProvider> ChatProvider for Counting<P> {
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }
}

impl<P: Embedder> Embedder for Counting<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        self.calls.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed(texts)
    }
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }
}

fn keep_lines(path: &Path, n: usize) {
    let text = fs::read_to_string(path).unwrap();
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept).unwrap();
}

#[test]
fn resume_completes_only_missing_poems() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 7);
    let first = run_pipeline(&cfg, &Providers::mock(7), &named("r")).unwrap();
    let run = first.run_dir;
    let before = fs::read_to_string(run.join("summaries.jsonl")).unwrap();

    // simulate a crash part-way through: later stages hold fewer records,
    // one file ends in a torn line and there is no manifest yet
    keep_lines(&run.join("summaries.jsonl"), 4);
    keep_lines(&run.join("keyelements.jsonl"), 2);
    keep_lines(&run.join("instructions.jsonl"), 1);
    keep_lines(&run.join("generations.jsonl"), 1);
    keep_lines(&run.join("scores.jsonl"), 0);
    let mut f = fs::OpenOptions::new().append(true).open(run.join("keyelements.jsonl")).unwrap();
    std::io::Write::write_all(&mut f, b"{\"poem_id\":\"eag").unwrap();
    fs::remove_file(run.join("manifest.json")).unwrap();

    let chat_calls = Arc::new(AtomicUsize::new(0));
    let embed_calls = Arc::new(AtomicUsize::new(0));
    let mut providers = Providers::mock(7);
    providers.chat = Arc::new(Counting {
        inner: MockChat::new(7),
        calls: chat_calls.clone(),
    });
    providers.embedder = Arc::new(Counting {
        inner: MockEmbedder::new(7),
        calls: embed_calls.clone(),
    });
    // label centroids are embedded once when registries are built
    let registry_embeds = 12 + 7;

    let out = resume_pipeline(&run, &providers, &RunOptions::default()).unwrap();
    assert!(out.manifest.resumed);
    assert_eq!(out.manifest.counts.scores, 10);
    assert!(out.manifest.failures.is_empty());
    // 6 summaries + 9 instructions
    assert_eq!(chat_calls.load(Ordering::SeqCst), 15);
    assert_eq!(embed_calls.load(Ordering::SeqCst), registry_embeds + 8);

    let after = fs::read_to_string(run.join("summaries.jsonl")).unwrap();
    assert_eq!(after.lines().take(4).collect::<Vec<_>>(), before.lines().take(4).collect::<Vec<_>>());
    for f in JSONL {
        let text = fs::read_to_string(run.join(f)).unwrap();
        let mut ids: Vec<String> = text
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.get("poem_id").or(v.get("id")).and_then(|x| x.as_str()).unwrap().to_string()
            })
            .collect();
        assert_eq!(ids.len(), 10, "{f}");
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10, "{f} has duplicates");
    }

    // a second resume has nothing left to do
    chat_calls.store(0, Ordering::SeqCst);
    resume_pipeline(&run, &providers, &RunOptions::default()).unwrap();
    assert_eq!(chat_calls.load(Ordering::SeqCst), 0);
}

#[test]
fn resume_requires_matching_config() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&config(dir.path(), 7), &Providers::mock(7), &named("m")).unwrap();
    let mut opts = named("m");
    opts.resume = true;
    let err = run_pipeline(&config(dir.path(), 8), &Providers::mock(8), &opts).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
    opts.run_id = Some("nope".into());
    assert!(run_pipeline(&config(dir.path(), 7), &Providers::mock(7), &opts).is_err());
}

#[test]
fn text_report_means_are_per_poem_averages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    cfg.sample_fraction = 0.3;
    let out = run_pipeline(&cfg, &Providers::mock(1), &named("t")).unwrap();
    assert_eq!(out.manifest.counts.poems, 3);
    let report = evaluate_run(&out.run_dir, &EvalRequest { image: false, ..EvalRequest::default() }, None).unwrap();
    let text = report.text.unwrap();

    let poems = poempixel_core::corpus::read_jsonl("p", fs::read(out.run_dir.join(POEMS_FILE)).unwrap().as_slice()).unwrap();
    let summaries: Vec<Summary> = read_records(&out.run_dir.join("summaries.jsonl")).unwrap();
    let mut sums = [0.0; 8];
    for s in &summaries {
        let reference = poems.get(&s.poem_id).unwrap().reference_summary.clone().unwrap();
        for (acc, v) in sums.iter_mut().zip(TextScores::compute(&s.text, &reference).values()) {
            *acc += v;
        }
    }
    for (got, total) in text.mean.values().iter().zip(sums) {
        assert!((got - total / 3.0).abs() <= 1e-9);
    }
    let table = fs::read_to_string(out.run_dir.join("reports/table_text.md")).unwrap();
    assert!(table.contains("| METEOR | "));
    assert_eq!(fs::read_to_string(out.run_dir.join("reports/metrics_text.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn summaries_equal_to_references_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&config(dir.path(), 2), &Providers::mock(2), &named("eq")).unwrap();
    let summaries: Vec<Summary> = read_records(&out.run_dir.join("summaries.jsonl")).unwrap();
    let path = out.run_dir.join(POEMS_FILE);
    let mut poems = poempixel_core::corpus::read_jsonl("p", fs::read(&path).unwrap().as_slice()).unwrap();
    for p in &mut poems.poems {
        p.reference_summary = summaries.iter().find(|s| s.poem_id == p.id).map(|s| s.text.clone());
    }
    let mut buf = Vec::new();
    poems.write_jsonl(&mut buf).unwrap();
    fs::write(&path, buf).unwrap();

    let report = evaluate_run(&out.run_dir, &EvalRequest { image: false, ..EvalRequest::default() }, None).unwrap();
    let m = report.text.unwrap().mean;
    assert_eq!([m.rouge1, m.rouge2, m.rouge_l, m.bleu1, m.bleu2, m.bleu3, m.bleu4], [1.0; 7]);
}

#[test]
fn instruction_as_caption_gives_full_match() {
    let dir = tempfile::tempdir().unwrap();
    let providers = Providers::mock(3);
    let out = run_pipeline(&config(dir.path(), 3), &providers, &named("cap")).unwrap();
    let req = EvalRequest {
        text: false,
        image: true,
        alignment_text: Some(AlignmentText::Instruction),
    };
    let report = evaluate_run(&out.run_dir, &req, Some(providers.scorer.as_ref())).unwrap();
    let image = report.image.unwrap();
    assert_eq!(image.mean_itm, 1.0);
    assert_eq!(image.rows.len(), 10);
    assert!(fs::read_to_string(out.run_dir.join("reports/table_image.md")).unwrap().contains("| ITM | 1.0000 |"));
}

#[test]
fn missing_artifacts_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let providers = Providers::mock(4);
    let out = run_pipeline(&config(dir.path(), 4), &providers, &named("miss")).unwrap();
    fs::remove_file(out.run_dir.join("images/eagle.png")).unwrap();
    let err = evaluate_run(&out.run_dir, &EvalRequest::default(), Some(providers.scorer.as_ref())).unwrap_err();
    assert!(err.to_string().contains("eagle"), "{err}");

    let path = out.run_dir.join(POEMS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if v["id"] == "wind" {
                v.as_object_mut().unwrap().remove("reference_summary");
            }
            format!("{v}\n")
        })
        .collect();
    fs::write(&path, stripped).unwrap();
    let err = evaluate_run(&out.run_dir, &EvalRequest { image: false, ..EvalRequest::default() }, None).unwrap_err();
    assert!(matches!(&err, PipelineError::MissingArtifacts { ids, .. } if ids == &["wind"]));
}
