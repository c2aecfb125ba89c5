//! Benchmark evaluation: two-tier selection, accuracy accounting,
//! baseline-comparison tables, and the manual error taxonomy.
//!
//! The core task is always evaluated on its complete item set; every
//! complementary task contributes a fixed-size seeded sample. Selection is
//! a pure function of `(items, specs, seed)` — the seed is mandatory, so a
//! report can always be reproduced. Per-item pipeline failures never abort
//! an evaluation: the item counts as incorrect and carries its failure
//! reason, keeping denominators honest.
//!
//! Baseline numbers for comparison tables ship as a transcribed data file
//! and are rendered as pure arithmetic; they are never test expectations
//! for live runs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::perception::{normalize_candidate, InferenceRequest};
use crate::pipeline::{serialize_trace, Pipeline};
use crate::{Error, Result};

/// Evaluation tier of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// The full item set is evaluated.
    Core,
    /// A fixed-size seeded sample is evaluated.
    Complementary,
}

fn default_sample_size() -> usize {
    50
}

/// How one task is evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub tier: Tier,
    /// Complementary only; core evaluates everything regardless.
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
}

/// Load the task-spec file: a JSON map of task id → spec.
pub fn load_task_specs(path: &Path) -> Result<BTreeMap<String, TaskSpec>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::file(path, format!("cannot read task specs: {e}")))?;
    serde_json::from_str(&raw)
        .map_err(|e| Error::Config(format!("malformed task specs {}: {e}", path.display())))
}

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub task_id: String,
    pub image_ref: String,
    pub question: String,
    pub options: Vec<String>,
    /// Must match one option after candidate normalization.
    pub gold: String,
}

impl BenchmarkItem {
    fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("item_id", &self.item_id),
            ("task_id", &self.task_id),
            ("image_ref", &self.image_ref),
            ("question", &self.question),
            ("gold", &self.gold),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Schema {
                    item: self.item_id.clone(),
                    detail: format!("field `{field}` is empty"),
                });
            }
        }
        if self.options.len() < 2 {
            return Err(Error::Schema {
                item: self.item_id.clone(),
                detail: format!("{} option(s); at least 2 required", self.options.len()),
            });
        }
        let gold = normalize_candidate(&self.gold)?;
        let mut found = false;
        for option in &self.options {
            if normalize_candidate(option)? == gold {
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::GoldNotInOptions(self.item_id.clone()));
        }
        Ok(())
    }
}

/// Load and validate the benchmark file, grouping items by task. The
/// group map iterates in task-id order; items keep file order.
pub fn load_benchmark(path: &Path) -> Result<BTreeMap<String, Vec<BenchmarkItem>>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::file(path, format!("cannot read benchmark: {e}")))?;
    let mut by_task: BTreeMap<String, Vec<BenchmarkItem>> = BTreeMap::new();
    let mut count = 0usize;
    for (number, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem = serde_json::from_str(line).map_err(|e| Error::Schema {
            item: format!("line {}", number + 1),
            detail: e.to_string(),
        })?;
        item.validate()?;
        by_task.entry(item.task_id.clone()).or_default().push(item);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Schema {
            item: path.display().to_string(),
            detail: "benchmark file contains no items".into(),
        });
    }
    Ok(by_task)
}

/// Per-task RNG: the 64-bit seed and the task id hash into an independent
/// stream, so adding a task never reshuffles another task's sample.
fn task_rng(seed: u64, task_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(task_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Build the evaluation set: all items for core tasks, a seeded
/// shuffle-take of `min(sample_size, available)` for complementary tasks.
/// Every task present must have a spec.
pub fn two_tier_select(
    by_task: &BTreeMap<String, Vec<BenchmarkItem>>,
    specs: &BTreeMap<String, TaskSpec>,
    seed: u64,
) -> Result<Vec<BenchmarkItem>> {
    let mut selection = Vec::new();
    for (task_id, items) in by_task {
        let spec = specs
            .get(task_id)
            .ok_or_else(|| Error::MissingTaskSpec(task_id.clone()))?;
        match spec.tier {
            Tier::Core => selection.extend(items.iter().cloned()),
            Tier::Complementary => {
                let mut drawn: Vec<BenchmarkItem> = items.clone();
                drawn.shuffle(&mut task_rng(seed, task_id));
                drawn.truncate(spec.sample_size.min(items.len()));
                selection.extend(drawn);
            }
        }
    }
    Ok(selection)
}

/// The §-style manual failure taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTagKind {
    AmbiguousVisualEvidence,
    CandidateIncompleteness,
    TemporalReasoningFailure,
    ContextIntegrationFailure,
}

impl ErrorTagKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorTagKind::AmbiguousVisualEvidence => "ambiguous_visual_evidence",
            ErrorTagKind::CandidateIncompleteness => "candidate_incompleteness",
            ErrorTagKind::TemporalReasoningFailure => "temporal_reasoning_failure",
            ErrorTagKind::ContextIntegrationFailure => "context_integration_failure",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "ambiguous_visual_evidence" => Ok(ErrorTagKind::AmbiguousVisualEvidence),
            "candidate_incompleteness" => Ok(ErrorTagKind::CandidateIncompleteness),
            "temporal_reasoning_failure" => Ok(ErrorTagKind::TemporalReasoningFailure),
            "context_integration_failure" => Ok(ErrorTagKind::ContextIntegrationFailure),
            other => Err(Error::Config(format!(
                "unknown error tag `{other}`; expected one of ambiguous_visual_evidence, \
candidate_incompleteness, temporal_reasoning_failure, context_integration_failure"
            ))),
        }
    }
}

/// A manual failure annotation on one incorrect item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTag {
    pub tag: ErrorTagKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Outcome of one evaluated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    pub gold: String,
    pub correct: bool,
    /// Stage failure text when the pipeline aborted on this item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_tag: Option<ErrorTag>,
}

/// Accuracy bucket for one task (or the whole run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub n: usize,
    pub correct: usize,
    /// Exact quotient `correct / n`.
    pub accuracy: f64,
}

/// The full evaluation artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub per_task: BTreeMap<String, TaskResult>,
    pub overall: TaskResult,
    pub items: Vec<ItemRecord>,
    /// Per-tag counts over tagged items; recomputed on every tag edit.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tag_counts: BTreeMap<String, usize>,
}

/// Exact accuracy, guarding the denominator.
pub fn compute_accuracy(correct: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(correct as f64 / n as f64)
}

/// Render `correct/n` as a percentage with exactly two decimals,
/// round-half-up, in pure integer arithmetic: 29/48 → "60.42".
pub fn render_percent(correct: usize, n: usize) -> Result<String> {
    if n == 0 {
        return Err(Error::ZeroDenominator);
    }
    let scaled = 10_000 * correct as u128;
    let mut hundredths = scaled / n as u128;
    let remainder = scaled % n as u128;
    if 2 * remainder >= n as u128 {
        hundredths += 1;
    }
    Ok(format!("{}.{:02}", hundredths / 100, hundredths % 100))
}

/// Render integer percent-hundredths ("+2352" → "+23.52").
fn render_signed_hundredths(value: i64) -> String {
    let sign = if value < 0 { "-" } else { "+" };
    let magnitude = value.unsigned_abs();
    format!("{sign}{}.{:02}", magnitude / 100, magnitude % 100)
}

/// Run the pipeline over the selection, writing one trace per item into
/// `trace_dir`. Item failures are recorded, never fatal.
pub fn evaluate(
    selection: &[BenchmarkItem],
    pipeline: &Pipeline,
    seed: u64,
    trace_dir: &Path,
) -> Result<EvalReport> {
    std::fs::create_dir_all(trace_dir)
        .map_err(|e| Error::file(trace_dir, format!("cannot create trace dir: {e}")))?;
    let mut items = Vec::with_capacity(selection.len());
    let mut per_task_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in selection {
        let request = InferenceRequest {
            image_ref: item.image_ref.clone(),
            question: item.question.clone(),
            explicit_options: Some(item.options.clone()),
            request_id: item.item_id.clone(),
        };
        let (trace, outcome) = pipeline.run_inference(&request);
        let trace_path = trace_dir.join(format!("{}.json", item.item_id));
        std::fs::write(&trace_path, serialize_trace(&trace))
            .map_err(|e| Error::file(&trace_path, format!("cannot write trace: {e}")))?;
        let gold = normalize_candidate(&item.gold)?;
        let (prediction, correct, failure) = match outcome {
            Ok(prediction) => {
                let correct = normalize_candidate(&prediction.chosen.label)? == gold;
                (Some(prediction.chosen.label), correct, None)
            }
            Err(err) => (None, false, Some(err.to_string())),
        };
        let bucket = per_task_counts.entry(item.task_id.clone()).or_default();
        bucket.0 += 1;
        bucket.1 += correct as usize;
        items.push(ItemRecord {
            item_id: item.item_id.clone(),
            task_id: item.task_id.clone(),
            prediction,
            gold: item.gold.clone(),
            correct,
            failure,
            trace_path: Some(trace_path.display().to_string()),
            error_tag: None,
        });
    }

    let mut per_task = BTreeMap::new();
    let mut total_n = 0;
    let mut total_correct = 0;
    for (task_id, (n, correct)) in per_task_counts {
        total_n += n;
        total_correct += correct;
        per_task.insert(
            task_id,
            TaskResult {
                n,
                correct,
                accuracy: compute_accuracy(correct, n)?,
            },
        );
    }
    Ok(EvalReport {
        seed,
        per_task,
        overall: TaskResult {
            n: total_n,
            correct: total_correct,
            accuracy: compute_accuracy(total_correct, total_n)?,
        },
        items,
        tag_counts: BTreeMap::new(),
    })
}

/// The transcribed comparison table shipped with the repo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    /// Provenance note; rendered verbatim above comparison tables.
    pub description: String,
    /// The row holding this system's published numbers.
    pub ours_label: String,
    /// row label → task id → accuracy percentage.
    pub rows: BTreeMap<String, BTreeMap<String, f64>>,
}

impl BaselineTable {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::file(path, format!("cannot read baseline table: {e}")))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("malformed baseline table: {e}")))
    }

    /// The copy bundled into the binary.
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../assets/baselines.json"))
            .expect("bundled baseline table parses")
    }

    /// One row as integer percent-hundredths (58.0 → 5800).
    pub fn row_hundredths(&self, label: &str) -> Result<BTreeMap<String, i64>> {
        let row = self
            .rows
            .get(label)
            .ok_or_else(|| Error::Config(format!("baseline table has no row `{label}`")))?;
        Ok(row
            .iter()
            .map(|(task, value)| (task.clone(), (value * 100.0).round() as i64))
            .collect())
    }
}

/// One line of a baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task_id: String,
    /// Percent-hundredths, e.g. 5800 = 58.00%.
    pub ours: i64,
    pub baseline: i64,
    pub delta: i64,
    /// "+23.52"-style rendering of `delta`.
    pub delta_text: String,
}

/// Compare per-task accuracies (percent-hundredths) against one baseline
/// row. Every compared task must exist in the baseline row.
pub fn compare_baselines(
    ours: &BTreeMap<String, i64>,
    baseline: &BTreeMap<String, i64>,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for (task_id, &ours_value) in ours {
        let &baseline_value = baseline
            .get(task_id)
            .ok_or_else(|| Error::TaskMismatch(task_id.clone()))?;
        let delta = ours_value - baseline_value;
        rows.push(ComparisonRow {
            task_id: task_id.clone(),
            ours: ours_value,
            baseline: baseline_value,
            delta,
            delta_text: render_signed_hundredths(delta),
        });
    }
    Ok(rows)
}

/// A report's per-task accuracies as percent-hundredths (round-half-up).
pub fn report_hundredths(report: &EvalReport) -> Result<BTreeMap<String, i64>> {
    report
        .per_task
        .iter()
        .map(|(task, result)| {
            let rendered = render_percent(result.correct, result.n)?;
            let hundredths: i64 = rendered.replace('.', "").parse().map_err(|_| {
                Error::Config(format!("unrenderable accuracy for task `{task}`"))
            })?;
            Ok((task.clone(), hundredths))
        })
        .collect()
}

/// Attach (or replace) a manual failure tag on an incorrect item and
/// recompute the tag distribution.
pub fn tag_error(
    report: &mut EvalReport,
    item_id: &str,
    tag: ErrorTagKind,
    note: Option<String>,
) -> Result<()> {
    let item = report
        .items
        .iter_mut()
        .find(|item| item.item_id == item_id)
        .ok_or_else(|| Error::ItemNotFound(item_id.to_string()))?;
    if item.correct {
        return Err(Error::ItemCorrect(item_id.to_string()));
    }
    item.error_tag = Some(ErrorTag { tag, note });
    report.tag_counts = tag_frequencies(report);
    Ok(())
}

/// Per-tag counts over tagged items.
pub fn tag_frequencies(report: &EvalReport) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for item in &report.items {
        if let Some(tag) = &item.error_tag {
            *counts.entry(tag.tag.as_str().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Persist a report as pretty JSON.
pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("reports always serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::file(path, format!("cannot write report: {e}")))
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::file(path, format!("cannot read report: {e}")))?;
    serde_json::from_str(&raw).map_err(|e| Error::Config(format!("malformed report: {e}")))
}

/// Render the human-readable accuracy table (2-decimal percentages).
pub fn render_report_table(report: &EvalReport) -> Result<String> {
    let mut out = String::new();
    out.push_str(&format!("{:<12} {:>6} {:>8} {:>9}\n", "task", "n", "correct", "accuracy"));
    for (task_id, result) in &report.per_task {
        out.push_str(&format!(
            "{:<12} {:>6} {:>8} {:>8}%\n",
            task_id,
            result.n,
            result.correct,
            render_percent(result.correct, result.n)?
        ));
    }
    out.push_str(&format!(
        "{:<12} {:>6} {:>8} {:>8}%\n",
        "overall",
        report.overall.n,
        report.overall.correct,
        render_percent(report.overall.correct, report.overall.n)?
    ));
    if !report.tag_counts.is_empty() {
        let tagged: usize = report.tag_counts.values().sum();
        out.push_str("\nerror tags (share of tagged items):\n");
        for (tag, count) in &report.tag_counts {
            out.push_str(&format!(
                "  {:<28} {:>4}  {:>6}%\n",
                tag,
                count,
                render_percent(*count, tagged)?
            ));
        }
    }
    Ok(out)
}

/// Render a comparison table against one named baseline row.
pub fn render_comparison_table(
    rows: &[ComparisonRow],
    baseline_label: &str,
    description: &str,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("baseline row: {baseline_label}\n{description}\n\n"));
    out.push_str(&format!(
        "{:<8} {:>8} {:>10} {:>8}\n",
        "task", "ours", "baseline", "delta"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<8} {:>5}.{:02} {:>7}.{:02} {:>8}\n",
            row.task_id,
            row.ours / 100,
            row.ours % 100,
            row.baseline / 100,
            row.baseline % 100,
            row.delta_text
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PipelineConfig;
    use std::path::PathBuf;

    fn bench_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/benchmarks/toybench")
    }

    fn toy_benchmark() -> BTreeMap<String, Vec<BenchmarkItem>> {
        load_benchmark(&bench_dir().join("benchmark.jsonl")).unwrap()
    }

    fn toy_specs() -> BTreeMap<String, TaskSpec> {
        load_task_specs(&bench_dir().join("tasks.json")).unwrap()
    }

    fn toy_pipeline() -> Pipeline {
        let config = PipelineConfig::from_file(&bench_dir().join("config.json")).unwrap();
        Pipeline::new(config).unwrap()
    }

    #[test]
    fn toy_benchmark_census_is_four_per_task() {
        let by_task = toy_benchmark();
        let census: Vec<(String, usize)> = by_task
            .iter()
            .map(|(task, items)| (task.clone(), items.len()))
            .collect();
        assert_eq!(
            census,
            [
                ("T1".to_string(), 4),
                ("T2".to_string(), 4),
                ("T3".to_string(), 4)
            ]
        );
    }

    #[test]
    fn schema_violations_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");

        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_benchmark(&path), Err(Error::Schema { .. })));

        std::fs::write(
            &path,
            r#"{"item_id":"x-1","task_id":"T1","image_ref":"img","question":"Q?","options":["A","B"],"gold":"C"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_benchmark(&path),
            Err(Error::GoldNotInOptions(id)) if id == "x-1"
        ));

        std::fs::write(
            &path,
            r#"{"item_id":"x-2","task_id":"T1","image_ref":"img","question":"Q?","options":["A"],"gold":"A"}"#,
        )
        .unwrap();
        assert!(matches!(load_benchmark(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn gold_matches_options_up_to_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        std::fs::write(
            &path,
            r#"{"item_id":"x-1","task_id":"T1","image_ref":"img","question":"Q?","options":["Apple  Scab","Rust"],"gold":"APPLE SCAB"}"#,
        )
        .unwrap();
        assert_eq!(load_benchmark(&path).unwrap()["T1"].len(), 1);
    }

    #[test]
    fn two_tier_selection_takes_core_fully_and_samples_complementary() {
        let by_task = toy_benchmark();
        let specs = toy_specs();
        let selection = two_tier_select(&by_task, &specs, 7).unwrap();
        assert_eq!(selection.len(), 12, "4 core + clamp(50,4) + clamp(50,4)");
        let t1: Vec<&str> = selection
            .iter()
            .filter(|i| i.task_id == "T1")
            .map(|i| i.item_id.as_str())
            .collect();
        assert_eq!(t1, ["t1-01", "t1-02", "t1-03", "t1-04"], "core keeps file order");

        let again = two_tier_select(&by_task, &specs, 7).unwrap();
        assert_eq!(selection, again, "same seed, same selection");
    }

    #[test]
    fn complementary_sampling_is_seeded_and_clamped() {
        let mut by_task = BTreeMap::new();
        let items: Vec<BenchmarkItem> = (0..200)
            .map(|i| BenchmarkItem {
                item_id: format!("c-{i:03}"),
                task_id: "C1".into(),
                image_ref: "img".into(),
                question: "Q?".into(),
                options: vec!["A".into(), "B".into()],
                gold: "A".into(),
            })
            .collect();
        by_task.insert("C1".to_string(), items);
        let mut specs = BTreeMap::new();
        specs.insert(
            "C1".to_string(),
            TaskSpec {
                tier: Tier::Complementary,
                sample_size: 50,
            },
        );
        let first = two_tier_select(&by_task, &specs, 7).unwrap();
        assert_eq!(first.len(), 50);
        let mut distinct: Vec<&str> = first.iter().map(|i| i.item_id.as_str()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 50, "drawn without replacement");
        let second = two_tier_select(&by_task, &specs, 7).unwrap();
        assert_eq!(first, second);
        let other = two_tier_select(&by_task, &specs, 8).unwrap();
        assert_ne!(first, other, "different seed, different draw");
    }

    #[test]
    fn missing_task_spec_is_an_error() {
        let by_task = toy_benchmark();
        let mut specs = toy_specs();
        specs.remove("T2");
        assert!(matches!(
            two_tier_select(&by_task, &specs, 7),
            Err(Error::MissingTaskSpec(task)) if task == "T2"
        ));
    }

    #[test]
    fn accuracy_is_exact_and_rendering_rounds_half_up() {
        assert_eq!(compute_accuracy(3, 4).unwrap(), 0.75);
        assert_eq!(compute_accuracy(0, 9).unwrap(), 0.0);
        assert!(matches!(compute_accuracy(0, 0), Err(Error::ZeroDenominator)));
        assert_eq!(render_percent(29, 48).unwrap(), "60.42");
        assert_eq!(render_percent(3, 4).unwrap(), "75.00");
        assert_eq!(render_percent(1, 3).unwrap(), "33.33");
        assert_eq!(render_percent(2, 3).unwrap(), "66.67");
        assert_eq!(render_percent(1, 800).unwrap(), "0.13", "0.125 rounds up");
        assert_eq!(render_percent(12, 12).unwrap(), "100.00");
    }

    #[test]
    fn toy_evaluation_scores_exactly_nine_of_twelve() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = toy_pipeline();
        let selection = two_tier_select(&toy_benchmark(), &toy_specs(), 7).unwrap();
        let report = evaluate(&selection, &pipeline, 7, dir.path()).unwrap();
        assert_eq!(report.overall.n, 12);
        assert_eq!(report.overall.correct, 9);
        assert_eq!(report.overall.accuracy, 0.75);
        for task in ["T1", "T2", "T3"] {
            assert_eq!(report.per_task[task].n, 4);
            assert_eq!(report.per_task[task].correct, 3);
        }
        let wrong: Vec<&str> = report
            .items
            .iter()
            .filter(|i| !i.correct)
            .map(|i| i.item_id.as_str())
            .collect();
        assert_eq!(wrong, ["t1-04", "t2-04", "t3-04"]);
        for item in &report.items {
            let trace_path = item.trace_path.as_ref().unwrap();
            assert!(Path::new(trace_path).exists(), "trace written for {}", item.item_id);
            assert!(item.failure.is_none());
        }
    }

    #[test]
    fn failing_item_counts_incorrect_without_aborting() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = toy_pipeline();
        let mut selection = two_tier_select(&toy_benchmark(), &toy_specs(), 7).unwrap();
        // An item whose labels no fixture covers: its recite stage fails.
        selection.push(BenchmarkItem {
            item_id: "t1-99".into(),
            task_id: "T1".into(),
            image_ref: "images/none.jpg".into(),
            question: "Which disease is shown?".into(),
            options: vec!["Unknown Blight".into(), "Unknown Rot".into()],
            gold: "Unknown Blight".into(),
        });
        let report = evaluate(&selection, &pipeline, 7, dir.path()).unwrap();
        assert_eq!(report.overall.n, 13, "n unchanged by the failure");
        assert_eq!(report.overall.correct, 9);
        let failed = report.items.iter().find(|i| i.item_id == "t1-99").unwrap();
        assert!(!failed.correct);
        assert!(failed.failure.as_ref().unwrap().contains("recite"));
        assert!(failed.prediction.is_none());
    }

    #[test]
    fn evaluation_reports_are_reproducible() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let pipeline = toy_pipeline();
            let selection = two_tier_select(&toy_benchmark(), &toy_specs(), 7).unwrap();
            let mut report = evaluate(&selection, &pipeline, 7, dir.path()).unwrap();
            // Trace paths embed the temp dir; blank them for comparison.
            for item in &mut report.items {
                item.trace_path = None;
            }
            serde_json::to_string_pretty(&report).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bundled_baseline_deltas_reproduce_the_published_gaps() {
        let table = BaselineTable::bundled();
        let ours = table.row_hundredths(&table.ours_label).unwrap();
        let baseline = table.row_hundredths("QwenVLM-72B").unwrap();
        let rows = compare_baselines(&ours, &baseline).unwrap();
        let by_task: BTreeMap<&str, &ComparisonRow> =
            rows.iter().map(|r| (r.task_id.as_str(), r)).collect();
        assert_eq!(by_task["WID"].delta_text, "+23.52");
        assert_eq!(by_task["DID"].delta_text, "+20.04");
        assert_eq!(by_task["MQA"].delta_text, "+13.14");
        assert_eq!(by_task["WID"].ours, 5800);
        assert_eq!(by_task["WID"].baseline, 3448);
    }

    #[test]
    fn equal_rows_compare_to_zero_deltas() {
        let table = BaselineTable::bundled();
        let ours = table.row_hundredths(&table.ours_label).unwrap();
        let rows = compare_baselines(&ours, &ours).unwrap();
        assert!(rows.iter().all(|r| r.delta == 0 && r.delta_text == "+0.00"));
    }

    #[test]
    fn comparing_against_a_row_missing_a_task_fails() {
        let mut ours = BTreeMap::new();
        ours.insert("WID".to_string(), 5800i64);
        ours.insert("XYZ".to_string(), 5000i64);
        let table = BaselineTable::bundled();
        let baseline = table.row_hundredths("GPT-4o").unwrap();
        assert!(matches!(
            compare_baselines(&ours, &baseline),
            Err(Error::TaskMismatch(task)) if task == "XYZ"
        ));
    }

    fn report_with_items(correct_flags: &[(&str, bool)]) -> EvalReport {
        let items: Vec<ItemRecord> = correct_flags
            .iter()
            .map(|(id, correct)| ItemRecord {
                item_id: id.to_string(),
                task_id: "T1".into(),
                prediction: Some("A".into()),
                gold: "A".into(),
                correct: *correct,
                failure: None,
                trace_path: None,
                error_tag: None,
            })
            .collect();
        let n = items.len();
        let correct = items.iter().filter(|i| i.correct).count();
        let mut per_task = BTreeMap::new();
        per_task.insert(
            "T1".to_string(),
            TaskResult {
                n,
                correct,
                accuracy: correct as f64 / n as f64,
            },
        );
        EvalReport {
            seed: 7,
            per_task,
            overall: TaskResult {
                n,
                correct,
                accuracy: correct as f64 / n as f64,
            },
            items,
            tag_counts: BTreeMap::new(),
        }
    }

    #[test]
    fn tagging_rules_and_frequencies() {
        let mut report = report_with_items(&[("i-1", false), ("i-2", false), ("i-3", true)]);
        tag_error(
            &mut report,
            "i-1",
            ErrorTagKind::AmbiguousVisualEvidence,
            Some("low contrast".into()),
        )
        .unwrap();
        tag_error(&mut report, "i-2", ErrorTagKind::CandidateIncompleteness, None).unwrap();
        assert_eq!(report.tag_counts["ambiguous_visual_evidence"], 1);
        assert_eq!(report.tag_counts.values().sum::<usize>(), 2);

        assert!(matches!(
            tag_error(&mut report, "i-3", ErrorTagKind::AmbiguousVisualEvidence, None),
            Err(Error::ItemCorrect(_))
        ));
        assert!(matches!(
            tag_error(&mut report, "i-9", ErrorTagKind::AmbiguousVisualEvidence, None),
            Err(Error::ItemNotFound(_))
        ));

        // Retag replaces, and counts stay consistent.
        tag_error(&mut report, "i-1", ErrorTagKind::TemporalReasoningFailure, None).unwrap();
        assert_eq!(report.tag_counts.get("ambiguous_visual_evidence"), None);
        assert_eq!(report.tag_counts["temporal_reasoning_failure"], 1);
        assert_eq!(report.tag_counts.values().sum::<usize>(), 2);
    }

    #[test]
    fn nineteen_of_fifty_renders_as_thirty_eight_percent() {
        let flags: Vec<(String, bool)> = (0..50).map(|i| (format!("e-{i:02}"), false)).collect();
        let refs: Vec<(&str, bool)> = flags.iter().map(|(id, c)| (id.as_str(), *c)).collect();
        let mut report = report_with_items(&refs);
        for i in 0..50 {
            let tag = if i < 19 {
                ErrorTagKind::AmbiguousVisualEvidence
            } else {
                ErrorTagKind::CandidateIncompleteness
            };
            tag_error(&mut report, &format!("e-{i:02}"), tag, None).unwrap();
        }
        let tagged: usize = report.tag_counts.values().sum();
        assert_eq!(tagged, 50);
        assert_eq!(
            render_percent(report.tag_counts["ambiguous_visual_evidence"], tagged).unwrap(),
            "38.00"
        );
        let table = render_report_table(&report).unwrap();
        assert!(table.contains("38.00%"));
    }

    #[test]
    fn reports_round_trip_through_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let mut report = report_with_items(&[("i-1", false), ("i-2", true)]);
        tag_error(&mut report, "i-1", ErrorTagKind::ContextIntegrationFailure, None).unwrap();
        save_report(&report, &path).unwrap();
        let loaded = load_report(&path).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn tag_names_parse_and_print_consistently() {
        for kind in [
            ErrorTagKind::AmbiguousVisualEvidence,
            ErrorTagKind::CandidateIncompleteness,
            ErrorTagKind::TemporalReasoningFailure,
            ErrorTagKind::ContextIntegrationFailure,
        ] {
            assert_eq!(ErrorTagKind::parse(kind.as_str()).unwrap(), kind);
        }
        assert!(ErrorTagKind::parse("made_up_tag").is_err());
    }
}
