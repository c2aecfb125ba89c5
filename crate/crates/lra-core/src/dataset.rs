//! Curriculum dataset construction for router training.
//!
//! From a taxonomy-annotated entity corpus, this module draws entity pairs
//! stratified by taxonomic distance (cross-family, within-family, and
//! congeneric/co-occurring), simulates a visual description for each pair
//! from the entity's encyclopedic text fields, asks a teacher backend to
//! write the matching retrieval instruction, rejects anything that is not
//! a valid template instance, and exports the surviving `(input, target)`
//! pairs in curriculum order — coarse distinctions first, fine ones last.
//!
//! Everything except the teacher calls is pure and seeded: the same corpus,
//! total, and seed always produce the same pair list and the same export
//! bytes.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway};
use crate::parallel::bounded_map;
use crate::prompts::PromptPack;
use crate::template::validate_instruction_template;
use crate::{Error, Result};

/// The fixed level split: 20% cross-family, 40% within-family, 40% fine.
pub const LEVEL_RATIOS: (f64, f64, f64) = (0.2, 0.4, 0.4);

/// Default size of the human-review sample.
pub const DEFAULT_REVIEW_SIZE: usize = 50;

/// One corpus entity with its taxonomy and source text fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub name: String,
    pub family: String,
    pub genus: String,
    #[serde(default)]
    pub reference_text: String,
    #[serde(default)]
    pub alt_text: String,
    #[serde(default)]
    pub attribution: String,
    /// Co-occurrence grouping: entities sharing a window id appeared in
    /// the same encyclopedic context and qualify as fine-grained pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_window_id: Option<String>,
}

/// Corpus load result: valid records plus per-record warnings.
#[derive(Debug, Clone)]
pub struct CorpusLoad {
    pub entities: Vec<EntityRecord>,
    pub warnings: Vec<String>,
    pub skipped: usize,
}

/// Load the entity corpus (JSON Lines). Records missing taxonomy are
/// skipped with a warning, never silently; zero valid records is an error.
pub fn load_entities(path: &Path) -> Result<CorpusLoad> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::file(path, format!("cannot read entity corpus: {e}")))?;
    let mut entities = Vec::new();
    let mut warnings = Vec::new();
    for (number, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EntityRecord = match serde_json::from_str(line) {
            Ok(record) => record,
            Err(e) => {
                warnings.push(format!("corpus line {}: malformed record: {e}", number + 1));
                continue;
            }
        };
        let mut missing = Vec::new();
        for (field, value) in [
            ("name", &record.name),
            ("family", &record.family),
            ("genus", &record.genus),
        ] {
            if value.trim().is_empty() {
                missing.push(field);
            }
        }
        if !missing.is_empty() {
            warnings.push(format!(
                "corpus line {}: record `{}` skipped (missing {})",
                number + 1,
                record.entity_id,
                missing.join(", ")
            ));
            continue;
        }
        entities.push(record);
    }
    let skipped = warnings.len();
    if entities.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(CorpusLoad {
        entities,
        warnings,
        skipped,
    })
}

/// A sampled training pair at one taxonomic-distance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPair {
    pub a: EntityRecord,
    pub b: EntityRecord,
    /// 1 = cross-family, 2 = within-family cross-genus, 3 = congeneric or
    /// co-occurring.
    pub level: u8,
}

impl EntityPair {
    /// Does this pair actually satisfy its level's qualification rule?
    pub fn level_invariant_holds(&self) -> bool {
        if self.a.entity_id == self.b.entity_id {
            return false;
        }
        match self.level {
            1 => self.a.family != self.b.family,
            2 => self.a.family == self.b.family && self.a.genus != self.b.genus,
            3 => {
                self.a.genus == self.b.genus
                    || (self.a.context_window_id.is_some()
                        && self.a.context_window_id == self.b.context_window_id)
            }
            _ => false,
        }
    }
}

/// Split `total` into three level counts by largest-remainder
/// apportionment; remainder ties go to the lower level index.
pub fn apportion_counts(total: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let ratios = [ratios.0, ratios.1, ratios.2];
    debug_assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let quotas: Vec<f64> = ratios.iter().map(|r| total as f64 * r).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Stable sort by descending remainder: equal remainders keep index
    // order, which is exactly the tie-toward-lower-level rule.
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.partial_cmp(&ri).expect("remainders are finite")
    });
    for &level in order.iter().take(total - assigned) {
        counts[level] += 1;
    }
    (counts[0], counts[1], counts[2])
}

/// All qualifying pairs for one level, in canonical order: entities sorted
/// by `entity_id`, pairs enumerated lexicographically by index.
fn qualifying_pairs(entities: &[EntityRecord], level: u8) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..entities.len() {
        for j in (i + 1)..entities.len() {
            let probe = EntityPair {
                a: entities[i].clone(),
                b: entities[j].clone(),
                level,
            };
            if probe.level_invariant_holds() {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Draw a stratified pair sample: per-level counts from
/// [`apportion_counts`] with the fixed ratios, each level drawn without
/// replacement by a seeded shuffle of its canonically ordered qualifying
/// pairs. Pure in `(entities, total, seed)`.
pub fn stratified_pair_sample(
    entities: &[EntityRecord],
    total: usize,
    seed: u64,
) -> Result<Vec<EntityPair>> {
    let mut sorted: Vec<EntityRecord> = entities.to_vec();
    sorted.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
    let (n1, n2, n3) = apportion_counts(total, LEVEL_RATIOS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = Vec::with_capacity(total);
    for (level, needed) in [(1u8, n1), (2, n2), (3, n3)] {
        let mut universe = qualifying_pairs(&sorted, level);
        if universe.len() < needed {
            return Err(Error::InsufficientPairs {
                level,
                needed,
                available: universe.len(),
            });
        }
        universe.shuffle(&mut rng);
        for &(i, j) in universe.iter().take(needed) {
            sample.push(EntityPair {
                a: sorted[i].clone(),
                b: sorted[j].clone(),
                level,
            });
        }
    }
    Ok(sample)
}

/// Ask the teacher backend to describe the entity as a frozen visual
/// encoder would, from its encyclopedic text fields alone. Empty source
/// fields are omitted — no empty headers.
pub fn simulate_description(
    entity: &EntityRecord,
    teacher_profile: &str,
    gateway: &Gateway,
    pack: &PromptPack,
) -> Result<String> {
    let mut prompt = pack.simulate.trim_end().to_string();
    prompt.push_str("\n\nENTITY:\n");
    prompt.push_str(&entity.name);
    for (header, value) in [
        ("REFERENCE", &entity.reference_text),
        ("ALT", &entity.alt_text),
        ("ATTRIBUTION", &entity.attribution),
    ] {
        if !value.trim().is_empty() {
            prompt.push_str(&format!("\n\n{header}:\n{value}"));
        }
    }
    prompt.push('\n');
    let completion = gateway.complete(&CompletionRequest::new(teacher_profile, prompt))?;
    Ok(completion.text)
}

/// The default training-time question for a pair.
pub fn default_question(pair: &EntityPair) -> String {
    format!("Which is shown: {} or {}?", pair.a.name, pair.b.name)
}

/// The `[D; C; Q]` block shared by the teacher prompt and the exported
/// training input, so the trained router sees exactly what the teacher saw.
pub fn build_training_input(description: &str, pair: &EntityPair, question: &str) -> String {
    format!(
        "DESCRIPTION:\n{description}\n\nCANDIDATES:\n{}\n{}\n\nQUESTION:\n{question}",
        pair.a.name, pair.b.name
    )
}

/// One accepted training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub pair: EntityPair,
    pub simulated_description: String,
    pub question: String,
    /// The pair's two names, in pair order.
    pub candidates: (String, String),
    /// The teacher's retrieval instruction — always a valid template
    /// instance.
    pub instruction: String,
    pub human_verified: bool,
}

/// Outcome of one teacher instruction request.
#[derive(Debug, Clone, PartialEq)]
pub enum InstructionOutcome {
    Accepted(Box<InstructionRecord>),
    /// The teacher failed template validation twice; the record is dropped.
    Dropped { pair_ids: (String, String), reason: String },
}

/// Ask the teacher for the retrieval instruction matching `[D; C; Q]`.
/// A response that is not a template instance earns one retry with a
/// format reminder; a second failure drops the record with a warning.
pub fn generate_instruction(
    pair: &EntityPair,
    simulated_description: &str,
    question: &str,
    teacher_profile: &str,
    gateway: &Gateway,
    pack: &PromptPack,
) -> Result<InstructionOutcome> {
    let base_prompt = format!(
        "{}\n\n{}\n",
        pack.teacher.trim_end(),
        build_training_input(simulated_description, pair, question)
    );
    let mut prompt = base_prompt.clone();
    let mut last_reason = String::new();
    for attempt in 0..2 {
        let completion = gateway.complete(&CompletionRequest::new(teacher_profile, prompt.clone()))?;
        let proposed = completion.text.trim();
        let check = validate_instruction_template(proposed);
        if check.accepted {
            return Ok(InstructionOutcome::Accepted(Box::new(InstructionRecord {
                pair: pair.clone(),
                simulated_description: simulated_description.to_string(),
                question: question.to_string(),
                candidates: (pair.a.name.clone(), pair.b.name.clone()),
                instruction: proposed.to_string(),
                human_verified: false,
            })));
        }
        last_reason = format!(
            "{} at byte {}",
            check.reason.unwrap_or_else(|| "not a template instance".into()),
            check.failed_at.unwrap_or(0)
        );
        if attempt == 0 {
            prompt = format!("{base_prompt}\nRespond with exactly one template instruction line.");
        }
    }
    Ok(InstructionOutcome::Dropped {
        pair_ids: (pair.a.entity_id.clone(), pair.b.entity_id.clone()),
        reason: last_reason,
    })
}

/// Output of a full dataset build.
#[derive(Debug, Clone)]
pub struct BuildOutput {
    /// Accepted records, in sampling order.
    pub records: Vec<InstructionRecord>,
    /// Corpus-load and teacher-drop warnings, in occurrence order.
    pub warnings: Vec<String>,
}

/// Run the whole construction: sample pairs, simulate descriptions, and
/// collect teacher instructions under the bounded fan-out. Dropped pairs
/// become warnings, not errors.
pub fn build_dataset(
    entities: &[EntityRecord],
    total: usize,
    seed: u64,
    teacher_profile: &str,
    gateway: &Gateway,
    pack: &PromptPack,
    concurrency_limit: usize,
) -> Result<BuildOutput> {
    let pairs = stratified_pair_sample(entities, total, seed)?;
    let outcomes = bounded_map(&pairs, concurrency_limit, |_, pair| {
        let description = simulate_description(&pair.a, teacher_profile, gateway, pack)?;
        let question = default_question(pair);
        generate_instruction(pair, &description, &question, teacher_profile, gateway, pack)
    });
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for outcome in outcomes {
        match outcome? {
            InstructionOutcome::Accepted(record) => records.push(*record),
            InstructionOutcome::Dropped { pair_ids, reason } => warnings.push(format!(
                "pair ({}, {}) dropped: teacher instruction rejected ({reason})",
                pair_ids.0, pair_ids.1
            )),
        }
    }
    Ok(BuildOutput { records, warnings })
}

/// One exported training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub level: u8,
    pub pair_a: String,
    pub pair_b: String,
    /// The `[D; C; Q]` block the router is trained on.
    pub input: String,
    /// The target retrieval instruction `q*`.
    pub target: String,
    pub human_verified: bool,
}

/// Per-level export accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub per_level: [usize; 3],
    pub human_verified: usize,
    pub total: usize,
}

/// Write the curriculum file: level order 1 → 2 → 3, stable within level
/// by record order, one JSON row per record. Refuses to export any record
/// whose instruction is not a valid template instance.
pub fn export_curriculum(records: &[InstructionRecord], path: &Path) -> Result<ExportSummary> {
    for record in records {
        let check = validate_instruction_template(&record.instruction);
        if !check.accepted {
            return Err(Error::InvalidInstruction(record.instruction.clone()));
        }
    }
    let mut ordered: Vec<&InstructionRecord> = records.iter().collect();
    ordered.sort_by_key(|record| record.pair.level);
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::file(path, format!("cannot create export file: {e}")))?;
    let mut per_level = [0usize; 3];
    let mut human_verified = 0;
    for record in &ordered {
        let row = ExportRecord {
            level: record.pair.level,
            pair_a: record.pair.a.entity_id.clone(),
            pair_b: record.pair.b.entity_id.clone(),
            input: build_training_input(
                &record.simulated_description,
                &record.pair,
                &record.question,
            ),
            target: record.instruction.clone(),
            human_verified: record.human_verified,
        };
        let line = serde_json::to_string(&row).expect("export rows always serialize");
        writeln!(file, "{line}").map_err(|e| Error::file(path, format!("write failed: {e}")))?;
        per_level[(record.pair.level - 1) as usize] += 1;
        if record.human_verified {
            human_verified += 1;
        }
    }
    Ok(ExportSummary {
        per_level,
        human_verified,
        total: records.len(),
    })
}

/// Read an exported curriculum file back.
pub fn load_export(path: &Path) -> Result<Vec<ExportRecord>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::file(path, format!("cannot read export file: {e}")))?;
    let mut rows = Vec::new();
    for (number, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ExportRecord = serde_json::from_str(line)
            .map_err(|e| Error::file(path, format!("export line {}: {e}", number + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// One worksheet row awaiting a human verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub pair_a: String,
    pub pair_b: String,
    pub input: String,
    pub instruction: String,
    /// Left null for the annotator to fill with true/false.
    pub verified: Option<bool>,
}

/// Sample the human-review worksheet: a seeded draw of fine-grained
/// (level-3) rows, clamped to availability.
pub fn sample_review_worksheet(rows: &[ExportRecord], size: usize, seed: u64) -> Vec<ReviewRow> {
    let mut fine: Vec<&ExportRecord> = rows.iter().filter(|row| row.level == 3).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fine.shuffle(&mut rng);
    fine.into_iter()
        .take(size)
        .map(|row| ReviewRow {
            pair_a: row.pair_a.clone(),
            pair_b: row.pair_b.clone(),
            input: row.input.clone(),
            instruction: row.target.clone(),
            verified: None,
        })
        .collect()
}

/// Import annotator verdicts: rows whose `verified` is `true` mark the
/// matching records human-verified. Returns how many records changed.
pub fn apply_review(records: &mut [InstructionRecord], reviews: &[ReviewRow]) -> usize {
    let mut changed = 0;
    for review in reviews {
        if review.verified != Some(true) {
            continue;
        }
        for record in records.iter_mut() {
            if record.pair.a.entity_id == review.pair_a
                && record.pair.b.entity_id == review.pair_b
                && !record.human_verified
            {
                record.human_verified = true;
                changed += 1;
            }
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendProfile, GatewayOptions, Role};
    use std::path::PathBuf;

    fn corpus_path(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures/datasets")
            .join(name)
    }

    fn toy_entities() -> Vec<EntityRecord> {
        load_entities(&corpus_path("entities_toy6.jsonl"))
            .unwrap()
            .entities
    }

    #[test]
    fn toy_corpus_loads_six_clean_records() {
        let load = load_entities(&corpus_path("entities_toy6.jsonl")).unwrap();
        assert_eq!(load.entities.len(), 6);
        assert!(load.warnings.is_empty());
        let ids: Vec<&str> = load.entities.iter().map(|e| e.entity_id.as_str()).collect();
        assert_eq!(ids, ["toy-01", "toy-02", "toy-03", "toy-04", "toy-05", "toy-06"]);
    }

    #[test]
    fn sample_corpus_loads_thirty_records() {
        let load = load_entities(&corpus_path("entities_sample30.jsonl")).unwrap();
        assert_eq!(load.entities.len(), 30);
        assert!(load.warnings.is_empty());
        assert_eq!(load.entities[0].entity_id, "ent-001");
        assert_eq!(load.entities[29].entity_id, "ent-030");
    }

    #[test]
    fn invalid_records_are_skipped_with_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"entity_id":"x-1","name":"Alpha one","family":"Fam","genus":"Gen"}"#, "\n",
                r#"{"entity_id":"x-2","name":"Beta two","family":"Fam","genus":""}"#, "\n",
                "not json\n",
                r#"{"entity_id":"x-3","name":"Gamma three","family":"Fam2","genus":"Gen2"}"#, "\n",
                r#"{"entity_id":"x-4","name":"Delta four","family":"Fam2","genus":"Gen3"}"#, "\n",
            ),
        )
        .unwrap();
        let load = load_entities(&path).unwrap();
        assert_eq!(load.entities.len(), 3);
        assert_eq!(load.warnings.len(), 2);
        assert_eq!(load.skipped, 2);
        assert!(load.warnings[0].contains("x-2"));
       assert!(load.warnings[0].contains("genus"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_entities(&path), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn apportionment_reproduces_the_published_split() {
        assert_eq!(apportion_counts(8000, LEVEL_RATIOS), (1600, 3200, 3200));
        assert_eq!(apportion_counts(0, LEVEL_RATIOS), (0, 0, 0));
        // Hand computation: quotas 1.4/2.8/2.8 → floors 1/2/2,
        // remainders .4/.8/.8, two leftover seats go to levels 2 and 3.
        assert_eq!(apportion_counts(7, LEVEL_RATIOS), (1, 3, 3));
    }

    #[test]
    fn apportionment_largest_remainder_properties_hold() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let total = rng.random_range(0..5000usize);
            let a = rng.random_range(1..10u32) as f64;
            let b = rng.random_range(1..10u32) as f64;
            let c = rng.random_range(1..10u32) as f64;
            let sum = a + b + c;
            let ratios = (a / sum, b / sum, c / sum);
            let (n1, n2, n3) = apportion_counts(total, ratios);
            assert_eq!(n1 + n2 + n3, total);
            for (n, r) in [(n1, ratios.0), (n2, ratios.1), (n3, ratios.2)] {
                assert!(
                    (n as f64 - total as f64 * r).abs() < 1.0,
                    "count {n} strays from quota {}",
                    total as f64 * r
                );
            }
        }
    }

    #[test]
    fn remainder_ties_break_toward_the_lower_level() {
        // quotas 2.5/2.5/5.0: one leftover seat, levels 1 and 2 tie on
        // remainder .5 → level 1 wins.
        assert_eq!(apportion_counts(10, (0.25, 0.25, 0.5)), (3, 2, 5));
    }

    #[test]
    fn toy_universe_sizes_match_the_hand_count() {
        let mut entities = toy_entities();
        entities.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
        assert_eq!(qualifying_pairs(&entities, 1).len(), 9, "3×3 cross-family");
        assert_eq!(qualifying_pairs(&entities, 2).len(), 6, "C(3,2) per family");
        assert_eq!(qualifying_pairs(&entities, 3).len(), 2, "two shared windows");
    }

    #[test]
    fn stratified_sample_is_reproducible_and_level_correct() {
        let entities = toy_entities();
        let first = stratified_pair_sample(&entities, 5, 42).unwrap();
        let second = stratified_pair_sample(&entities, 5, 42).unwrap();
        assert_eq!(first, second, "same seed, same sample");
        assert_eq!(first.len(), 5);
        let levels: Vec<u8> = first.iter().map(|p| p.level).collect();
        assert_eq!(levels, [1, 2, 2, 3, 3], "counts follow (1,2,2)");
        for pair in &first {
            assert!(pair.level_invariant_holds(), "pair {:?} violates its level", pair);
        }
        let other_seed = stratified_pair_sample(&entities, 5, 43).unwrap();
        assert_ne!(first, other_seed, "different seed, different sample");
    }

    #[test]
    fn sample_matches_the_committed_golden_pairs() {
        let entities = toy_entities();
        let sample = stratified_pair_sample(&entities, 5, 42).unwrap();
        let compact: Vec<String> = sample
            .iter()
            .map(|p| format!("{}|{}|{}", p.level, p.a.entity_id, p.b.entity_id))
            .collect();
        let golden_path = corpus_path("toy6_sample_total5_seed42.golden.json");
        let golden: Vec<String> =
            serde_json::from_str(&std::fs::read_to_string(golden_path).unwrap()).unwrap();
        assert_eq!(compact, golden);
    }

    #[test]
    fn oversampling_fails_on_the_first_insufficient_level() {
        let entities = toy_entities();
        let err = stratified_pair_sample(&entities, 50, 42).unwrap_err();
        match err {
            Error::InsufficientPairs {
                level,
                needed,
                available,
            } => {
                assert_eq!(level, 1);
                assert_eq!(needed, 10);
                assert_eq!(available, 9);
            }
            other => panic!("expected InsufficientPairs, got {other:?}"),
        }
    }

    #[test]
    fn thirty_entity_corpus_supports_a_twenty_pair_build() {
        let entities = load_entities(&corpus_path("entities_sample30.jsonl"))
            .unwrap()
            .entities;
        let sample = stratified_pair_sample(&entities, 20, 7).unwrap();
        assert_eq!(sample.len(), 20);
        let mut per_level = [0usize; 3];
        for pair in &sample {
            per_level[(pair.level - 1) as usize] += 1;
            assert!(pair.level_invariant_holds());
        }
        assert_eq!(per_level, [4, 8, 8]);
    }

    fn teacher_gateway(lines: &[String]) -> Gateway {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.jsonl");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        std::mem::forget(dir);
        Gateway::new(
            vec![BackendProfile::scripted("teacher-main", Role::Teacher)],
            GatewayOptions {
                fixtures_path: Some(path),
                ..GatewayOptions::default()
            },
        )
        .unwrap()
    }

    fn toy_pair(level: u8, a: usize, b: usize) -> EntityPair {
        let entities = toy_entities();
        EntityPair {
            a: entities[a].clone(),
            b: entities[b].clone(),
            level,
        }
    }

    #[test]
    fn simulation_prompt_echoes_fixture_and_omits_empty_blocks() {
        let mut entity = toy_entities()[0].clone();
        entity.alt_text = String::new();
        let gw = teacher_gateway(&[
            r#"{"profile":"teacher-main","match":{"contains":"Panthera leo"},"response":"SUBJECT: a large tawny cat\nGLOBAL: adult male with full mane\nLOCAL: rounded ears, heavy forequarters"}"#.to_string(),
        ]);
        let pack = PromptPack::default();
        let text = simulate_description(&entity, "teacher-main", &gw, &pack).unwrap();
        assert!(text.starts_with("SUBJECT: a large tawny cat"));

        // The prompt itself must skip the ALT header when alt_text is empty.
        let mut prompt = pack.simulate.trim_end().to_string();
        prompt.push_str("\n\nENTITY:\n");
        prompt.push_str(&entity.name);
        prompt.push_str(&format!("\n\nREFERENCE:\n{}", entity.reference_text));
        prompt.push_str(&format!("\n\nATTRIBUTION:\n{}", entity.attribution));
        prompt.push('\n');
        let direct = gw.complete(&CompletionRequest::new("teacher-main", prompt.clone())).unwrap();
        assert_eq!(direct.text, text, "prompt construction matches");
        assert!(!prompt.contains("ALT:"));
    }

    #[test]
    fn teacher_instruction_is_validated_with_one_retry() {
        let pair = toy_pair(2, 0, 1);
        // Plain prompt → prose (invalid); retry prompt → valid template.
        let gw = teacher_gateway(&[
            r#"{"profile":"teacher-main","match":{"contains":"Respond with exactly one template instruction line."},"response":"Retrieve morphological profiles for Panthera leo and Felis catus, focusing on overall build."}"#.to_string(),
            r#"{"profile":"teacher-main","match":{"contains":"CANDIDATES:"},"response":"You should look up how lions differ from cats."}"#.to_string(),
        ]);
        let pack = PromptPack::default();
        let outcome =
            generate_instruction(&pair, "SUBJECT: a cat", &default_question(&pair), "teacher-main", &gw, &pack)
                .unwrap();
        match outcome {
            InstructionOutcome::Accepted(record) => {
                assert_eq!(
                    record.instruction,
                    "Retrieve morphological profiles for Panthera leo and Felis catus, focusing on overall build."
                );
                assert_eq!(record.candidates.0, "Panthera leo");
                assert!(!record.human_verified);
            }
            other => panic!("expected acceptance, got {other:?}"),
        }
        assert_eq!(gw.stats("teacher-main").unwrap().invocations, 2);
    }

    #[test]
    fn twice_invalid_teacher_output_drops_the_record() {
        let pair = toy_pair(2, 0, 1);
        let gw = teacher_gateway(&[
            r#"{"profile":"teacher-main","match":{"contains":""},"response":"No template here."}"#.to_string(),
        ]);
        let pack = PromptPack::default();
        let outcome =
            generate_instruction(&pair, "SUBJECT: a cat", &default_question(&pair), "teacher-main", &gw, &pack)
                .unwrap();
        match outcome {
            InstructionOutcome::Dropped { pair_ids, reason } => {
                assert_eq!(pair_ids, ("toy-01".to_string(), "toy-02".to_string()));
                assert!(!reason.is_empty());
            }
            other => panic!("expected drop, got {other:?}"),
        }
        assert_eq!(gw.stats("teacher-main").unwrap().invocations, 2);
    }

    #[test]
    fn symptom_template_is_also_a_legal_teacher_output() {
        let pair = toy_pair(1, 0, 3);
        let gw = teacher_gateway(&[
            r#"{"profile":"teacher-main","match":{"contains":"CANDIDATES:"},"response":"Retrieve symptom knowledge of Apple Scab on apple leaves."}"#.to_string(),
        ]);
        let pack = PromptPack::default();
        let outcome =
            generate_instruction(&pair, "SUBJECT: a leaf", &default_question(&pair), "teacher-main", &gw, &pack)
                .unwrap();
        assert!(matches!(outcome, InstructionOutcome::Accepted(_)));
    }

    fn record(level: u8, a: usize, b: usize, instruction: &str) -> InstructionRecord {
        let pair = toy_pair(level, a, b);
        InstructionRecord {
            question: default_question(&pair),
            candidates: (pair.a.name.clone(), pair.b.name.clone()),
            pair,
            simulated_description: "SUBJECT: something".into(),
            instruction: instruction.into(),
            human_verified: false,
        }
    }

    const VALID_G2: &str =
        "Retrieve morphological profiles for Alpha one and Beta two, focusing on plumage.";

    #[test]
    fn export_orders_levels_and_counts_them() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let records = vec![
            record(3, 2, 5, VALID_G2),
            record(1, 0, 3, VALID_G2),
            record(2, 0, 1, VALID_G2),
            record(1, 0, 4, VALID_G2),
        ];
        let summary = export_curriculum(&records, &path).unwrap();
        assert_eq!(summary.per_level, [2, 1, 1]);
        assert_eq!(summary.total, 4);
        assert_eq!(summary.human_verified, 0);
        let rows = load_export(&path).unwrap();
        let levels: Vec<u8> = rows.iter().map(|r| r.level).collect();
        assert_eq!(levels, [1, 1, 2, 3], "nondecreasing curriculum order");
        assert!(rows[0].input.contains("DESCRIPTION:"));
        assert!(rows[0].input.contains("QUESTION:"));
        assert_eq!(rows[0].target, VALID_G2);
    }

    #[test]
    fn export_refuses_invalid_instructions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let records = vec![record(1, 0, 3, "free prose, not a template")];
        assert!(matches!(
            export_curriculum(&records, &path),
            Err(Error::InvalidInstruction(_))
        ));
    }

    #[test]
    fn re_export_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(2, 0, 1, VALID_G2), record(1, 0, 3, VALID_G2)];
        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        export_curriculum(&records, &path_a).unwrap();
        export_curriculum(&records, &path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );
    }

    #[test]
    fn review_worksheet_samples_only_fine_pairs_with_clamping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let records = vec![
            record(1, 0, 3, VALID_G2),
            record(3, 2, 5, VALID_G2),
            record(3, 1, 4, VALID_G2),
        ];
        export_curriculum(&records, &path).unwrap();
        let rows = load_export(&path).unwrap();
        let worksheet = sample_review_worksheet(&rows, 50, 9);
        assert_eq!(worksheet.len(), 2, "clamped to available level-3 rows");
        assert!(worksheet.iter().all(|r| r.verified.is_none()));
        let again = sample_review_worksheet(&rows, 50, 9);
        assert_eq!(worksheet, again, "seeded sampling is stable");
    }

    #[test]
    fn applied_reviews_flip_the_verified_flag() {
        let mut records = vec![record(3, 2, 5, VALID_G2), record(3, 1, 4, VALID_G2)];
        let review = ReviewRow {
            pair_a: records[0].pair.a.entity_id.clone(),
            pair_b: records[0].pair.b.entity_id.clone(),
            input: String::new(),
            instruction: VALID_G2.into(),
            verified: Some(true),
        };
        let unreviewed = ReviewRow {
            pair_a: records[1].pair.a.entity_id.clone(),
            pair_b: records[1].pair.b.entity_id.clone(),
            input: String::new(),
            instruction: VALID_G2.into(),
            verified: Some(false),
        };
        let changed = apply_review(&mut records, &[review, unreviewed]);
        assert_eq!(changed, 1);
        assert!(records[0].human_verified);
        assert!(!records[1].human_verified);
    }

    #[test]
    fn full_build_collects_records_and_drop_warnings() {
        let entities = toy_entities();
        // One teacher fixture serves simulation (matched by ENTITY:) and
        // another serves instructions (matched by CANDIDATES:); a third
        // makes one specific pair fail twice so it drops.
        let gw = teacher_gateway(&[
            r#"{"profile":"teacher-main","match":{"contains":"ENTITY:"},"response":"SUBJECT: an animal\nGLOBAL: adult in natural habitat\nLOCAL: distinctive pelage"}"#.to_string(),
            r#"{"profile":"teacher-main","match":{"contains":"Lynx lynx or Nyctereutes procyonoides"},"response":"prose that never validates"}"#.to_string(),
            r#"{"profile":"teacher-main","match":{"contains":"CANDIDATES:"},"response":"Retrieve morphological profiles for Alpha one and Beta two, focusing on pelage."}"#.to_string(),
        ]);
        let pack = PromptPack::default();
        let output = build_dataset(&entities, 5, 42, "teacher-main", &gw, &pack, 4).unwrap();
        assert_eq!(output.records.len() + output.warnings.len(), 5);
        for record in &output.records {
            assert!(validate_instruction_template(&record.instruction).accepted);
        }
        for warning in &output.warnings {
            assert!(warning.contains("dropped"));
        }
    }
}

