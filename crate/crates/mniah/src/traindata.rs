//! Fine-tuning dataset construction from two-round retrieve/reason traces.
//!
//! For each training item the four round-1/round-2 responses are composed
//! into a transcript, rewritten into natural prose by a rewriter endpoint
//! (three independent samples per item), and paired with a fresh
//! 4,096-token context. Trainer hyperparameters are recorded as metadata
//! in the emitted files; running the training itself is out of scope.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::corpus::{FillerCorpus, SourceQaItem};
use crate::error::{Classify, ErrorClass};
use crate::fourr::IterationTrace;
use crate::llm::{ChatMessage, DecodingConfig, LlmClient, LlmError};
use crate::prompts;
use crate::taskgen::{self, TaskGenError};
use crate::tokenizer::Tokenizer;

/// Context length every training example is extended to.
pub const TRAIN_CONTEXT_TOKENS: usize = 4096;
/// Independent rewrite samples requested per item.
pub const REWRITES_PER_ITEM: u32 = 3;

/// Trainer settings recorded in emitted manifests for downstream use.
pub fn trainer_metadata() -> serde_json::Value {
    serde_json::json!({
        "batch_size": 2,
        "learning_rate": 1e-5,
        "warmup_ratio": 0.03,
        "scheduler": "cosine",
        "epochs": 2,
    })
}

/// Rewriter decoding: sampled, temperature 1, 512 new tokens per call.
pub fn rewriter_decoding() -> DecodingConfig {
    DecodingConfig::sample(1.0, 1.0, 512, 1)
}

#[derive(Debug, Error)]
pub enum TrainDataError {
    #[error("trace for {item_id} has K={k}, need at least 2 rounds")]
    NotEnoughRounds { item_id: String, k: u32 },
    #[error("split of {train_n}+{test_n} exceeds the {available} available ids")]
    SplitTooLarge {
        train_n: usize,
        test_n: usize,
        available: usize,
    },
    #[error("item {0}: every rewrite failed to parse")]
    AllRewritesFailed(String),
    #[error("item {0} has no trace")]
    MissingTrace(String),
    #[error("item {0} is not in the items set")]
    MissingItem(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error("cannot write {path}: {detail}")]
    WriteFailed { path: PathBuf, detail: String },
    #[error("cannot read {path}: {detail}")]
    ReadFailed { path: PathBuf, detail: String },
}

impl Classify for TrainDataError {
    fn class(&self) -> ErrorClass {
        match self {
            TrainDataError::Llm(e) => e.class(),
            TrainDataError::TaskGen(e) => e.class(),
            TrainDataError::WriteFailed { .. } => ErrorClass::Other,
            TrainDataError::ReadFailed { .. } => ErrorClass::Ingestion,
            _ => ErrorClass::Validation,
        }
    }
}

/// The four responses of a two-round trace: both retrievals (rendered as
/// numbered items) and both reasoned answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FourResponses {
    pub first_evidence: String,
    pub first_answer: String,
    pub second_evidence: String,
    pub second_answer: String,
}

/// Maps rounds 1–2 of a trace onto the four response fields; later rounds
/// are ignored.
pub fn extract_four(trace: &IterationTrace) -> Result<FourResponses, TrainDataError> {
    if trace.rounds.len() < 2 {
        return Err(TrainDataError::NotEnoughRounds {
            item_id: trace.item_id.clone(),
            k: trace.k,
        });
    }
    let render = |items: &[String]| {
        items
            .iter()
            .enumerate()
            .map(|(i, item)| format!("{}. {}", i + 1, item))
            .collect::<Vec<_>>()
            .join("\n")
    };
    Ok(FourResponses {
        first_evidence: render(&trace.rounds[0].evidence_new),
        first_answer: trace.rounds[0].answer.clone(),
        second_evidence: render(&trace.rounds[1].evidence_new),
        second_answer: trace.rounds[1].answer.clone(),
    })
}

/// Composes the rewrite input transcript in the four labeled stages.
pub fn compose_thought_process(four: &FourResponses) -> String {
    format!(
        "1R (Retrieve):\n{}\n2R (Reason):\n{}\n3R (Retrieve again):\n{}\n4R (Reason):\n{}",
        four.first_evidence, four.first_answer, four.second_evidence, four.second_answer
    )
}

fn parse_natural_reasoning(response: &str) -> Option<String> {
    // Accept a fenced or bare JSON object anywhere in the response.
    let start = response.find('{')?;
    let end = response.rfind('}')?;
    if end <= start {
        return None;
    }
    let value: serde_json::Value = serde_json::from_str(&response[start..=end]).ok()?;
    value
        .get("NaturalReasoning")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .filter(|s| !s.trim().is_empty())
}

/// Requests three independent rewrites of the transcript and parses the
/// structured field from each. Unparsable rewrites are dropped (returned
/// in the drop list); zero parses is an item-level failure.
pub fn rewrite_natural(
    client: &LlmClient,
    rewriter_endpoint: &str,
    four: &FourResponses,
    question: &str,
) -> Result<(Vec<String>, Vec<String>), TrainDataError> {
    let prompt = prompts::rewrite_natural(&compose_thought_process(four), question);
    let mut rewrites = Vec::new();
    let mut drops = Vec::new();
    for i in 0..REWRITES_PER_ITEM {
        let record = client.chat_tagged(
            rewriter_endpoint,
            vec![ChatMessage::user(prompt.clone())],
            rewriter_decoding(),
            &format!("rewrite/{i}"),
        )?;
        match parse_natural_reasoning(record.first_completion()) {
            Some(text) => rewrites.push(text),
            None => drops.push(format!("rewrite {i}: unparsable structured output")),
        }
    }
    if rewrites.is_empty() {
        return Err(TrainDataError::AllRewritesFailed(question.to_string()));
    }
    Ok((rewrites, drops))
}

/// Builds the 4,096-token context for one item (even-random placement,
/// seed derived from the run seed and item id).
pub fn extend_context(
    tokenizer: &Tokenizer,
    item: &SourceQaItem,
    filler: &FillerCorpus,
    seed: u64,
) -> Result<String, TaskGenError> {
    let instance =
        taskgen::build_even_random(tokenizer, item, filler, TRAIN_CONTEXT_TOKENS, seed)?;
    Ok(instance.context)
}

/// Derives a stable per-item seed from the run seed.
pub fn item_seed(run_seed: u64, item_id: &str) -> u64 {
    crate::runstore::derive_seed(run_seed, &["traindata", item_id])
}

/// Seeded shuffle then prefix split into disjoint train/test id lists.
pub fn split_train_test(
    ids: &[String],
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), TrainDataError> {
    if train_n + test_n > ids.len() {
        return Err(TrainDataError::SplitTooLarge {
            train_n,
            test_n,
            available: ids.len(),
        });
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let train = shuffled[..train_n].to_vec();
    let test = shuffled[train_n..train_n + test_n].to_vec();
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStyle {
    /// Natural-prose reasoning ending in an answer line.
    NaturalThinking,
    /// The gold answer alone (the direct-answer baseline).
    DirectAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub tokenizer_profile: String,
    pub rewriter_endpoint: String,
    pub style: TargetStyle,
}

/// One trainer-ready example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingExample {
    pub item_id: String,
    pub rewrite_index: u32,
    pub input_context: String,
    pub question: String,
    pub target: String,
    pub metadata: ExampleMeta,
}

/// On-disk record shape: the rendered prompt messages plus the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub kind: String,
    pub item_id: String,
    pub rewrite_index: u32,
    pub messages: Vec<ChatMessage>,
    pub target: String,
    pub metadata: ExampleMeta,
}

impl TrainingExample {
    pub fn to_record(&self) -> TrainingRecord {
        TrainingRecord {
            kind: "example".into(),
            item_id: self.item_id.clone(),
            rewrite_index: self.rewrite_index,
            messages: vec![ChatMessage::user(prompts::answer_with_context(
                &self.input_context,
                &self.question,
            ))],
            target: self.target.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

/// Output of the example-construction pipeline.
pub struct BuiltExamples {
    pub examples: Vec<TrainingExample>,
    /// One entry per dropped rewrite: (item id, reason).
    pub drops: Vec<(String, String)>,
}

/// Builds training examples for the given item ids: extracts the four
/// responses from each item's trace, rewrites them, extends the context
/// and assembles one example per retained rewrite. The direct-answer style
/// skips the rewriter and emits one example per item with the gold answer
/// as target.
#[allow(clippy::too_many_arguments)]
pub fn build_examples(
    client: &LlmClient,
    rewriter_endpoint: &str,
    tokenizer: &Tokenizer,
    items_by_id: &BTreeMap<String, SourceQaItem>,
    traces_by_id: &BTreeMap<String, IterationTrace>,
    filler: &FillerCorpus,
    ids: &[String],
    run_seed: u64,
    style: TargetStyle,
) -> Result<BuiltExamples, TrainDataError> {
    let mut examples = Vec::new();
    let mut drops = Vec::new();
    for id in ids {
        let item = items_by_id
            .get(id)
            .ok_or_else(|| TrainDataError::MissingItem(id.clone()))?;
        let context = extend_context(tokenizer, item, filler, item_seed(run_seed, id))?;
        let meta = ExampleMeta {
            tokenizer_profile: tokenizer.profile_name().to_string(),
            rewriter_endpoint: rewriter_endpoint.to_string(),
            style,
        };
        match style {
            TargetStyle::DirectAnswer => {
                examples.push(TrainingExample {
                    item_id: id.clone(),
                    rewrite_index: 0,
                    input_context: context,
                    question: item.question.clone(),
                    target: item.gold_answer.clone(),
                    metadata: meta,
                });
            }
            TargetStyle::NaturalThinking => {
                let trace = traces_by_id
                    .get(id)
                    .ok_or_else(|| TrainDataError::MissingTrace(id.clone()))?;
                let four = extract_four(trace)?;
                let (rewrites, item_drops) =
                    rewrite_natural(client, rewriter_endpoint, &four, &item.question)?;
                for reason in item_drops {
                    drops.push((id.clone(), reason));
                }
                for (i, rewrite) in rewrites.into_iter().enumerate() {
                    examples.push(TrainingExample {
                        item_id: id.clone(),
                        rewrite_index: i as u32,
                        input_context: context.clone(),
                        question: item.question.clone(),
                        // The target ends in an extractable answer line.
                        target: format!("{rewrite}\nAnswer: {}", four.second_answer),
                        metadata: meta.clone(),
                    });
                }
            }
        }
    }
    Ok(BuiltExamples { examples, drops })
}

// ---------------------------------------------------------------------------
// File emission
// ---------------------------------------------------------------------------

/// Writes the manifest line followed by one record per example. The file
/// appears atomically: a failed write leaves nothing behind.
pub fn emit_training_file(
    path: &Path,
    manifest: &serde_json::Value,
    examples: &[TrainingExample],
) -> Result<usize, TrainDataError> {
    let records: Vec<serde_json::Value> = examples
        .iter()
        .map(|e| serde_json::to_value(e.to_record()).expect("record serializes"))
        .collect();
    emit_jsonl(path, manifest, &records)?;
    Ok(examples.len())
}

/// Test-split record: the rendered prompt plus the gold answer, no target.
pub fn emit_test_file(
    path: &Path,
    manifest: &serde_json::Value,
    units: &[(String, String, String, String)], // (item_id, context, question, gold)
) -> Result<usize, TrainDataError> {
    let records: Vec<serde_json::Value> = units
        .iter()
        .map(|(id, context, question, gold)| {
            serde_json::json!({
                "kind": "test_item",
                "item_id": id,
                "messages": [ChatMessage::user(prompts::answer_with_context(context, question))],
                "gold_answer": gold,
            })
        })
        .collect();
    emit_jsonl(path, manifest, &records)?;
    Ok(units.len())
}

fn emit_jsonl(
    path: &Path,
    manifest: &serde_json::Value,
    records: &[serde_json::Value],
) -> Result<(), TrainDataError> {
    use std::io::Write;
    let fail = |detail: String| TrainDataError::WriteFailed {
        path: path.to_path_buf(),
        detail,
    };
    let tmp = path.with_extension("jsonl.tmp");
    let write_all = || -> std::io::Result<()> {
        let mut file = std::fs::File::create(&tmp)?;
        writeln!(file, "{}", serde_json::to_string(manifest).expect("manifest serializes"))?;
        for record in records {
            writeln!(file, "{}", serde_json::to_string(record).expect("record serializes"))?;
        }
        file.sync_all()
    };
    if let Err(e) = write_all() {
        let _ = std::fs::remove_file(&tmp);
        return Err(fail(e.to_string()));
    }
    std::fs::rename(&tmp, path).map_err(|e| fail(e.to_string()))
}

/// Reads back a training file: the manifest line plus all example records.
pub fn read_training_file(
    path: &Path,
) -> Result<(serde_json::Value, Vec<TrainingRecord>), TrainDataError> {
    use std::io::BufRead;
    let fail = |detail: String| TrainDataError::ReadFailed {
        path: path.to_path_buf(),
        detail,
    };
    let file = std::fs::File::open(path).map_err(|e| fail(e.to_string()))?;
    let mut manifest = serde_json::Value::Null;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| fail(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("manifest") {
            manifest = value;
        } else {
            records.push(serde_json::from_value(value).map_err(|e| fail(e.to_string()))?);
        }
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::fourr::{IterationTrace, RoundRecord};
    use crate::llm::mock::{offline_model, ScriptedTransport};
    use crate::llm::{ChatResponse, ModelEndpoint, RetryPolicy};
    use crate::runstore::RunStore;
    use std::sync::Arc;

    fn fake_trace(item_id: &str, k: u32) -> IterationTrace {
        let round = |n: u32| RoundRecord {
            round: n,
            evidence_new: vec![format!("fact {n}a"), format!("fact {n}b")],
            evidence_flagged: false,
            below_minimum: true,
            answer: format!("answer-{n}"),
            answer_flagged: false,
            verdict: crate::evaluation::parse_verdict("Assessment result: 1"),
        };
        IterationTrace {
            item_id: item_id.into(),
            k,
            rounds: (1..=k).map(round).collect(),
        }
    }

    #[test]
    fn extract_four_maps_first_two_rounds() {
        let four = extract_four(&fake_trace("x", 2)).unwrap();
        assert_eq!(four.first_evidence, "1. fact 1a\n2. fact 1b");
        assert_eq!(four.first_answer, "answer-1");
        assert_eq!(four.second_answer, "answer-2");
    }

    #[test]
    fn extract_four_ignores_later_rounds() {
        let four = extract_four(&fake_trace("x", 5)).unwrap();
        assert_eq!(four.second_evidence, "1. fact 2a\n2. fact 2b");
        assert!(!compose_thought_process(&four).contains("fact 3a"));
    }

    #[test]
    fn extract_four_rejects_single_round() {
        let err = extract_four(&fake_trace("x", 1)).unwrap_err();
        assert!(matches!(err, TrainDataError::NotEnoughRounds { k: 1, .. }));
    }

    fn rewriter_client(transport: Arc<dyn crate::llm::Transport>) -> (tempfile::TempDir, LlmClient) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(RunStore::open(dir.path().join("store"), "cfg").unwrap());
        let mut client = LlmClient::new(store).with_retry(RetryPolicy::immediate());
        client.register(
            ModelEndpoint {
                name: "rw".into(),
                base_url: "mock:".into(),
                model_id: "offline".into(),
                auth_env: None,
            },
            transport,
            2,
        );
        (dir, client)
    }

    #[test]
    fn rewrite_returns_three_distinct_targets() {
        let (_d, client) = rewriter_client(Arc::new(offline_model()));
        let four = extract_four(&fake_trace("x", 2)).unwrap();
        let (rewrites, drops) = rewrite_natural(&client, "rw", &four, "q?").unwrap();
        assert_eq!(rewrites.len(), 3);
        assert!(drops.is_empty());
        assert_ne!(rewrites[0], rewrites[1]);
    }

    #[test]
    fn malformed_rewrite_is_dropped_not_fatal() {
        let scripted = ScriptedTransport::new(|req| {
            if req.tag == "rewrite/1" {
                Ok(ChatResponse::single("no json here"))
            } else {
                Ok(ChatResponse::single(
                    "```json\n{\"NaturalReasoning\": \"fine\"}\n```",
                ))
            }
        });
        let (_d, client) = rewriter_client(Arc::new(scripted));
        let four = extract_four(&fake_trace("x", 2)).unwrap();
        let (rewrites, drops) = rewrite_natural(&client, "rw", &four, "q?").unwrap();
        assert_eq!(rewrites.len(), 2);
        assert_eq!(drops.len(), 1);
    }

    #[test]
    fn all_rewrites_failing_is_item_failure() {
        let scripted = ScriptedTransport::new(|_| Ok(ChatResponse::single("garbage")));
        let (_d, client) = rewriter_client(Arc::new(scripted));
        let four = extract_four(&fake_trace("x", 2)).unwrap();
        assert!(matches!(
            rewrite_natural(&client, "rw", &four, "q?"),
            Err(TrainDataError::AllRewritesFailed(_))
        ));
    }

    #[test]
    fn rewrite_prompt_carries_forbidden_phrase_rules() {
        let (_d, client) = rewriter_client(Arc::new(offline_model()));
        let four = extract_four(&fake_trace("x", 2)).unwrap();
        rewrite_natural(&client, "rw", &four, "q?").unwrap();
        // Inspect the persisted call.
        let calls: Vec<_> = client
            .store()
            .scan(crate::runstore::RecordKind::Call)
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(calls.len(), 3);
        let payload = &calls[0].payload["record"]["messages"][0]["content"];
        let prompt = payload.as_str().unwrap();
        assert!(prompt.contains("Don't use the phrase \"I remember\""));
        assert!(prompt.contains("1R (Retrieve):"));
    }

    #[test]
    fn extended_context_hits_4096_and_keeps_needles() {
        let tok = Tokenizer::builtin();
        let items = fixtures::qa_items(2, 13);
        let filler = fixtures::filler_corpus(6000, 13);
        let ctx = extend_context(&tok, &items[0], &filler, 77).unwrap();
        assert_eq!(tok.count_tokens(&ctx), TRAIN_CONTEXT_TOKENS);
        for needle in &items[0].needles {
            assert_eq!(ctx.matches(&needle.rendered()).count(), 1);
        }
        let again = extend_context(&tok, &items[0], &filler, 77).unwrap();
        assert_eq!(ctx, again);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ids: Vec<String> = (0..594).map(|i| format!("id-{i:04}")).collect();
        let (train_a, test_a) = split_train_test(&ids, 416, 178, 6).unwrap();
        let (train_b, test_b) = split_train_test(&ids, 416, 178, 6).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        assert_eq!(train_a.len(), 416);
        assert_eq!(test_a.len(), 178);
        let overlap = train_a.iter().filter(|id| test_a.contains(id)).count();
        assert_eq!(overlap, 0);
    }

    #[test]
    fn split_rejects_oversized_request()  {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        assert!(split_train_test(&ids, 8, 3, 1).is_err());
        let (train, test) = split_train_test(&ids, 0, 4, 1).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn emitted_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let tok = Tokenizer::builtin();
        let items = fixtures::qa_items(2, 29);
        let filler = fixtures::filler_corpus(6000, 29);
        let examples: Vec<TrainingExample> = items
            .iter()
            .map(|item| TrainingExample {
                item_id: item.id.clone(),
                rewrite_index: 0,
                input_context: extend_context(&tok, item, &filler, 1).unwrap(),
                question: item.question.clone(),
                target: "thought\nAnswer: x".into(),
                metadata: ExampleMeta {
                    tokenizer_profile: tok.profile_name().into(),
                    rewriter_endpoint: "rw".into(),
                    style: TargetStyle::NaturalThinking,
                },
            })
            .collect();
        let manifest = serde_json::json!({"kind": "manifest", "trainer": trainer_metadata()});
        let written = emit_training_file(&path, &manifest, &examples).unwrap();
        assert_eq!(written, 2);

        let (manifest_back, records) = read_training_file(&path).unwrap();
        assert_eq!(manifest_back["trainer"]["batch_size"], 2);
        assert_eq!(records.len(), 2);
        let expected: Vec<TrainingRecord> = examples.iter().map(|e| e.to_record()).collect();
        assert_eq!(records, expected);
    }

    #[test]
    fn empty_input_yields_header_only_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let manifest = serde_json::json!({"kind": "manifest"});
        let written = emit_training_file(&path, &manifest, &[]).unwrap();
        assert_eq!(written, 0);
        let (m, records) = read_training_file(&path).unwrap();
        assert_eq!(m["kind"], "manifest");
        assert!(records.is_empty());
    }

    #[test]
    fn pipeline_emits_three_records_per_item() {
        let tok = Tokenizer::builtin();
        let items = fixtures::qa_items(4, 41);
        let filler = fixtures::filler_corpus(6000, 41);
        let items_by_id: BTreeMap<String, SourceQaItem> =
            items.iter().map(|i| (i.id.clone(), i.clone())).collect();
        let traces_by_id: BTreeMap<String, IterationTrace> = items
            .iter()
            .map(|i| (i.id.clone(), fake_trace(&i.id, 2)))
            .collect();
        let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
        let (_d, client) = rewriter_client(Arc::new(offline_model()));
        let built = build_examples(
            &client,
            "rw",
            &tok,
            &items_by_id,
            &traces_by_id,
            &filler,
            &ids,
            3,
            TargetStyle::NaturalThinking,
        )
        .unwrap();
        assert_eq!(built.examples.len(), 12);
        assert!(built.drops.is_empty());
        for e in &built.examples {
            assert!(e.target.contains("\nAnswer: answer-2"));
            let item = &items_by_id[&e.item_id];
            for needle in &item.needles {
                assert!(e.input_context.contains(&needle.rendered()));
            }
        }

        let direct = build_examples(
            &client,
            "rw",
            &tok,
            &items_by_id,
            &traces_by_id,
            &filler,
            &ids,
            3,
            TargetStyle::DirectAnswer,
        )
        .unwrap();
        assert_eq!(direct.examples.len(), 4);
        for e in &direct.examples {
            assert_eq!(e.target, items_by_id[&e.item_id].gold_answer);
        }
    }
}
