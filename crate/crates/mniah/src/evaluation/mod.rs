//! Grading, filtering and aggregation.
//!
//! Correctness of free-form answers is decided by a judge model emitting a
//! binary verdict line. Items a model can answer without any context are
//! filtered out by pairing a closed-book probe with an open-book probe and
//! keeping only items answered correctly with the passages but not
//! without. Verdicts that cannot be parsed stay failed — they are never
//! defaulted — and judged accuracy excludes them from both numerator and
//! denominator.

pub mod report;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::corpus::SourceQaItem;
use crate::error::{Classify, ErrorClass};
use crate::llm::{preset, ChatMessage, LlmClient, LlmError, Preset};
use crate::prompts;
use crate::runstore::{digest, RecordKind};
use crate::taskgen::TaskInstance;
use crate::tokenizer::Tokenizer;
pub use report::{ConditionAxis, ConditionRow, ReportMeta, RunReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("invalid input: {0}")]
    Validation(String),
}

impl Classify for EvalError {
    fn class(&self) -> ErrorClass {
        match self {
            EvalError::Llm(e) => e.class(),
            EvalError::Validation(_) => ErrorClass::Validation,
        }
    }
}

// ---------------------------------------------------------------------------
// Judge
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Recovered,
    Failed,
}

/// Outcome of one judge call. `correct` is absent exactly when parsing
/// failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub correct: Option<bool>,
    pub raw: String,
    pub parse_status: ParseStatus,
}

impl JudgeVerdict {
    pub fn is_correct(&self) -> bool {
        self.correct == Some(true)
    }
}

/// Parses a judge response. Clean means the whole response is exactly the
/// requested verdict line. Recovery accepts the last standalone 0/1 after
/// the last literal "Assessment result"; anything else fails closed.
pub fn parse_verdict(raw: &str) -> JudgeVerdict {
    let trimmed = raw.trim();
    for (literal, value) in [("Assessment result: 0", false), ("Assessment result: 1", true)] {
        if trimmed == literal {
            return JudgeVerdict {
                correct: Some(value),
                raw: raw.to_string(),
                parse_status: ParseStatus::Clean,
            };
        }
    }
    if let Some(marker) = raw.rfind(prompts::ASSESSMENT_MARKER) {
        let tail = &raw[marker + prompts::ASSESSMENT_MARKER.len()..];
        let bytes = tail.as_bytes();
        let mut found: Option<bool> = None;
        for (i, &b) in bytes.iter().enumerate() {
            if b != b'0' && b != b'1' {
                continue;
            }
            let prev_ok = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
            let next_ok = i + 1 >= bytes.len() || !bytes[i + 1].is_ascii_alphanumeric();
            if prev_ok && next_ok {
                found = Some(b == b'1');
            }
        }
        if let Some(value) = found {
            return JudgeVerdict {
                correct: Some(value),
                raw: raw.to_string(),
                parse_status: ParseStatus::Recovered,
            };
        }
    }
    JudgeVerdict {
        correct: None,
        raw: raw.to_string(),
        parse_status: ParseStatus::Failed,
    }
}

/// Renders the judge template, queries the judge endpoint and parses the
/// verdict. Unparsable output yields a failed verdict, not an error.
pub fn judge(
    client: &LlmClient,
    judge_endpoint: &str,
    question: &str,
    gold_answer: &str,
    model_answer: &str,
) -> Result<JudgeVerdict, EvalError> {
    let prompt = prompts::judge(question, model_answer, gold_answer);
    let record = client.chat(judge_endpoint, vec![ChatMessage::user(prompt)], preset(Preset::Judge))?;
    Ok(parse_verdict(record.first_completion()))
}

// ---------------------------------------------------------------------------
// Memory-answer filtering
// ---------------------------------------------------------------------------

/// Per-item filtering outcome; `kept` holds exactly when the item was
/// answered correctly open-book and incorrectly closed-book.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub item_id: String,
    pub closed_book_correct: bool,
    pub open_book_correct: bool,
    pub kept: bool,
}

/// Asks the bare question with no context and judges the answer.
pub fn closed_book_probe(
    client: &LlmClient,
    endpoint: &str,
    judge_endpoint: &str,
    item: &SourceQaItem,
) -> Result<(String, JudgeVerdict), EvalError> {
    let prompt = prompts::closed_book(&item.question);
    let record = client.chat(endpoint, vec![ChatMessage::user(prompt)], preset(Preset::AnswerShort))?;
    let answer = record.first_completion().to_string();
    let verdict = judge(client, judge_endpoint, &item.question, &item.gold_answer, &answer)?;
    Ok((answer, verdict))
}

/// Asks the question over the item's ten passages alone (no filler), in
/// seeded-random order, and judges the answer.
pub fn open_book_probe(
    client: &LlmClient,
    endpoint: &str,
    judge_endpoint: &str,
    item: &SourceQaItem,
    seed: u64,
) -> Result<(String, JudgeVerdict), EvalError> {
    let mut passages: Vec<String> = item.passages().map(|p| p.rendered()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    passages.shuffle(&mut rng);
    let context = passages.join("\n");
    let prompt = prompts::answer_with_context(&context, &item.question);
    let record = client.chat(endpoint, vec![ChatMessage::user(prompt)], preset(Preset::AnswerShort))?;
    let answer = record.first_completion().to_string();
    let verdict = judge(client, judge_endpoint, &item.question, &item.gold_answer, &answer)?;
    Ok((answer, verdict))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept_ids: Vec<String>,
    pub outcomes: Vec<FilterOutcome>,
    /// Items whose closed- or open-book verdict failed to parse; excluded
    /// from `kept` and from `outcomes`.
    pub failed_items: Vec<String>,
}

/// Runs both probes over every item and keeps those answered correctly
/// open-book but not closed-book. Items parallelize; output order follows
/// input order.
pub fn filter_items(
    client: &LlmClient,
    endpoint: &str,
    judge_endpoint: &str,
    items: &[SourceQaItem],
    seed: u64,
) -> Result<FilterReport, EvalError> {
    type Probed = Result<(String, Option<(bool, bool)>), EvalError>;
    let probed: Vec<Probed> = items
        .par_iter()
        .map(|item| {
            let (_, cb) = closed_book_probe(client, endpoint, judge_endpoint, item)?;
            let (_, ob) = open_book_probe(client, endpoint, judge_endpoint, item, seed)?;
            let pair = match (cb.correct, ob.correct) {
                (Some(c), Some(o)) => Some((c, o)),
                _ => None,
            };
            Ok((item.id.clone(), pair))
        })
        .collect();

    let mut outcomes = Vec::new();
    let mut failed_items = Vec::new();
    let mut kept_ids = Vec::new();
    for result in probed {
        let (item_id, pair) = result?;
        match pair {
            Some((closed_book_correct, open_book_correct)) => {
                let kept = open_book_correct && !closed_book_correct;
                if kept {
                    kept_ids.push(item_id.clone());
                }
                outcomes.push(FilterOutcome {
                    item_id,
                    closed_book_correct,
                    open_book_correct,
                    kept,
                });
            }
            None => failed_items.push(item_id),
        }
    }
    Ok(FilterReport {
        kept_ids,
        outcomes,
        failed_items,
    })
}

/// Exact intersection of two or more kept-id sets.
pub fn intersect_filtered(sets: &[BTreeSet<String>]) -> Result<BTreeSet<String>, EvalError> {
    if sets.len() < 2 {
        return Err(EvalError::Validation(
            "intersection requires at least 2 sets".into(),
        ));
    }
    let mut iter = sets.iter();
    let mut acc = iter.next().unwrap().clone();
    for s in iter {
        acc = acc.intersection(s).cloned().collect();
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Evaluation runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Direct,
    Thinking,
}

/// One instance joined with its question and gold answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalUnit {
    pub instance: TaskInstance,
    pub question: String,
    pub gold_answer: String,
}

/// Token count of the reasoning span of a thinking-format response.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThinkingLength {
    pub tokens: usize,
    /// False when the markers were absent and the whole response was counted.
    pub extracted: bool,
}

/// Extracts the span between the thought and answer markers and counts its
/// tokens; with markers absent the whole response is counted and flagged.
pub fn thinking_length(response: &str, tokenizer: &Tokenizer) -> ThinkingLength {
    if let Some(start) = response.find(prompts::THOUGHT_MARKER) {
        let body = &response[start + prompts::THOUGHT_MARKER.len()..];
        if let Some(end) = body.rfind(prompts::ANSWER_MARKER) {
            return ThinkingLength {
                tokens: tokenizer.count_tokens(&body[..end]),
                extracted: true,
            };
        }
    }
    ThinkingLength {
        tokens: tokenizer.count_tokens(response),
        extracted: false,
    }
}

/// Final-answer extraction for thinking-format responses: text after the
/// last answer marker, or the whole response flagged when absent.
pub fn extract_final_answer(response: &str) -> (String, bool) {
    match response.rfind(prompts::ANSWER_MARKER) {
        Some(pos) => (
            response[pos + prompts::ANSWER_MARKER.len()..].trim().to_string(),
            true,
        ),
        None => (response.trim().to_string(), false),
    }
}

/// Unbiased single-sample success estimate: `correct_count / n_samples`.
pub fn pass_at_1(correct_count: u32, n_samples: u32) -> Result<f64, EvalError> {
    if n_samples < 1 {
        return Err(EvalError::Validation("n_samples must be >= 1".into()));
    }
    if correct_count > n_samples {
        return Err(EvalError::Validation(format!(
            "correct_count {correct_count} exceeds n_samples {n_samples}"
        )));
    }
    Ok(f64::from(correct_count) / f64::from(n_samples))
}

/// Per-item record persisted for later re-reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemOutcome {
    #[serde(rename = "type")]
    pub record_type: String,
    pub run: String,
    pub axis: ConditionAxis,
    pub condition: f64,
    pub item_id: String,
    pub correct: Option<bool>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinking_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinking_extracted: Option<bool>,
}

/// Everything a finished evaluation run produced.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: RunReport,
    pub outcomes: Vec<ItemOutcome>,
    pub thinking: Option<ThinkingStats>,
    /// Items that could not be completed, with the error text.
    pub incomplete: Vec<(String, String)>,
}

/// Per-condition thinking-length aggregates, correctness-conditioned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThinkingStats {
    pub tokenizer_profile: String,
    pub per_condition: Vec<ThinkingConditionStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThinkingConditionStats {
    pub condition: f64,
    pub n: usize,
    pub mean_tokens: f64,
    pub mean_tokens_correct: Option<f64>,
    pub mean_tokens_incorrect: Option<f64>,
}

fn condition_of(instance: &TaskInstance, axis: ConditionAxis) -> f64 {
    match axis {
        ConditionAxis::ContextLength => instance.spec.target_tokens as f64,
        ConditionAxis::Depth => instance.spec.first_depth_pct.unwrap_or(0.0),
        ConditionAxis::Gap => instance
            .spec
            .gap_tokens
            .or(instance.spec.needle_interval_tokens)
            .unwrap_or(0) as f64,
        ConditionAxis::Round => 0.0,
    }
}

/// Evaluates every unit under the given prompt mode, judges the answers and
/// aggregates accuracy along the condition axis. Transport failures are
/// recorded per item and leave the run incomplete rather than aborting it.
#[allow(clippy::too_many_arguments)]
pub fn run_eval(
    client: &LlmClient,
    endpoint: &str,
    judge_endpoint: &str,
    units: &[EvalUnit],
    mode: PromptMode,
    axis: ConditionAxis,
    tokenizer: &Tokenizer,
    run_label: &str,
) -> Result<EvalRun, EvalError> {
    struct ItemResult {
        outcome: Option<ItemOutcome>,
        error: Option<(String, String)>,
    }

    let results: Vec<ItemResult> = units
        .par_iter()
        .map(|unit| {
            let condition = condition_of(&unit.instance, axis);
            let run_one = || -> Result<ItemOutcome, EvalError> {
                let (prompt, decoding) = match mode {
                    PromptMode::Direct => (
                        prompts::answer_with_context(&unit.instance.context, &unit.question),
                        preset(Preset::AnswerShort),
                    ),
                    PromptMode::Thinking => (
                        prompts::answer_with_thinking(&unit.instance.context, &unit.question),
                        preset(Preset::Thinking),
                    ),
                };
                let record = client.chat(endpoint, vec![ChatMessage::user(prompt)], decoding)?;
                let response = record.first_completion().to_string();
                let (answer, thinking) = match mode {
                    PromptMode::Direct => (response.clone(), None),
                    PromptMode::Thinking => {
                        let (answer, _) = extract_final_answer(&response);
                        (answer, Some(thinking_length(&response, tokenizer)))
                    }
                };
                let verdict =
                    judge(client, judge_endpoint, &unit.question, &unit.gold_answer, &answer)?;
                Ok(ItemOutcome {
                    record_type: "item_outcome".into(),
                    run: run_label.to_string(),
                    axis,
                    condition,
                    item_id: unit.instance.item_id.clone(),
                    correct: verdict.correct,
                    answer,
                    thinking_tokens: thinking.map(|t| t.tokens),
                    thinking_extracted: thinking.map(|t| t.extracted),
                })
            };
            match run_one() {
                Ok(outcome) => ItemResult {
                    outcome: Some(outcome),
                    error: None,
                },
                Err(e) => ItemResult {
                    outcome: None,
                    error: Some((unit.instance.item_id.clone(), e.to_string())),
                },
            }
        })
        .collect();

    let mut outcomes = Vec::new();
    let mut incomplete = Vec::new();
    for r in results {
        if let Some(o) = r.outcome {
            outcomes.push(o);
        }
        if let Some(e) = r.error {
            incomplete.push(e);
        }
    }

    // Persist outcomes so reports can be regenerated from the store alone.
    for outcome in &outcomes {
        let key = digest(&[
            "item_outcome",
            &outcome.run,
            &outcome.item_id,
            &outcome.condition.to_string(),
        ]);
        let payload = serde_json::to_value(outcome).expect("outcome serializes");
        match client.store().put(RecordKind::Report, &key, &payload) {
            Ok(_) => {}
            Err(crate::runstore::StoreError::Conflict { .. }) => {}
            Err(e) => return Err(EvalError::Llm(e.into())),
        }
    }

    let report = report::report_from_outcomes(axis, &outcomes);
    let thinking = match mode {
        PromptMode::Direct => None,
        PromptMode::Thinking => Some(aggregate_thinking(tokenizer.profile_name(), &outcomes)),
    };
    Ok(EvalRun {
        report,
        outcomes,
        thinking,
        incomplete,
    })
}

fn aggregate_thinking(profile: &str, outcomes: &[ItemOutcome]) -> ThinkingStats {
    let mut by_condition: std::collections::BTreeMap<i64, Vec<&ItemOutcome>> =
        std::collections::BTreeMap::new();
    for o in outcomes {
        if o.thinking_tokens.is_some() {
            by_condition.entry(report::condition_key(o.condition)).or_default().push(o);
        }
    }
    let mean = |xs: &[f64]| -> Option<f64> {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    let per_condition = by_condition
        .into_iter()
        .map(|(key, group)| {
            let all: Vec<f64> = group.iter().map(|o| o.thinking_tokens.unwrap() as f64).collect();
            let correct: Vec<f64> = group
                .iter()
                .filter(|o| o.correct == Some(true))
                .map(|o| o.thinking_tokens.unwrap() as f64)
                .collect();
            let incorrect: Vec<f64> = group
                .iter()
                .filter(|o| o.correct == Some(false))
                .map(|o| o.thinking_tokens.unwrap() as f64)
                .collect();
            ThinkingConditionStats {
                condition: key as f64 / 1000.0,
                n: group.len(),
                mean_tokens: mean(&all).unwrap_or(0.0),
                mean_tokens_correct: mean(&correct),
                mean_tokens_incorrect: mean(&incorrect),
            }
        })
        .collect();
    ThinkingStats {
        tokenizer_profile: profile.to_string(),
        per_condition,
    }
}
