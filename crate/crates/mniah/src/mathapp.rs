//! Contest-math application: sample candidate solutions per problem, feed
//! them back with the problem for answer extraction, score pass@1.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::error::{Classify, ErrorClass};
use crate::evaluation;
use crate::llm::{preset, ChatMessage, DecodingConfig, LlmClient, LlmError, Preset};
use crate::prompts;

#[derive(Debug, Error)]
pub enum MathError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("problem {id}: answer {answer} outside the contest range 0..=999")]
    AnswerOutOfRange { id: String, answer: i64 },
    #[error("answers list has {answers} entries for {problems} problems")]
    LengthMismatch { problems: usize, answers: usize },
    #[error("cannot read problems from {path}: {detail}")]
    ProblemsUnreadable { path: PathBuf, detail: String },
    #[error("cannot write {path}: {source}")]
    WriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
}

impl Classify for MathError {
    fn class(&self) -> ErrorClass {
        match self {
            MathError::Llm(e) => e.class(),
            MathError::Eval(e) => e.class(),
            MathError::ProblemsUnreadable { .. } => ErrorClass::Ingestion,
            MathError::WriteFailed { .. } => ErrorClass::Other,
            _ => ErrorClass::Validation,
        }
    }
}

/// One contest problem; answers are integers 0–999.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MathProblem {
    pub id: String,
    pub statement: String,
    #[serde(rename = "answer")]
    pub gold_answer: u32,
}

/// Candidate solutions for one problem, with the settings that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionBundle {
    pub problem_id: String,
    pub solutions: Vec<String>,
    pub settings: DecodingConfig,
}

/// Samples candidate solutions for a problem.
pub fn generate_solutions(
    client: &LlmClient,
    endpoint: &str,
    problem: &MathProblem,
) -> Result<SolutionBundle, MathError> {
    let decoding = preset(Preset::MathGenerate);
    let prompt = prompts::math_solution(&problem.statement);
    let record = client.chat(endpoint, vec![ChatMessage::user(prompt)], decoding.clone())?;
    Ok(SolutionBundle {
        problem_id: problem.id.clone(),
        solutions: record.completions,
        settings: decoding,
    })
}

/// The extraction context: problem statement followed by the numbered
/// solutions, in generation order.
pub fn extraction_context(problem: &MathProblem, bundle: &SolutionBundle) -> String {
    let mut ctx = format!("Problem: {}\n", problem.statement);
    for (i, solution) in bundle.solutions.iter().enumerate() {
        ctx.push_str(&format!("\nSolution {}: {}\n", i + 1, solution));
    }
    ctx
}

/// Feeds the problem plus its candidate solutions to the extractor and
/// returns the extractor's sampled responses.
pub fn extract_answers(
    client: &LlmClient,
    extractor_endpoint: &str,
    problem: &MathProblem,
    bundle: &SolutionBundle,
) -> Result<Vec<String>, MathError> {
    let context = extraction_context(problem, bundle);
    let prompt = prompts::answer_with_context(&context, &problem.statement);
    let record = client.chat(
        extractor_endpoint,
        vec![ChatMessage::user(prompt)],
        preset(Preset::MathExtract),
    )?;
    Ok(record.completions)
}

/// Pulls the final integer out of a response: the last boxed value wins,
/// falling back to the last standalone integer on the final non-empty line.
pub fn parse_final_answer(response: &str) -> Option<i64> {
    use regex::Regex;
    use std::sync::OnceLock;
    static BOXED: OnceLock<Regex> = OnceLock::new();
    static INT: OnceLock<Regex> = OnceLock::new();
    let boxed = BOXED.get_or_init(|| Regex::new(r"\\boxed\{\s*(-?\d+)\s*\}").unwrap());
    let int = INT.get_or_init(|| Regex::new(r"-?\d+").unwrap());

    if let Some(last) = boxed.captures_iter(response).last() {
        if let Ok(v) = last[1].parse() {
            return Some(v);
        }
    }
    let last_line = response.lines().rev().find(|l| !l.trim().is_empty())?;
    int.find_iter(last_line).last().and_then(|m| m.as_str().parse().ok())
}

/// Per-problem scoring record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemScore {
    pub problem_id: String,
    pub gold_answer: u32,
    pub parsed: Vec<Option<i64>>,
    pub correct: u32,
    pub pass_at_1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetScore {
    pub problems: Vec<ProblemScore>,
    /// 100 × mean per-problem pass@1.
    pub score: f64,
}

/// Scores parsed answers against the gold answers; an unparsed entry counts
/// as incorrect. The dataset score is 100 times the mean per-problem
/// pass@1.
pub fn score_pass1(
    problems: &[MathProblem],
    answers: &[Vec<Option<i64>>],
) -> Result<DatasetScore, MathError> {
    if problems.len() != answers.len() {
        return Err(MathError::LengthMismatch {
            problems: problems.len(),
            answers: answers.len(),
        });
    }
    let mut scores = Vec::with_capacity(problems.len());
    for (problem, parsed) in problems.iter().zip(answers) {
        let n = parsed.len().max(1) as u32;
        let correct = parsed
            .iter()
            .filter(|a| **a == Some(i64::from(problem.gold_answer)))
            .count() as u32;
        let p1 = evaluation::pass_at_1(correct, n)?;
        scores.push(ProblemScore {
            problem_id: problem.id.clone(),
            gold_answer: problem.gold_answer,
            parsed: parsed.clone(),
            correct,
            pass_at_1: p1,
        });
    }
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().map(|s| s.pass_at_1).sum::<f64>() / scores.len() as f64
    };
    Ok(DatasetScore {
        problems: scores,
        score: 100.0 * mean,
    })
}

/// The full generate → extract → parse → score pipeline for one problem set.
pub fn run_pipeline(
    client: &LlmClient,
    generator_endpoint: &str,
    extractor_endpoint: &str,
    problems: &[MathProblem],
) -> Result<DatasetScore, MathError> {
    let mut answers = Vec::with_capacity(problems.len());
    for problem in problems {
        let bundle = generate_solutions(client, generator_endpoint, problem)?;
        let responses = extract_answers(client, extractor_endpoint, problem, &bundle)?;
        answers.push(responses.iter().map(|r| parse_final_answer(r)).collect());
    }
    score_pass1(problems, &answers)
}

// ---------------------------------------------------------------------------
// Problems and results files
// ---------------------------------------------------------------------------

/// Reads a JSONL problems file ({id, statement, answer} per line).
pub fn read_problems(path: &Path) -> Result<Vec<MathProblem>, MathError> {
    use std::io::BufRead;
    let unreadable = |detail: String| MathError::ProblemsUnreadable {
        path: path.to_path_buf(),
        detail,
    };
    let file = std::fs::File::open(path).map_err(|e| unreadable(e.to_string()))?;
    let mut problems = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| unreadable(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: MathProblem = serde_json::from_str(&line).map_err(|e| unreadable(e.to_string()))?;
        if p.gold_answer > 999 {
            return Err(MathError::AnswerOutOfRange {
                id: p.id,
                answer: i64::from(p.gold_answer),
            });
        }
        problems.push(p);
    }
    Ok(problems)
}

pub fn write_problems(path: &Path, problems: &[MathProblem]) -> Result<(), MathError> {
    use std::io::Write;
    let io_err = |source| MathError::WriteFailed {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    for p in problems {
        writeln!(file, "{}", serde_json::to_string(p).expect("problem serializes")).map_err(io_err)?;
    }
    Ok(())
}

/// Per-problem CSV (one row per problem, parsed answers joined by '|') with
/// the dataset score as the final summary row.
pub fn results_csv(score: &DatasetScore, meta: &evaluation::ReportMeta) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={}\n", meta.config_hash));
    out.push_str(&format!("# seed={}\n", meta.seed));
    out.push_str(&format!("# tokenizer_profile={}\n", meta.tokenizer_profile));
    out.push_str("problem_id,gold,parsed,correct,n,pass_at_1\n");
    for p in &score.problems {
        let parsed = p
            .parsed
            .iter()
            .map(|a| a.map(|v| v.to_string()).unwrap_or_else(|| "none".into()))
            .collect::<Vec<_>>()
            .join("|");
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            p.problem_id,
            p.gold_answer,
            parsed,
            p.correct,
            p.parsed.len(),
            p.pass_at_1
        ));
    }
    out.push_str(&format!("# dataset_score={:.1}\n", score.score));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::report::round_to;
    use crate::fixtures;
    use crate::llm::mock::offline_model;
    use crate::llm::{ModelEndpoint, RetryPolicy, Transport};
    use crate::runstore::RunStore;
    use std::sync::Arc;

    #[test]
    fn parse_boxed_answer() {
        assert_eq!(parse_final_answer("the final answer is \\boxed{204}"), Some(204));
        assert_eq!(
            parse_final_answer("\\boxed{1} then revised to \\boxed{73}"),
            Some(73)
        );
    }

    #[test]
    fn parse_falls_back_to_last_line_integer() {
        assert_eq!(parse_final_answer("work...\nthe answer: 73"), Some(73));
        assert_eq!(parse_final_answer("values 3 and 9\nso it is 12"), Some(12));
    }

    #[test]
    fn parse_gives_none_without_numbers() {
        assert_eq!(parse_final_answer("no idea"), None);
        assert_eq!(parse_final_answer(""), None);
    }

    #[test]
    fn parser_is_pure_and_idempotent_on_solution_endings() {
        // Thirty realistic solution endings with hand labels.
        let cases: Vec<(String, Option<i64>)> = (0..10)
            .flat_map(|i| {
                let v = 100 + i;
                vec![
                    (format!("After combining terms we get \\boxed{{{v}}}."), Some(v)),
                    (format!("Step 3 gives {v}.\nFinal answer: {v}"), Some(v)),
                    (format!("…so x + y = {}.\nThus \\boxed{{{v}}}", v + 1), Some(v)),
                ]
            })
            .collect();
        assert_eq!(cases.len(), 30);
        for (text, expected) in &cases {
            assert_eq!(parse_final_answer(text), *expected, "{text}");
            assert_eq!(parse_final_answer(text), parse_final_answer(text));
        }
    }

    #[test]
    fn score_boundaries() {
        let problems = fixtures::math_problems(3, 1);
        let all_right: Vec<Vec<Option<i64>>> = problems
            .iter()
            .map(|p| vec![Some(i64::from(p.gold_answer)); 5])
            .collect();
        assert_eq!(score_pass1(&problems, &all_right).unwrap().score, 100.0);
        let all_none: Vec<Vec<Option<i64>>> = problems.iter().map(|_| vec![None; 5]).collect();
        assert_eq!(score_pass1(&problems, &all_none).unwrap().score, 0.0);
    }

    #[test]
    fn score_reproduces_table_arithmetic() {
        // 30 problems, 23 correct samples across 150: mean pass@1 rounds to
        // 0.153 and the dataset score displays as 15.3.
        let problems = fixtures::math_problems(30, 2);
        let mut remaining = 23u32;
        let answers: Vec<Vec<Option<i64>>> = problems
            .iter()
            .map(|p| {
                let take = remaining.min(1 + (p.gold_answer % 2)); // 1 or 2 per problem
                remaining -= take;
                (0..5)
                    .map(|i| {
                        if (i as u32) < take {
                            Some(i64::from(p.gold_answer))
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        assert_eq!(remaining, 0, "fixture must distribute exactly 23 correct samples");
        let score = score_pass1(&problems, &answers).unwrap();
        let mean = score.score / 100.0;
        assert_eq!(round_to(mean, 3), 0.153);
        assert_eq!(round_to(score.score, 1), 15.3);
    }

    #[test]
    fn length_mismatch_is_validation_error() {
        let problems = fixtures::math_problems(2, 1);
        let err = score_pass1(&problems, &[vec![None; 5]]).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Validation);
    }

    #[test]
    fn pipeline_over_offline_model_is_deterministic() {
        let problems = fixtures::math_problems(6, 4);
        let run = |dir: &std::path::Path| {
            let store = Arc::new(RunStore::open(dir.join("store"), "cfg").unwrap());
            let mut client = LlmClient::new(store).with_retry(RetryPolicy::immediate());
            let ep = |name: &str| ModelEndpoint {
                name: name.into(),
                base_url: "mock:".into(),
                model_id: "offline".into(),
                auth_env: None,
            };
            let model: Arc<dyn Transport> = Arc::new(offline_model());
            client.register(ep("gen"), model.clone(), 2);
            client.register(ep("ext"), model, 2);
            run_pipeline(&client, "gen", "ext", &problems).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run(d1.path());
        let b = run(d2.path());
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // Solvable problems (even factor sum) extract correctly.
        let factors = regex::Regex::new(r"the product of (\d+) and (\d+)").unwrap();
        for (p, s) in problems.iter().zip(&a.problems) {
            assert_eq!(s.parsed.len(), 5);
            let caps = factors.captures(&p.statement).unwrap();
            let solvable = (caps[1].parse::<i64>().unwrap() + caps[2].parse::<i64>().unwrap()) % 2 == 0;
            assert_eq!(s.pass_at_1 == 1.0, solvable, "{}", p.id);
        }
    }

    #[test]
    fn extraction_context_keeps_generation_order() {
        let problems = fixtures::math_problems(1, 9);
        let bundle = SolutionBundle {
            problem_id: problems[0].id.clone(),
            solutions: vec!["s-one".into(), "s-two".into(), "s-three".into()],
            settings: preset(Preset::MathGenerate),
        };
        let ctx = extraction_context(&problems[0], &bundle);
        let p1 = ctx.find("Solution 1: s-one").unwrap();
        let p2 = ctx.find("Solution 2: s-two").unwrap();
        let p3 = ctx.find("Solution 3: s-three").unwrap();
        assert!(p1 < p2 && p2 < p3);
        assert!(ctx.contains(&problems[0].statement));
    }

    #[test]
    fn problems_file_round_trips_and_validates_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("problems.jsonl");
        let problems = fixtures::math_problems(4, 3);
        write_problems(&path, &problems).unwrap();
        let back = read_problems(&path).unwrap();
        assert_eq!(back.len(), 4);
        std::fs::write(
            &path,
            "{\"id\":\"bad\",\"statement\":\"s\",\"answer\":1000}\n",
        )
        .unwrap();
        assert!(matches!(
            read_problems(&path),
            Err(MathError::AnswerOutOfRange { .. })
        ));
    }
}
