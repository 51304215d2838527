//! Cache replay and store-driven reporting.
//!
//! Every model call is persisted under a content digest before it
//! returns. Rerunning the same evaluation touches the transport zero
//! times and reproduces identical results, and reports can be rebuilt
//! from the store records alone.
//!
//! ## Run
//! ```bash
//! cargo run --example replay_report
//! ```

use std::sync::Arc;

use mniah::evaluation::{self, ConditionAxis, EvalUnit, PromptMode};
use mniah::fixtures;
use mniah::llm::mock::offline_model;
use mniah::llm::{LlmClient, ModelEndpoint, RetryPolicy};
use mniah::runstore::{RecordKind, RunStore};
use mniah::taskgen;
use mniah::tokenizer::Tokenizer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = Arc::new(RunStore::open(dir.path().join("store"), "example")?);
    let model = Arc::new(offline_model());
    let mut client = LlmClient::new(store.clone()).with_retry(RetryPolicy::immediate());
    let endpoint = |name: &str| ModelEndpoint {
        name: name.into(),
        base_url: "mock:offline".into(),
        model_id: "offline".into(),
        auth_env: None,
    };
    client.register(endpoint("model"), model.clone(), 4);
    client.register(endpoint("judge"), Arc::new(offline_model()), 4);

    let tokenizer = Tokenizer::builtin();
    let items = fixtures::qa_items(3, 8);
    let filler = fixtures::filler_corpus(6_000, 8);
    let units: Vec<EvalUnit> = items
        .iter()
        .flat_map(|item| {
            [1000usize, 2000].into_iter().map(|len| {
                let instance =
                    taskgen::build_even_random(&tokenizer, item, &filler, len, 1).unwrap();
                EvalUnit {
                    instance,
                    question: item.question.clone(),
                    gold_answer: item.gold_answer.clone(),
                }
            })
        })
        .collect();

    let first = evaluation::run_eval(
        &client,
        "model",
        "judge",
        &units,
        PromptMode::Direct,
        ConditionAxis::ContextLength,
        &tokenizer,
        "replay-demo",
    )?;
    let calls_after_first = model.call_count();
    println!("first run: {} transport calls", calls_after_first);

    let second = evaluation::run_eval(
        &client,
        "model",
        "judge",
        &units,
        PromptMode::Direct,
        ConditionAxis::ContextLength,
        &tokenizer,
        "replay-demo",
    )?;
    println!(
        "second run: {} new transport calls (pure cache replay)",
        model.call_count() - calls_after_first
    );
    assert_eq!(
        serde_json::to_string(&first.report)?,
        serde_json::to_string(&second.report)?
    );

    // Rebuild the report purely from persisted outcome records.
    let mut outcomes = Vec::new();
    for record in store.scan(RecordKind::Report)? {
        let record = record?;
        if record.payload["type"] == "item_outcome" {
            outcomes.push(serde_json::from_value(record.payload)?);
        }
    }
    let rebuilt = evaluation::report::report_from_outcomes(ConditionAxis::ContextLength, &outcomes);
    println!("\nreport rebuilt from {} stored outcomes:", outcomes.len());
    for row in &rebuilt.rows {
        println!("  {} tokens -> accuracy {:.2} (n={})", row.condition, row.accuracy, row.n_judged);
    }
    Ok(())
}
