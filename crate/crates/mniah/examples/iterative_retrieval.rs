//! The multi-round retrieve/reason loop with reflection.
//!
//! Round 1 retrieves evidence from the context and answers from it; each
//! later round reflects on the previous answer, retrieves again without
//! repeating earlier items, and answers from the cumulative evidence.
//!
//! ## Run
//! ```bash
//! cargo run --example iterative_retrieval
//! ```

use std::sync::Arc;

use mniah::fixtures;
use mniah::fourr;
use mniah::llm::mock::offline_model;
use mniah::llm::{LlmClient, ModelEndpoint, RetryPolicy};
use mniah::runstore::RunStore;
use mniah::taskgen;
use mniah::tokenizer::Tokenizer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = Arc::new(RunStore::open(dir.path().join("store"), "example")?);
    let mut client = LlmClient::new(store).with_retry(RetryPolicy::immediate());
    let endpoint = |name: &str| ModelEndpoint {
        name: name.into(),
        base_url: "mock:offline".into(),
        model_id: "offline".into(),
        auth_env: None,
    };
    client.register(endpoint("model"), Arc::new(offline_model()), 2);
    client.register(endpoint("judge"), Arc::new(offline_model()), 2);

    let tokenizer = Tokenizer::builtin();
    let items = fixtures::qa_items(1, 21);
    let filler = fixtures::filler_corpus(4_000, 21);
    let item = &items[0];
    let instance = taskgen::build_even_random(&tokenizer, item, &filler, 2000, 1)?;

    println!("question: {}\n", item.question);
    let trace = fourr::run_iterations(
        &client,
        "model",
        "judge",
        &instance,
        &item.question,
        &item.gold_answer,
        3,
    )?;

    for round in &trace.rounds {
        println!("round {}:", round.round);
        if round.evidence_new.is_empty() {
            println!("  (no new evidence after deduplication)");
        }
        for item in &round.evidence_new {
            println!("  + {item}");
        }
        println!("  answer: {}", round.answer);
        println!("  verdict: {:?}\n", round.verdict.correct);
    }

    let report = fourr::per_round_report(&[trace]);
    println!("per-round accuracy:");
    for row in &report.rows {
        println!("  round {} -> {:.2}", row.condition, row.accuracy);
    }
    Ok(())
}
