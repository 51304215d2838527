//! Memory-answer filtering: keep only questions a model answers correctly
//! with the supporting passages but not from its own knowledge.
//!
//! Uses the scripted offline model, which refuses closed-book questions
//! and reads passphrases out of provided passages, so every fixture item
//! survives the filter. Also shows kept-set intersection across models.
//!
//! ## Run
//! ```bash
//! cargo run --example filter_memory_answers
//! ```

use std::collections::BTreeSet;
use std::sync::Arc;

use mniah::evaluation;
use mniah::fixtures;
use mniah::llm::mock::offline_model;
use mniah::llm::{LlmClient, ModelEndpoint, RetryPolicy};
use mniah::runstore::RunStore;

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
    client.register(endpoint("model"), Arc::new(offline_model()), 4);
    client.register(endpoint("judge"), Arc::new(offline_model()), 4);

    let items = fixtures::qa_items(6, 3);
    let report = evaluation::filter_items(&client, "model", "judge", &items, 1)?;

    println!("item                  closed-book  open-book  kept");
    for outcome in &report.outcomes {
        println!(
            "{:<22} {:<12} {:<10} {}",
            outcome.item_id, outcome.closed_book_correct, outcome.open_book_correct, outcome.kept
        );
    }
    println!(
        "\nkept {}/{} items ({} verdict failures)",
        report.kept_ids.len(),
        items.len(),
        report.failed_items.len()
    );

    // Intersection across per-model kept sets.
    let model_a: BTreeSet<String> = report.kept_ids.iter().cloned().collect();
    let model_b: BTreeSet<String> = report.kept_ids.iter().skip(2).cloned().collect();
    let both = evaluation::intersect_filtered(&[model_a, model_b])?;
    println!("intersection with a second (smaller) kept set: {} ids", both.len());
    Ok(())
}
