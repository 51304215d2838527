//! A first-needle depth sweep: controlled instances across depth
//! conditions, evaluated and aggregated into a per-condition report.
//!
//! ## Run
//! ```bash
//! cargo run --example sweep_depth
//! ```

use std::sync::Arc;

use mniah::evaluation::{self, ConditionAxis, EvalUnit, PromptMode, ReportMeta};
use mniah::fixtures;
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
    client.register(endpoint("model"), Arc::new(offline_model()), 4);
    client.register(endpoint("judge"), Arc::new(offline_model()), 4);

    let tokenizer = Tokenizer::builtin();
    let items = fixtures::qa_items(4, 11);
    let filler = fixtures::filler_corpus(6_000, 11);

    // A reduced grid at a 4K window so every condition is feasible.
    let depths = [2.5, 25.0, 50.0, 75.0];
    let mut units = Vec::new();
    for item in &items {
        for &depth in &depths {
            let instance =
                taskgen::build_depth_controlled(&tokenizer, item, &filler, 4000, depth, 300, 5)?;
            units.push(EvalUnit {
                instance,
                question: item.question.clone(),
                gold_answer: item.gold_answer.clone(),
            });
        }
    }

    let run = evaluation::run_eval(
        &client,
        "model",
        "judge",
        &units,
        PromptMode::Direct,
        ConditionAxis::Depth,
        &tokenizer,
        "example-depth-sweep",
    )?;

    let meta = ReportMeta {
        config_hash: "example".into(),
        seed: 5,
        tokenizer_profile: tokenizer.profile_name().into(),
    };
    print!("{}", run.report.to_csv(&meta));
    Ok(())
}
