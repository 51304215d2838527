//! Contest-math scoring: sample five candidate solutions per problem,
//! feed them back with the problem for answer extraction, score pass@1.
//!
//! The offline model solves fixture problems whose factors sum to an even
//! number (three of five samples correct) and leaves the rest wrong, so
//! the dataset score is deterministic.
//!
//! ## Run
//! ```bash
//! cargo run --example math_extraction
//! ```

use std::sync::Arc;

use mniah::fixtures;
use mniah::llm::mock::offline_model;
use mniah::llm::{LlmClient, ModelEndpoint, RetryPolicy};
use mniah::mathapp;
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
    client.register(endpoint("generator"), Arc::new(offline_model()), 4);
    client.register(endpoint("extractor"), Arc::new(offline_model()), 4);

    let problems = fixtures::math_problems(8, 2);
    let score = mathapp::run_pipeline(&client, "generator", "extractor", &problems)?;

    println!("problem    gold  correct/n  pass@1");
    for p in &score.problems {
        println!(
            "{:<10} {:<5} {}/{}        {:.2}",
            p.problem_id,
            p.gold_answer,
            p.correct,
            p.parsed.len(),
            p.pass_at_1
        );
    }
    println!("\ndataset score: {:.1}", score.score);
    Ok(())
}
