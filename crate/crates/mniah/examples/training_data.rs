//! Fine-tuning dataset synthesis: two-round traces are rewritten into
//! natural reasoning (three samples per item), paired with fresh
//! 4,096-token contexts, split train/test and emitted as JSONL.
//!
//! ## Run
//! ```bash
//! cargo run --example training_data
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use mniah::fixtures;
use mniah::fourr;
use mniah::llm::mock::offline_model;
use mniah::llm::{LlmClient, ModelEndpoint, RetryPolicy};
use mniah::runstore::RunStore;
use mniah::taskgen;
use mniah::tokenizer::Tokenizer;
use mniah::traindata;

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
    client.register(endpoint("rewriter"), Arc::new(offline_model()), 4);

    let tokenizer = Tokenizer::builtin();
    let items = fixtures::qa_items(10, 55);
    let filler = fixtures::filler_corpus(6_000, 55);
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    let (train_ids, test_ids) = traindata::split_train_test(&ids, 7, 3, 9)?;
    println!("split: {} train / {} test", train_ids.len(), test_ids.len());

    // K=2 traces for the train items, produced by the loop itself.
    let items_by_id: BTreeMap<_, _> = items.iter().map(|i| (i.id.clone(), i.clone())).collect();
    let mut traces = BTreeMap::new();
    for id in &train_ids {
        let item = &items_by_id[id];
        let instance = taskgen::build_even_random(&tokenizer, item, &filler, 1000, 3)?;
        let trace = fourr::run_iterations(
            &client,
            "model",
            "judge",
            &instance,
            &item.question,
            &item.gold_answer,
            2,
        )?;
        traces.insert(id.clone(), trace);
    }

    let built = traindata::build_examples(
        &client,
        "rewriter",
        &tokenizer,
        &items_by_id,
        &traces,
        &filler,
        &train_ids,
        9,
        traindata::TargetStyle::NaturalThinking,
    )?;
    println!(
        "built {} examples ({} rewrites dropped)",
        built.examples.len(),
        built.drops.len()
    );

    let out = dir.path().join("train.jsonl");
    let manifest = serde_json::json!({
        "kind": "manifest",
        "trainer": traindata::trainer_metadata(),
        "records": built.examples.len(),
    });
    traindata::emit_training_file(&out, &manifest, &built.examples)?;

    let (manifest_back, records) = traindata::read_training_file(&out)?;
    println!("emitted {} records; trainer metadata: {}", records.len(), manifest_back["trainer"]);
    let sample = &records[0];
    println!("\nsample target for {} (rewrite {}):", sample.item_id, sample.rewrite_index);
    println!("{}", sample.target);
    Ok(())
}
