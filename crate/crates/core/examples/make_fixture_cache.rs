//! Writes canned completions for a fixture directory into its completion
//! cache, so the fixture can be replayed offline.
//!
//! Usage: cargo run -p medner-core --example make_fixture_cache -- fixtures/demo
//!
//! Reads `<dir>/config.toml` and `<dir>/responses/<strategy>.txt`. Latency
//! and timestamps are fixed so the cache is reproducible.

use std::path::PathBuf;

use chrono::{TimeZone, Utc};
use medner_core::config::PipelineConfig;
use medner_core::corpus::build_sample_set;
use medner_core::gateway::{prompt_hash, CompletionCache, CompletionRecord};
use medner_core::pipeline::Pipeline;
use medner_core::prompt::{build_prompt, estimate_tokens, PromptStrategy};
use medner_core::transport::OfflineTransport;

fn latency(strategy: PromptStrategy) -> f64 {
    match strategy {
        PromptStrategy::ZeroShot => 8.88,
        PromptStrategy::FewShotDocument => 11.42,
        PromptStrategy::FewShotSentences => 12.05,
        PromptStrategy::FewShotEntities => 17.31,
    }
}

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/demo".into()));
    let config = PipelineConfig::load(&dir.join("config.toml"))?;
    let cache = CompletionCache::open(config.completion_cache_dir())?;
    let generation = config.generation();
    let budget = config.budget();
    let pipeline = Pipeline::new(config, std::sync::Arc::new(OfflineTransport::new()), None, None);
    let corpus = pipeline.load_corpus()?;
    let template = pipeline.template()?;
    let sampling = pipeline.config().sampling(&corpus.test.document.doc_id);

    for (i, strategy) in PromptStrategy::ALL.into_iter().enumerate() {
        let path = dir.join("responses").join(format!("{}.txt", strategy.name()));
        let Ok(response_text) = std::fs::read_to_string(&path) else {
            eprintln!("skipping {strategy}: no {}", path.display());
            continue;
        };
        let samples = build_sample_set(strategy, &corpus.train, &sampling)?;
        let artifact = build_prompt(strategy, &samples, &corpus.test.document, &template, &budget)?;
        let record = CompletionRecord {
            prompt_hash: prompt_hash(&artifact.text(), &generation),
            latency_seconds: latency(strategy),
            request_tokens: artifact.token_estimate as i64,
            response_tokens: estimate_tokens(&response_text) as i64,
            response_text,
            timestamp: Utc.with_ymd_and_hms(2025, 1, 15, 12, i as u32, 0).unwrap(),
        };
        cache.put(&record)?;
        println!("{:<5} {} ~{} tokens", strategy.name(), record.prompt_hash, artifact.token_estimate);
    }
    Ok(())
}
