#![allow(dead_code)]

use std::sync::Arc;

use uragc_core::{Document, McqaInstance};
use uragc_engine::strategy::{CorpusBundle, Env};
use uragc_providers::mock::{ChatRule, MockProvider, MockResponse, MockScript};
use uragc_providers::Providers;

pub const CORPUS: &str = "wiki";

const TOPICS: [&str; 6] = ["river", "mountain", "castle", "harbor", "forest", "desert"];

pub fn corpus(n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let t = TOPICS[i % TOPICS.len()];
            let mut d = Document::new(
                format!("d{i:03}"),
                format!("The {t} number {i} lies near town {} and was surveyed in year {}.", i % 7, 1900 + i),
            );
            d.title = Some(format!("{t} {i}"));
            d
        })
        .collect()
}

pub fn dataset(n: usize) -> Vec<McqaInstance> {
    (0..n)
        .map(|i| McqaInstance {
            id: format!("q{i:02}"),
            question: format!("In which year was the {} number {i} surveyed?", TOPICS[i % TOPICS.len()]),
            options: (0..4).map(|j| format!("{}", 1900 + i + 7 * j)).collect(),
            answer_index: 0,
            corpus_ref: CORPUS.into(),
            tags: Vec::new(),
        })
        .collect()
}

pub fn reflect_rule() -> ChatRule {
    ChatRule::contains(
        &["Judge the answer below with reflection tokens"],
        MockResponse::text("<|relevant|> <|partially_supported|> <|utility:4|>"),
    )
}

pub fn base_script() -> MockScript {
    let mut s = MockScript::default();
    s.chat.push(reflect_rule());
    s
}

pub fn env_with(script: MockScript, docs: Vec<Document>) -> Env {
    let mock = Arc::new(MockProvider::new(script));
    let providers = Providers::mock(mock);
    let bundle = CorpusBundle::build(CORPUS, docs, providers.embed.as_ref()).unwrap();
    let mut env = Env::new(providers);
    env.add_corpus(bundle);
    env
}

pub fn env(n_docs: usize) -> Env {
    env_with(base_script(), corpus(n_docs))
}
