mod common;

use uragc_engine::forge::{forge_instance, forge_report, ForgeConfig, SeedPair, TAG_NOT_DIFFICULT};
use uragc_providers::mock::{ChatRule, MockResponse, MockScript, NliRule};

fn seed() -> SeedPair {
    SeedPair {
        id: "s0".into(),
        question: "Who designed the bridge?".into(),
        answer: "Alice".into(),
        context: Some("Alice designed the bridge in 1901.".into()),
        corpus_ref: None,
    }
}

fn naive(a: &str) -> MockResponse {
    MockResponse::text(&format!(r#"{{"fake_answer": "{a}"}}"#))
}

fn full(a: &str) -> MockResponse {
    MockResponse::text(&format!(
        r#"{{"fake_answer": "{a}", "similarity_type": "role-similar", "fake_document_title": "Gazette", "fake_document_excerpt": "{a} drew the plans."}}"#
    ))
}

/// Slot `j` answers `t{t}-s{j}` at iteration `t`; entailment turns high at `pass_at`.
fn scripted(pass_at: Option<usize>) -> MockScript {
    let mut s = MockScript::default();
    for t in 1..=3 {
        for j in 0..3 {
            let prev = format!("Previously, you generated \"t{}-s{j}\"", t - 1);
            s.chat.push(ChatRule::contains(&[&prev], full(&format!("t{t}-s{j}"))));
        }
    }
    for j in 0..3 {
        s.chat.push(ChatRule::contains(&[&format!("fake answer {} of 3", j + 1)], naive(&format!("t0-s{j}"))));
    }
    for t in 0..=3 {
        let score = if pass_at.is_some_and(|p| t >= p) { [0.9, 0.05, 0.05] } else { [0.1, 0.1, 0.8] };
        s.nli.push(NliRule::new(&[&format!("t{t}-s0")], score));
    }
    s.nli.push(NliRule::new(&["-s1"], [0.1, 0.1, 0.8]));
    s.nli.push(NliRule::new(&["-s2"], [0.1, 0.1, 0.8]));
    s
}

#[test]
fn passes_at_scripted_iteration() {
    let env = common::env_with(scripted(Some(1)), common::corpus(4));
    let out = forge_instance(&seed(), &env, &ForgeConfig::default()).unwrap();
    assert_eq!(out.verdict.iterations_used, 1);
    assert!(out.verdict.difficult);
    assert_eq!(out.difficult_at, Some(1));
    assert_eq!(out.instance.answer_text(), "Alice");
    assert_eq!(out.instance.num_options(), 4);
    assert_eq!(out.fake_documents().len(), 3);
    let again = forge_instance(&seed(), &env, &ForgeConfig::default()).unwrap();
    assert_eq!(out, again);
}

#[test]
fn never_difficult_is_flagged_not_dropped() {
    let env = common::env_with(scripted(None), common::corpus(4));
    let out = forge_instance(&seed(), &env, &ForgeConfig::default()).unwrap();
    assert!(!out.verdict.difficult);
    assert_eq!(out.verdict.iterations_used, 3);
    assert!(out.instance.tags.iter().any(|t| t == TAG_NOT_DIFFICULT));
    out.instance.validate().unwrap();
}

#[test]
fn gold_echo_is_rerequested() {
    let mut s = MockScript::default();
    s.chat.push(ChatRule::contains(&["rejected"], naive("Bob")));
    s.chat.push(ChatRule::contains(&["fake answer 1 of 1"], naive("Alice")));
    s.nli.push(NliRule::new(&["Bob"], [0.9, 0.05, 0.05]));
    let env = common::env_with(s, common::corpus(4));
    let cfg = ForgeConfig {
        distractors: 1,
        ..ForgeConfig::default()
    };
    let out = forge_instance(&seed(), &env, &cfg).unwrap();
    let ex = &out.iterations[0].exchanges;
    assert_eq!(ex.len(), 2);
    assert!(ex[0].rejected.is_some());
    assert_eq!(out.iterations[0].candidates[0].text, "Bob");
}

#[test]
fn hopeless_completions_error_with_raw_text() {
    let mut s = MockScript::default();
    s.chat.push(ChatRule::contains(&["fake answer"], MockResponse::text("I cannot help")));
    let env = common::env_with(s, common::corpus(4));
    let err = forge_instance(&seed(), &env, &ForgeConfig::default()).unwrap_err();
    match err {
        uragc_engine::EngineError::Forge { raw, .. } => assert_eq!(raw, "I cannot help"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn table_from_outcomes() {
    let t = forge_report(&[Some(0), Some(1), None], 3).unwrap();
    assert!(t.percentages.windows(2).all(|w| w[0] <= w[1]));
    assert!(t.to_csv().starts_with("Naive,Iter 1,Iter 2,Iter 3\n"));
}
