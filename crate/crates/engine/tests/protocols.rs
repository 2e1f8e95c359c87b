mod common;

use uragc_core::model::split;
use uragc_core::ScoreMethod;
use uragc_engine::evaluation::{
    apply_wrong_aware, depth_sweep, knowledge_isolation_split, run_protocol, EvalConfig, ProtocolKind, ProtocolSpec,
    SplitRole, SwapRule,
};
use uragc_engine::strategy::StrategyKind;
use uragc_engine::util::json_hash;
use uragc_providers::mock::{ChatRule, MockResponse};

fn setup(n: usize) -> (Vec<uragc_core::McqaInstance>, uragc_core::SplitSpec) {
    let data = common::dataset(n);
    let s = split(&data, 0.5, 7).unwrap();
    (data, s)
}

#[test]
fn certain_mock_gives_perfect_metrics() {
    // ten calibration records keep the conformal rank within n at alpha 0.1
    let (data, s) = setup(20);
    let mut script = common::base_script();
    for inst in &data {
        script.chat.push(ChatRule::contains(
            &[&inst.question],
            MockResponse::labels(&[("A", 0.9f64.ln()), ("B", (0.1f64 / 3.0).ln()), ("C", (0.1f64 / 3.0).ln()), ("D", (0.1f64 / 3.0).ln())]),
        ));
    }
    let env = common::env_with(script, common::corpus(20));
    let r = run_protocol(&data, &s, StrategyKind::Naive, &ProtocolSpec::default(), &env, &EvalConfig::default()).unwrap();
    for m in ScoreMethod::ALL {
        let a = r.aggregate(m).unwrap();
        assert_eq!((a.acc, a.cr, a.ss), (1.0, 1.0, 1.0), "{m:?}");
    }
    assert_eq!(r.headline.n, s.test_ids.len());
    assert!(r.invariants_hold());
}

#[test]
fn reports_are_byte_reproducible_and_sorted() {
    let (data, s) = setup(8);
    let env = common::env(20);
    let cfg = EvalConfig::default();
    let spec = ProtocolSpec::new(ProtocolKind::IrrelevantContext);
    let a = run_protocol(&data, &s, StrategyKind::Fusion, &spec, &env, &cfg).unwrap();
    let b = run_protocol(&data, &s, StrategyKind::Fusion, &spec, &env, &cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let ids: Vec<_> = a.records.iter().map(|r| r.instance_id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(a.records.len(), data.len());
}

#[test]
fn wrong_aware_displays_swapped_prior() {
    let (data, s) = setup(6);
    let env = common::env(20);
    let spec = ProtocolSpec::new(ProtocolKind::WrongAware);
    let r = run_protocol(&data, &s, StrategyKind::Naive, &spec, &env, &EvalConfig::default()).unwrap();
    assert!(r.invariants_hold());
    assert!(r.metadata.watermarks.iter().any(|w| w.starts_with("wrong_aware_swap=max_min")));
    for rec in &r.records {
        let prior = rec.prior.as_ref().unwrap();
        assert_eq!(json_hash(&prior.distribution), prior.distribution_hash);
        assert_eq!(prior.displayed, apply_wrong_aware(prior.distribution.probs(), SwapRule::MaxMin));
    }
}

#[test]
fn knowledge_isolation_recombines() {
    let (data, s) = setup(10);
    let env = common::env(20);
    let spec = ProtocolSpec::new(ProtocolKind::KnowledgeIsolation);
    let r = run_protocol(&data, &s, StrategyKind::Naive, &spec, &env, &EvalConfig::default()).unwrap();
    assert_eq!(r.subsets.len(), 2);
    assert_eq!(r.subsets[0].ids.len() + r.subsets[1].ids.len(), data.len());
    for m in ScoreMethod::ALL {
        let full = r.aggregate(m).unwrap();
        let (mut n, mut cr, mut ss) = (0usize, 0.0, 0.0);
        for sub in &r.subsets {
            if let Some(a) = sub.aggregates.iter().find(|a| a.method == m) {
                n += a.n;
                cr += a.cr * a.n as f64;
                ss += a.ss * a.n as f64;
            }
        }
        assert_eq!(n, full.n);
        assert!((cr / n as f64 - full.cr).abs() < 1e-9);
        assert!((ss / n as f64 - full.ss).abs() < 1e-9);
    }
}

#[test]
fn isolation_split_names_missing_ids() {
    let (data, s) = setup(6);
    let env = common::env(20);
    let base = run_protocol(&data, &s, StrategyKind::NoRetrieve, &ProtocolSpec::default(), &env, &EvalConfig::default()).unwrap();
    let (c, i) = knowledge_isolation_split(&data, &base).unwrap();
    assert_eq!(c.len() + i.len(), 6);
    let mut more = data.clone();
    more.push(common::dataset(7).pop().unwrap());
    let err = knowledge_isolation_split(&more, &base).unwrap_err().to_string();
    assert!(err.contains("q06"), "{err}");
}

#[test]
fn flagged_records_are_excluded() {
    let (data, s) = setup(10);
    let mut script = common::base_script();
    // only the gold label scored: the floor rule fills the rest
    script.chat.push(ChatRule::contains(&[&data[1].question], MockResponse::labels(&[("A", -0.1)])));
    script.chat.push(ChatRule::contains(&[&data[2].question], MockResponse::labels(&[("A", -0.1)])));
    let env = common::env_with(script, common::corpus(20));
    let r = run_protocol(&data, &s, StrategyKind::NoRetrieve, &ProtocolSpec::default(), &env, &EvalConfig::default()).unwrap();
    assert_eq!(r.quality.excluded.len(), 2);
    let flagged_test = r.quality.excluded.iter().filter(|e| e.split == SplitRole::Test).count();
    assert_eq!(r.headline.n, s.test_ids.len() - flagged_test);
}

#[test]
fn depth_sweep_one_report_per_k() {
    let (data, s) = setup(6);
    let env = common::env(8);
    let spec = ProtocolSpec::new(ProtocolKind::DepthSweep);
    let runs = depth_sweep(&data, &s, StrategyKind::Naive, &spec, &env, &EvalConfig::default()).unwrap();
    assert_eq!(runs.iter().map(|r| r.k).collect::<Vec<_>>(), [10, 50, 100, 500]);
    let first = runs[0].report.as_ref().unwrap();
    for r in &runs {
        let rep = r.report.as_ref().unwrap();
        assert_eq!(rep.metadata.k, r.k);
        assert_eq!(rep.aggregates, first.aggregates);
        assert_eq!(r.retrieved_digest, runs[0].retrieved_digest);
    }
}

#[test]
fn empty_calibration_is_rejected() {
    let data = common::dataset(4);
    let s = uragc_core::SplitSpec {
        calibration_ids: Vec::new(),
        test_ids: data.iter().map(|d| d.id.clone()).collect(),
        seed: 0,
    };
    let env = common::env(10);
    assert!(run_protocol(&data, &s, StrategyKind::Naive, &ProtocolSpec::default(), &env, &EvalConfig::default()).is_err());
}
