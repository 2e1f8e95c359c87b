//! Evaluation protocols: run a strategy over a calibration/test split,
//! calibrate LAC and APS thresholds, and aggregate accuracy, coverage and
//! set size into a [`RunReport`].

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uragc_core::conformal::{calibrate, predict_set, predict_set_nonempty};
use uragc_core::{
    stable_argmax, CalibrationModel, McqaInstance, OptionDistribution, PredictionSet, ScoreMethod, ScoredInstance,
    SplitSpec, StrategyTrace, TraceStep,
};

use crate::error::{EngineError, Result};
use crate::prompts::{confidence_lines, render};
use crate::strategy::{is_degradation, run_strategy, Env, Injection, RunContext, StrategyConfig, StrategyKind};
use crate::util::{derive_seed, json_hash};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_IRRELEVANT_COUNT: usize = 10;
pub const PAPER_DEPTHS: [usize; 4] = [10, 50, 100, 500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Normal,
    SelfAware,
    WrongAware,
    IrrelevantContext,
    KnowledgeIsolation,
    DepthSweep,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        ProtocolKind::Normal,
        ProtocolKind::SelfAware,
        ProtocolKind::WrongAware,
        ProtocolKind::IrrelevantContext,
        ProtocolKind::KnowledgeIsolation,
        ProtocolKind::DepthSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Normal => "normal",
            ProtocolKind::SelfAware => "self_aware",
            ProtocolKind::WrongAware => "wrong_aware",
            ProtocolKind::IrrelevantContext => "irrelevant_context",
            ProtocolKind::KnowledgeIsolation => "knowledge_isolation",
            ProtocolKind::DepthSweep => "depth_sweep",
        }
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| EngineError::Config(format!("unknown protocol {s:?}")))
    }
}

/// Which entries the wrong-aware display exchanges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapRule {
    /// Highest with lowest.
    #[default]
    MaxMin,
    /// Highest with second highest.
    MaxSecond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub irrelevant_count: usize,
    /// Draw fresh irrelevant documents at every retrieval step.
    pub irrelevant_fresh_per_step: bool,
    pub k_list: Vec<usize>,
    pub swap_rule: SwapRule,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::Normal,
            irrelevant_count: DEFAULT_IRRELEVANT_COUNT,
            irrelevant_fresh_per_step: true,
            k_list: PAPER_DEPTHS.to_vec(),
            swap_rule: SwapRule::MaxMin,
        }
    }
}

impl ProtocolSpec {
    pub fn new(kind: ProtocolKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ProtocolKind::IrrelevantContext && self.irrelevant_count == 0 {
            return Err(EngineError::Config("irrelevant_count must be at least 1".into()));
        }
        if self.kind == ProtocolKind::DepthSweep {
            if self.k_list.is_empty() {
                return Err(EngineError::Config("k_list is empty".into()));
            }
            if self.k_list.windows(2).any(|w| w[0] >= w[1]) || self.k_list[0] == 0 {
                return Err(EngineError::Config("k_list must be positive and strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// Run-level settings shared by every protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alpha: f64,
    /// Replace empty prediction sets with the top option.
    pub force_nonempty: bool,
    /// Width of the coverage floor, in binomial standard deviations.
    pub cr_floor_sigmas: f64,
    pub strategy: StrategyConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            force_nonempty: false,
            cr_floor_sigmas: 3.0,
            strategy: StrategyConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EngineError::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.cr_floor_sigmas >= 0.0) {
            return Err(EngineError::Config("cr_floor_sigmas must be non-negative".into()));
        }
        self.strategy.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Calibration,
    Test,
}

/// One evaluated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub split: SplitRole,
    pub gold_index: usize,
    pub distribution: OptionDistribution,
    pub distribution_hash: String,
    /// Top-1 prediction matches gold.
    pub correct: bool,
    /// Prediction sets for test records, LAC first.
    pub sets: Vec<PredictionSet>,
    /// Degradation flags excluded it from calibration and aggregates.
    pub excluded: bool,
    pub flags: BTreeSet<String>,
    pub trace_hash: String,
    pub trace: StrategyTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorPass>,
}

impl InstanceRecord {
    pub fn set(&self, method: ScoreMethod) -> Option<&PredictionSet> {
        self.sets.iter().find(|s| s.method == method)
    }

    pub fn covered(&self, method: ScoreMethod) -> Option<bool> {
        self.set(method).map(|s| s.contains(self.gold_index))
    }
}

/// The Normal-protocol pass whose confidence a self-aware or wrong-aware
/// prompt displays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorPass {
    pub distribution: OptionDistribution,
    /// Hash taken when the prior pass finished.
    pub distribution_hash: String,
    pub trace_hash: String,
    /// Values shown in the confidence block.
    pub displayed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: ScoreMethod,
    pub n: usize,
    pub acc: f64,
    pub cr: f64,
    pub ss: f64,
}

/// Accuracy plus LAC/APS means of coverage and set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub n: usize,
    pub acc: f64,
    pub cr: f64,
    pub ss: f64,
}

impl Headline {
    pub fn from_aggregates(aggs: &[Aggregate]) -> Option<Headline> {
        let first = aggs.first()?;
        let m = aggs.len() as f64;
        Some(Headline {
            n: first.n,
            acc: first.acc,
            cr: aggs.iter().map(|a| a.cr).sum::<f64>() / m,
            ss: aggs.iter().map(|a| a.ss).sum::<f64>() / m,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub name: String,
    /// Every dataset id in the subset, calibration included.
    pub ids: Vec<String>,
    pub aggregates: Vec<Aggregate>,
    pub headline: Option<Headline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRecord {
    pub instance_id: String,
    pub split: SplitRole,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRecord {
    pub instance_id: String,
    pub split: SplitRole,
    pub error: String,
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityManifest {
    pub excluded: Vec<ExcludedRecord>,
    pub failures: Vec<FailedRecord>,
    /// Flag name to number of records carrying it.
    pub flag_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub strategy: String,
    pub strategy_label: String,
    pub protocol: ProtocolKind,
    pub k: usize,
    pub alpha: f64,
    pub config_hash: String,
    pub seed: u64,
    pub split_seed: u64,
    /// Chat, embedding and NLI backends.
    pub providers: [String; 3],
    pub datasets: Vec<String>,
    pub n_calibration: usize,
    pub n_test: usize,
    /// Non-default or ambiguous behaviours in effect.
    pub watermarks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub calibration: Vec<CalibrationModel>,
    pub records: Vec<InstanceRecord>,
    pub aggregates: Vec<Aggregate>,
    pub headline: Headline,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subsets: Vec<SubsetReport>,
    pub quality: QualityManifest,
    pub invariants: Vec<InvariantCheck>,
}

impl RunReport {
    pub fn invariants_hold(&self) -> bool {
        self.invariants.iter().all(|c| c.passed)
    }

    pub fn aggregate(&self, method: ScoreMethod) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    pub fn record(&self, id: &str) -> Option<&InstanceRecord> {
        self.records.iter().find(|r| r.instance_id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Records a test split contributes to aggregates.
    pub fn scored_test_records(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.records
            .iter()
            .filter(|r| r.split == SplitRole::Test && !r.excluded)
    }
}

/// Fills the `{confidence_block}` placeholder of an MCQA template with the
/// option confidences at two decimals.
pub fn apply_self_aware(template: &str, block_template: &str, probs: &[f64]) -> Result<String> {
    const MARK: &str = "{confidence_block}";
    match template.matches(MARK).count() {
        1 => {}
        0 => return Err(EngineError::Protocol("prompt has no confidence block placeholder".into())),
        n => return Err(EngineError::Protocol(format!("prompt has {n} confidence block placeholders"))),
    }
    let block = render(block_template, &[("confidence_lines", &confidence_lines(probs))]);
    Ok(template.replacen(MARK, &block, 1))
}

/// Display permutation for wrong-aware prompting. The first maximum trades
/// places with the last minimum (or with the second-highest entry).
pub fn apply_wrong_aware(probs: &[f64], rule: SwapRule) -> Vec<f64> {
    let mut out = probs.to_vec();
    if probs.len() < 2 {
        return out;
    }
    let hi = stable_argmax(probs).expect("non-empty");
    let other = match rule {
        SwapRule::MaxMin => {
            let mut lo = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p <= probs[lo] {
                    lo = i;
                }
            }
            lo
        }
        SwapRule::MaxSecond => {
            let mut best: Option<usize> = None;
            for (i, p) in probs.iter().enumerate() {
                if i != hi && best.is_none_or(|b| *p > probs[b]) {
                    best = Some(i);
                }
            }
            best.expect("at least two entries")
        }
    };
    out.swap(hi, other);
    out
}

/// Accuracy, coverage and mean set size over `records` for one method.
pub fn aggregate(records: &[&InstanceRecord], method: ScoreMethod) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(EngineError::Protocol("no records to aggregate".into()));
    }
    let n = records.len() as f64;
    let mut correct = 0usize;
    let mut covered = 0usize;
    let mut size = 0usize;
    for r in records {
        let set = r.set(method).ok_or_else(|| {
            EngineError::Protocol(format!("record {} has no {} set", r.instance_id, method.name()))
        })?;
        correct += usize::from(r.correct);
        covered += usize::from(set.contains(r.gold_index));
        size += set.len();
    }
    Ok(Aggregate {
        method,
        n: records.len(),
        acc: correct as f64 / n,
        cr: covered as f64 / n,
        ss: size as f64 / n,
    })
}

fn aggregates_for(records: &[&InstanceRecord]) -> Result<Vec<Aggregate>> {
    ScoreMethod::ALL.iter().map(|&m| aggregate(records, m)).collect()
}

/// Splits the dataset by whether the no-retrieval baseline answered correctly.
pub fn knowledge_isolation_split(
    dataset: &[McqaInstance],
    baseline: &RunReport,
) -> Result<(Vec<String>, Vec<String>)> {
    if baseline.metadata.strategy != StrategyKind::NoRetrieve.name() {
        return Err(EngineError::Protocol(format!(
            "knowledge isolation needs a no-retrieval baseline, got {}",
            baseline.metadata.strategy
        )));
    }
    let by_id: BTreeMap<&str, &InstanceRecord> =
        baseline.records.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    let missing: Vec<&str> = dataset
        .iter()
        .map(|i| i.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(EngineError::Protocol(format!(
            "baseline is missing instances: {}",
            missing.join(", ")
        )));
    }
    let (mut correct, mut incorrect) = (Vec::new(), Vec::new());
    for inst in dataset {
        if by_id[inst.id.as_str()].correct {
            correct.push(inst.id.clone());
        } else {
            incorrect.push(inst.id.clone());
        }
    }
    Ok((correct, incorrect))
}

enum Outcome {
    Done(Box<InstanceRecord>),
    Failed(FailedRecord),
}

/// Runs `strategy` under `protocol` over every calibration and test
/// instance of `split`, calibrates on the calibration records and reports
/// test aggregates.
pub fn run_protocol(
    dataset: &[McqaInstance],
    split: &SplitSpec,
    strategy: StrategyKind,
    protocol: &ProtocolSpec,
    env: &Env,
    config: &EvalConfig,
) -> Result<RunReport> {
    protocol.validate()?;
    config.validate()?;
    match protocol.kind {
        ProtocolKind::DepthSweep => Err(EngineError::Protocol(
            "depth sweeps produce one report per k; use depth_sweep".into(),
        )),
        ProtocolKind::KnowledgeIsolation => {
            let baseline = run_single(dataset, split, StrategyKind::NoRetrieve, &ProtocolSpec::default(), env, config)?;
            let (correct, incorrect) = knowledge_isolation_split(dataset, &baseline)?;
            let mut report = run_single(dataset, split, strategy, protocol, env, config)?;
            report.subsets = vec![
                subset_report(&report, "llm_correct", correct)?,
                subset_report(&report, "llm_incorrect", incorrect)?,
            ];
            let n_sub: usize = report.subsets.iter().filter_map(|s| s.headline.as_ref().map(|h| h.n)).sum();
            report.invariants.push(InvariantCheck {
                name: "subsets_partition".into(),
                passed: n_sub == report.headline.n
                    && report.subsets.iter().map(|s| s.ids.len()).sum::<usize>() == dataset.len(),
                detail: format!("{} + {} ids", report.subsets[0].ids.len(), report.subsets[1].ids.len()),
            });
            Ok(report)
        }
        _ => run_single(dataset, split, strategy, protocol, env, config),
    }
}

fn subset_report(report: &RunReport, name: &str, ids: Vec<String>) -> Result<SubsetReport> {
    let members: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let recs: Vec<&InstanceRecord> = report
        .scored_test_records()
        .filter(|r| members.contains(r.instance_id.as_str()))
        .collect();
    let aggregates = if recs.is_empty() { Vec::new() } else { aggregates_for(&recs)? };
    let headline = Headline::from_aggregates(&aggregates);
    Ok(SubsetReport {
        name: name.to_string(),
        ids,
        aggregates,
        headline,
    })
}

fn run_single(
    dataset: &[McqaInstance],
    split: &SplitSpec,
    strategy: StrategyKind,
    protocol: &ProtocolSpec,
    env: &Env,
    config: &EvalConfig,
) -> Result<RunReport> {
    split.validate_against(dataset)?;
    if split.calibration_ids.is_empty() {
        return Err(EngineError::Protocol("calibration split is empty".into()));
    }
    if split.test_ids.is_empty() {
        return Err(EngineError::Protocol("test split is empty".into()));
    }
    let by_id: BTreeMap<&str, &McqaInstance> = dataset.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut jobs: Vec<(&McqaInstance, SplitRole)> = split
        .calibration_ids
        .iter()
        .map(|id| (by_id[id.as_str()], SplitRole::Calibration))
        .chain(split.test_ids.iter().map(|id| (by_id[id.as_str()], SplitRole::Test)))
        .collect();
    jobs.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let cfg = &config.strategy;
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|&(inst, role)| evaluate_instance(inst, role, strategy, protocol, env, cfg))
        .collect();

    let mut records = Vec::new();
    let mut quality = QualityManifest::default();
    for o in outcomes {
        match o {
            Outcome::Done(r) => records.push(*r),
            Outcome::Failed(f) => quality.failures.push(f),
        }
    }
    for r in &records {
        for f in &r.flags {
            *quality.flag_counts.entry(f.clone()).or_default() += 1;
        }
        if r.excluded {
            quality.excluded.push(ExcludedRecord {
                instance_id: r.instance_id.clone(),
                split: r.split,
                flags: r.flags.iter().filter(|f| is_degradation(f)).cloned().collect(),
            });
        }
    }

    let cal: Vec<ScoredInstance> = records
        .iter()
        .filter(|r| r.split == SplitRole::Calibration && !r.excluded)
        .map(|r| ScoredInstance::new(r.instance_id.clone(), r.distribution.clone(), r.gold_index))
        .collect::<Result<_, _>>()?;
    if cal.is_empty() {
        let cause = match quality.failures.first() {
            Some(f) => format!(" (first failure, {}: {})", f.instance_id, f.error),
            None => String::new(),
        };
        return Err(EngineError::Protocol(format!(
            "no usable calibration records after exclusions and failures{cause}"
        )));
    }
    let models: Vec<CalibrationModel> = ScoreMethod::ALL
        .iter()
        .map(|&m| calibrate(&cal, m, config.alpha))
        .collect::<Result<_, _>>()?;
    for r in records.iter_mut().filter(|r| r.split == SplitRole::Test) {
        r.sets = models
            .iter()
            .map(|m| {
                if config.force_nonempty {
                    predict_set_nonempty(m, &r.distribution)
                } else {
                    predict_set(m, &r.distribution)
                }
            })
            .collect();
    }

    let scored: Vec<&InstanceRecord> = records
        .iter()
        .filter(|r| r.split == SplitRole::Test && !r.excluded)
        .collect();
    if scored.is_empty() {
        return Err(EngineError::Protocol("no usable test records after exclusions and failures".into()));
    }
    let aggregates = aggregates_for(&scored)?;
    let headline = Headline::from_aggregates(&aggregates).expect("two methods");
    let invariants = check_invariants(&records, &models, &aggregates, config, protocol, &cal);

    let mut watermarks = Vec::new();
    if config.force_nonempty {
        watermarks.push("force_nonempty".to_string());
    }
    if cfg.scoring.one_hot_fallback {
        watermarks.push("one_hot_fallback".to_string());
    }
    if protocol.kind == ProtocolKind::WrongAware {
        watermarks.push(format!(
            "wrong_aware_swap={}: the swap partner of the top option is ambiguous; alternatives are max_min and max_second",
            match protocol.swap_rule {
                SwapRule::MaxMin => "max_min",
                SwapRule::MaxSecond => "max_second",
            }
        ));
    }
    if matches!(protocol.kind, ProtocolKind::SelfAware | ProtocolKind::WrongAware) {
        watermarks.push("prior_pass=fresh_retrieval".to_string());
    }
    if strategy == StrategyKind::Fusion && cfg.fusion_queries == 1 {
        watermarks.push("fusion_single_query=naive".to_string());
    }

    let datasets: BTreeSet<String> = dataset.iter().map(|i| i.corpus_ref.clone()).collect();
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        metadata: RunMetadata {
            strategy: strategy.name().to_string(),
            strategy_label: strategy.label().to_string(),
            protocol: protocol.kind,
            k: cfg.k,
            alpha: config.alpha,
            config_hash: json_hash(&(strategy.name(), protocol, config)),
            seed: cfg.seed,
            split_seed: split.seed,
            providers: env.providers.identities(),
            datasets: datasets.into_iter().collect(),
            n_calibration: split.calibration_ids.len(),
            n_test: split.test_ids.len(),
            watermarks,
        },
        calibration: models,
        records,
        aggregates,
        headline,
        subsets: Vec::new(),
        quality,
        invariants,
    })
}

fn evaluate_instance(
    inst: &McqaInstance,
    role: SplitRole,
    strategy: StrategyKind,
    protocol: &ProtocolSpec,
    env: &Env,
    cfg: &StrategyConfig,
) -> Outcome {
    let fail = |error: String, steps: Vec<TraceStep>| {
        Outcome::Failed(FailedRecord {
            instance_id: inst.id.clone(),
            split: role,
            error,
            steps,
        })
    };
    let prior = match protocol.kind {
        ProtocolKind::SelfAware | ProtocolKind::WrongAware => {
            match run_strategy(strategy, inst, env, cfg, &RunContext::default()) {
                Ok(t) => {
                    let probs = t.final_distribution.probs();
                    let displayed = if protocol.kind == ProtocolKind::WrongAware {
                        apply_wrong_aware(probs, protocol.swap_rule)
                    } else {
                        probs.to_vec()
                    };
                    Some(PriorPass {
                        distribution_hash: json_hash(&t.final_distribution),
                        trace_hash: json_hash(&t),
                        distribution: t.final_distribution,
                        displayed,
                    })
                }
                Err(f) => return fail(format!("prior pass missing: {}", f.error), f.steps),
            }
        }
        _ => None,
    };
    let injection = (protocol.kind == ProtocolKind::IrrelevantContext).then(|| Injection {
        count: protocol.irrelevant_count,
        fresh_per_step: protocol.irrelevant_fresh_per_step,
        seed: derive_seed(cfg.seed, &["irrelevant"]),
    });
    let ctx = RunContext {
        displayed: prior.as_ref().map(|p| p.displayed.as_slice()),
        injection,
    };
    match run_strategy(strategy, inst, env, cfg, &ctx) {
        Ok(trace) => {
            let dist = trace.final_distribution.clone();
            let argmax = stable_argmax(dist.probs()).expect("non-empty distribution");
            let excluded = trace.flags.iter().any(|f| is_degradation(f));
            Outcome::Done(Box::new(InstanceRecord {
                instance_id: inst.id.clone(),
                split: role,
                gold_index: inst.answer_index,
                distribution_hash: json_hash(&dist),
                distribution: dist,
                correct: argmax == inst.answer_index,
                sets: Vec::new(),
                excluded,
                flags: trace.flags.clone(),
                trace_hash: json_hash(&trace),
                trace,
                prior,
            }))
        }
        Err(f) => fail(f.error.to_string(), f.steps),
    }
}

/// Lower edge of the coverage band `1 − α − z·sqrt(α(1−α)/n)`.
pub fn coverage_floor(alpha: f64, n: usize, sigmas: f64) -> f64 {
    1.0 - alpha - sigmas * (alpha * (1.0 - alpha) / n as f64).sqrt()
}

fn check_invariants(
    records: &[InstanceRecord],
    models: &[CalibrationModel],
    aggregates: &[Aggregate],
    config: &EvalConfig,
    protocol: &ProtocolSpec,
    cal: &[ScoredInstance],
) -> Vec<InvariantCheck> {
    let mut checks = Vec::new();
    for a in aggregates {
        let floor = coverage_floor(config.alpha, a.n, config.cr_floor_sigmas);
        checks.push(InvariantCheck {
            name: format!("cr_floor_{}", a.method.name().to_ascii_lowercase()),
            passed: a.cr >= floor,
            detail: format!("cr {:.4} vs floor {:.4} over {} records", a.cr, floor, a.n),
        });
    }
    if let Some(lac) = models.iter().find(|m| m.method == ScoreMethod::Lac) {
        if lac.q_hat.finite().is_some() {
            let hits = cal
                .iter()
                .filter(|s| predict_set(lac, &s.distribution).contains(s.gold_index))
                .count();
            let cr = hits as f64 / cal.len() as f64;
            checks.push(InvariantCheck {
                name: "lac_resubstitution".into(),
                passed: cr >= 1.0 - config.alpha,
                detail: format!("calibration cr {cr:.4}"),
            });
        }
    }
    if matches!(protocol.kind, ProtocolKind::SelfAware | ProtocolKind::WrongAware) {
        let bad: Vec<&str> = records
            .iter()
            .filter(|r| {
                let Some(p) = &r.prior else { return true };
                let expected = if protocol.kind == ProtocolKind::WrongAware {
                    apply_wrong_aware(p.distribution.probs(), protocol.swap_rule)
                } else {
                    p.distribution.probs().to_vec()
                };
                json_hash(&p.distribution) != p.distribution_hash || p.displayed != expected
            })
            .map(|r| r.instance_id.as_str())
            .collect();
        checks.push(InvariantCheck {
            name: "displayed_confidence".into(),
            passed: bad.is_empty(),
            detail: if bad.is_empty() {
                format!("{} records", records.len())
            } else {
                format!("mismatch: {}", bad.join(", "))
            },
        });
    }
    checks
}

/// One depth of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRun {
    pub k: usize,
    pub report: Option<RunReport>,
    pub error: Option<String>,
    /// Hash of the sorted retrieved-id sets of every record.
    pub retrieved_digest: String,
    pub distinct_retrieved: usize,
}

/// A full protocol run per `k`, everything else fixed. A failure at one
/// depth is recorded on that entry only.
pub fn depth_sweep(
    dataset: &[McqaInstance],
    split: &SplitSpec,
    strategy: StrategyKind,
    protocol: &ProtocolSpec,
    env: &Env,
    config: &EvalConfig,
) -> Result<Vec<DepthRun>> {
    let sweep = ProtocolSpec {
        kind: ProtocolKind::DepthSweep,
        ..protocol.clone()
    };
    sweep.validate()?;
    let base = ProtocolSpec {
        kind: ProtocolKind::Normal,
        ..protocol.clone()
    };
    let mut runs = Vec::with_capacity(sweep.k_list.len());
    for &k in &sweep.k_list {
        let mut cfg = config.clone();
        cfg.strategy.k = k;
        match run_protocol(dataset, split, strategy, &base, env, &cfg) {
            Ok(mut report) => {
                report.metadata.protocol = ProtocolKind::DepthSweep;
                let sets: Vec<(String, Vec<String>)> = report
                    .records
                    .iter()
                    .map(|r| {
                        let mut ids: Vec<String> = r.trace.retrieved_ids().into_iter().map(String::from).collect();
                        ids.sort();
                        (r.instance_id.clone(), ids)
                    })
                    .collect();
                let distinct: BTreeSet<&String> = sets.iter().flat_map(|(_, ids)| ids).collect();
                let digest = json_hash(&sets);
                log::info!("depth k={k}: {} distinct retrieved ids, digest {}", distinct.len(), &digest[..12]);
                runs.push(DepthRun {
                    k,
                    distinct_retrieved: distinct.len(),
                    retrieved_digest: digest,
                    report: Some(report),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("depth k={k} failed: {e}");
                runs.push(DepthRun {
                    k,
                    report: None,
                    error: Some(e.to_string()),
                    retrieved_digest: String::new(),
                    distinct_retrieved: 0,
                });
            }
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use uragc_core::Threshold;

    fn record(gold: usize, probs: Vec<f64>, members: &[usize]) -> InstanceRecord {
        let dist = OptionDistribution::new(probs).unwrap();
        let trace = StrategyTrace {
            instance_id: "x".into(),
            steps: Vec::new(),
            final_distribution: dist.clone(),
            flags: BTreeSet::new(),
        };
        let sets = ScoreMethod::ALL
            .iter()
            .map(|&method| PredictionSet {
                method,
                threshold: Threshold::Unbounded,
                members: members.iter().copied().collect(),
            })
            .collect();
        InstanceRecord {
            instance_id: "x".into(),
            split: SplitRole::Test,
            gold_index: gold,
            correct: dist.argmax() == gold,
            distribution_hash: json_hash(&dist),
            distribution: dist,
            sets,
            excluded: false,
            flags: BTreeSet::new(),
            trace_hash: String::new(),
            trace,
            prior: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = record(0, vec![0.6, 0.3, 0.1], &[0]);
        let b = record(0, vec![0.2, 0.5, 0.3], &[1, 2, 1]);
        let agg = aggregate(&[&a, &b], ScoreMethod::Lac).unwrap();
        assert_eq!((agg.cr, agg.acc), (0.5, 0.5));
        assert_eq!(agg.ss, 1.5);
        let c = record(1, vec![0.1, 0.8, 0.1], &[0, 1, 2]);
        let agg = aggregate(&[&a, &c], ScoreMethod::Aps).unwrap();
        assert_eq!((agg.acc, agg.cr, agg.ss), (1.0, 1.0, 2.0));
        assert!(aggregate(&[], ScoreMethod::Lac).is_err());
    }

    #[test]
    fn wrong_aware_examples() {
        assert_eq!(apply_wrong_aware(&[0.7, 0.2, 0.1], SwapRule::MaxMin), [0.1, 0.2, 0.7]);
        assert_eq!(apply_wrong_aware(&[0.25; 4], SwapRule::MaxMin), [0.25; 4]);
        assert_eq!(apply_wrong_aware(&[0.6, 0.4], SwapRule::MaxMin), [0.4, 0.6]);
        assert_eq!(apply_wrong_aware(&[0.1, 0.5, 0.3, 0.1], SwapRule::MaxMin), [0.1, 0.1, 0.3, 0.5]);
        assert_eq!(apply_wrong_aware(&[0.5, 0.2, 0.3], SwapRule::MaxSecond), [0.3, 0.2, 0.5]);
    }

    #[test]
    fn wrong_aware_tie_rule_moves_mass() {
        let tied = [0.5, 0.5];
        // first max is index 0, last min is index 1
        let mut swapped = tied.to_vec();
        swapped.swap(0, 1);
        assert_eq!(apply_wrong_aware(&tied, SwapRule::MaxMin), swapped);
    }

    #[test]
    fn self_aware_block() {
        let prompts = crate::prompts::PromptSet::default();
        let out = apply_self_aware(prompts.get("mcqa"), prompts.get("confidence_block"), &[0.7, 0.2, 0.1]).unwrap();
        assert!(out.contains("A. 0.70\nB. 0.20\nC. 0.10"));
        assert_eq!(out.matches("Knowing that your previous answer").count(), 1);
        assert!(out.contains("{question}"));
        assert!(apply_self_aware("no block", "{confidence_lines}", &[1.0]).is_err());
        assert!(apply_self_aware("{confidence_block}{confidence_block}", "x", &[1.0]).is_err());
    }

    #[test]
    fn floor_values() {
        let f = coverage_floor(0.1, 10_000, 3.0);
        assert!((f - 0.891).abs() < 1e-12);
    }

    #[test]
    fn protocol_validation() {
        let mut p = ProtocolSpec::new(ProtocolKind::DepthSweep);
        assert!(p.validate().is_ok());
        p.k_list = vec![10, 10];
        assert!(p.validate().is_err());
        p.k_list.clear();
        assert!(p.validate().is_err());
        let mut p = ProtocolSpec::new(ProtocolKind::IrrelevantContext);
        p.irrelevant_count = 0;
        assert!(p.validate().is_err());
        assert_eq!("wrong-aware".parse::<ProtocolKind>().unwrap(), ProtocolKind::WrongAware);
    }
}
