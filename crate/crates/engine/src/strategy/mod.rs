//! Retrieval strategies as policies over one MCQA instance. Each run
//! records every generation, search and scoring call in a
//! [`StrategyTrace`] that ends in an option distribution.

mod config;
mod env;
pub mod raptor;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uragc_core::retrieval::{dot, rrf_fuse, sample_irrelevant, search};
use uragc_core::{option_letter, McqaInstance, OptionDistribution, StepAction, StrategyTrace, TraceStep};
use uragc_providers::{embed_one, score_options, ChatMessage, ChatRequest, ScoredOptions};

pub use config::{RaptorConfig, ReducerKind, StrategyConfig, StrategyKind};
pub use env::{CorpusBundle, Env, EMBED_BATCH};
pub use raptor::{build_raptor_tree, RaptorNode, RaptorTree};

use crate::context::{concat_truncated, greedy_whole, Context};
use crate::error::{EngineError, ProviderContext, Result};
use crate::prompts::render_options;
use crate::util::derive_seed;

pub const FLAG_TRUNCATED: &str = "context_truncated";
pub const FLAG_FUSION_FALLBACK: &str = "fusion_query_fallback";
pub const FLAG_HYDE_FALLBACK: &str = "hyde_question_fallback";
pub const FLAG_REPLUG_DROPPED: &str = "replug_doc_dropped";
pub const FLAG_SELFRAG_MALFORMED: &str = "selfrag_reflection_malformed";

/// Flags that only describe the run and do not mark degraded scoring.
pub const INFORMATIONAL_FLAGS: &[&str] = &[FLAG_TRUNCATED];

pub fn is_degradation(flag: &str) -> bool {
    !INFORMATIONAL_FLAGS.contains(&flag)
}

/// Irrelevant documents added to every retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub count: usize,
    /// Draw a new sample at each retrieval step instead of reusing the first.
    pub fresh_per_step: bool,
    pub seed: u64,
}

/// Per-run modifiers applied by evaluation protocols.
#[derive(Debug, Clone, Default)]
pub struct RunContext<'a> {
    /// Confidence values shown in the prompt (self-aware / wrong-aware).
    pub displayed: Option<&'a [f64]>,
    pub injection: Option<Injection>,
}

/// A failed run with the steps completed before the failure.
#[derive(Debug)]
pub struct StrategyFailure {
    pub error: EngineError,
    pub steps: Vec<TraceStep>,
}

impl std::fmt::Display for StrategyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.steps.len())
    }
}

#[derive(Debug, Clone)]
struct Retrieved {
    ids: Vec<String>,
    scores: Vec<f64>,
    injected: Vec<String>,
}

impl Retrieved {
    fn all(&self) -> Vec<String> {
        self.ids.iter().chain(&self.injected).cloned().collect()
    }
}

struct Runner<'a> {
    env: &'a Env,
    cfg: &'a StrategyConfig,
    ctx: &'a RunContext<'a>,
    inst: &'a McqaInstance,
    steps: Vec<TraceStep>,
    flags: BTreeSet<String>,
    searches: usize,
    fixed_injection: Option<Vec<String>>,
}

impl<'a> Runner<'a> {
    fn bundle(&self) -> Result<&'a Arc<CorpusBundle>> {
        self.env.corpus(&self.inst.corpus_ref)
    }

    fn embed_query(&self, text: &str) -> Result<Vec<f64>> {
        embed_one(self.env.providers.embed.as_ref(), text).context(|| format!("instance {}: embedding query", self.inst.id))
    }

    fn chat(&self, request: ChatRequest) -> Result<String> {
        let resp = self
            .env
            .providers
            .chat
            .chat(&request)
            .context(|| format!("instance {}", self.inst.id))?;
        Ok(resp.text)
    }

    fn generate(&self, prompt: &str, max_tokens: u32) -> Result<String> {
        self.chat(ChatRequest::user(prompt).temperature(self.cfg.temperature).max_tokens(max_tokens))
    }

    fn score(&mut self, prompt: &str) -> Result<ScoredOptions> {
        let scored = score_options(
            self.env.providers.chat.as_ref(),
            prompt,
            self.inst.num_options(),
            &self.cfg.scoring,
        )
        .context(|| format!("instance {}: scoring options", self.inst.id))?;
        self.flags.extend(scored.flags.iter().map(|f| f.to_string()));
        Ok(scored)
    }

    fn score_step(&mut self, prompt: String) -> Result<OptionDistribution> {
        let scored = self.score(&prompt)?;
        let mut step = TraceStep::new(StepAction::Score, self.inst.question.clone());
        step.prompt = prompt;
        step.completion = scored.completion;
        self.steps.push(step);
        Ok(scored.distribution)
    }

    fn mcqa_prompt(&self, context: Option<&str>) -> String {
        let block = self.env.prompts.confidence_block(self.ctx.displayed);
        let options = render_options(self.inst);
        let vars = [
            ("confidence_block", block.as_str()),
            ("question", self.inst.question.as_str()),
            ("options", options.as_str()),
            ("context", context.unwrap_or("")),
        ];
        match context {
            Some(_) => self.env.prompts.fill("mcqa", &vars),
            None => self.env.prompts.fill("mcqa_no_context", &vars),
        }
    }

    fn injected_for(&mut self, exclude: &BTreeSet<String>) -> Result<Vec<String>> {
        let Some(inj) = self.ctx.injection else {
            return Ok(Vec::new());
        };
        let bundle = self.bundle()?;
        if inj.fresh_per_step || self.fixed_injection.is_none() {
            let step = if inj.fresh_per_step { self.searches.to_string() } else { String::new() };
            let seed = derive_seed(inj.seed, &[&self.inst.id, "inject", &step]);
            let sample = sample_irrelevant(&bundle.index, exclude, inj.count, seed)?;
            if inj.fresh_per_step {
                return Ok(sample);
            }
            self.fixed_injection = Some(sample);
        }
        Ok(self
            .fixed_injection
            .iter()
            .flatten()
            .filter(|id| !exclude.contains(*id))
            .cloned()
            .collect())
    }

    fn search(&mut self, query_text: &str, query: &[f64], k: usize) -> Result<Retrieved> {
        let bundle = self.bundle()?;
        let ranking = search(&bundle.index, query, k, query_text)?;
        let exclude: BTreeSet<String> = ranking.ids.iter().cloned().collect();
        let injected = self.injected_for(&exclude)?;
        self.searches += 1;
        Ok(Retrieved {
            ids: ranking.ids,
            scores: ranking.scores,
            injected,
        })
    }

    fn search_step(&mut self, query_text: &str, query: &[f64], k: usize) -> Result<Retrieved> {
        let r = self.search(query_text, query, k)?;
        let mut step = TraceStep::new(StepAction::Search, query_text);
        step.retrieved = r.all();
        step.injected = r.injected.clone();
        self.steps.push(step);
        Ok(r)
    }

    fn passages(&self, ids: &[String]) -> Result<Vec<(String, String)>> {
        let bundle = self.bundle()?;
        ids.iter()
            .map(|id| {
                bundle
                    .text(id)
                    .map(|t| (id.clone(), t))
                    .ok_or_else(|| EngineError::Strategy(format!("document {id:?} missing from corpus")))
            })
            .collect()
    }

    fn assemble(&mut self, ids: &[String]) -> Result<Context> {
        let ctx = concat_truncated(&self.passages(ids)?, self.cfg.max_context_tokens);
        if ctx.truncated {
            self.flags.insert(FLAG_TRUNCATED.to_string());
        }
        Ok(ctx)
    }

    fn finish(self, distribution: OptionDistribution) -> StrategyTrace {
        StrategyTrace {
            instance_id: self.inst.id.clone(),
            steps: self.steps,
            final_distribution: distribution,
            flags: self.flags,
        }
    }
}

/// Runs `kind` over one instance.
pub fn run_strategy(
    kind: StrategyKind,
    instance: &McqaInstance,
    env: &Env,
    cfg: &StrategyConfig,
    ctx: &RunContext<'_>,
) -> Result<StrategyTrace, StrategyFailure> {
    let mut r = Runner {
        env,
        cfg,
        ctx,
        inst: instance,
        steps: Vec::new(),
        flags: BTreeSet::new(),
        searches: 0,
        fixed_injection: None,
    };
    let outcome = match kind {
        StrategyKind::NoRetrieve => no_retrieve(&mut r),
        StrategyKind::Naive => naive(&mut r),
        StrategyKind::Fusion => fusion(&mut r),
        StrategyKind::Hyde => hyde(&mut r),
        StrategyKind::Raptor => raptor_run(&mut r),
        StrategyKind::Replug => replug(&mut r),
        StrategyKind::SelfRag => self_rag(&mut r),
        StrategyKind::Rat => rat(&mut r),
    };
    match outcome {
        Ok(dist) => {
            if dist.len() != instance.num_options() {
                return Err(StrategyFailure {
                    error: EngineError::Strategy(format!(
                        "distribution has {} entries for {} options",
                        dist.len(),
                        instance.num_options()
                    )),
                    steps: r.steps,
                });
            }
            Ok(r.finish(dist))
        }
        Err(error) => Err(StrategyFailure { error, steps: r.steps }),
    }
}

fn no_retrieve(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    let prompt = r.mcqa_prompt(None);
    r.score_step(prompt)
}

fn naive(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    let q = r.embed_query(&r.inst.question)?;
    let question = r.inst.question.clone();
    let ret = r.search_step(&question, &q, r.cfg.k)?;
    let ctx = r.assemble(&ret.all())?;
    let prompt = r.mcqa_prompt(Some(&ctx.text));
    r.score_step(prompt)
}

/// First non-empty line, without a leading `Query:` label or quotes.
fn clean_query(text: &str) -> String {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line
        .strip_prefix("Query:")
        .or_else(|| line.strip_prefix("query:"))
        .unwrap_or(line);
    line.trim().trim_matches('"').trim().to_string()
}

fn fusion(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    if r.cfg.fusion_queries == 1 {
        return naive(r);
    }
    let systems = r.env.prompts.pool("fusion_system");
    let users = r.env.prompts.pool("fusion_user");
    let mut queries: Vec<(String, String, String)> = vec![(r.inst.question.clone(), String::new(), String::new())];
    for i in 1..r.cfg.fusion_queries {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(r.cfg.seed, &[&r.inst.id, "fusion", &i.to_string()]));
        let system = systems[rng.random_range(0..systems.len())].to_string();
        let user = crate::prompts::render(users[rng.random_range(0..users.len())], &[("question", &r.inst.question)]);
        let request = ChatRequest::new(vec![ChatMessage::system(system), ChatMessage::user(user)])
            .temperature(r.cfg.fusion_temperature)
            .max_tokens(64);
        let transcript = request.transcript();
        match r.chat(request) {
            Ok(text) if !clean_query(&text).is_empty() => queries.push((clean_query(&text), transcript, text)),
            Ok(_) => {
                r.flags.insert(FLAG_FUSION_FALLBACK.to_string());
            }
            Err(e) => {
                log::warn!("{e}; continuing with fewer queries");
                r.flags.insert(FLAG_FUSION_FALLBACK.to_string());
            }
        }
    }
    let mut rankings = Vec::with_capacity(queries.len());
    let mut injected: Vec<String> = Vec::new();
    for (query, prompt, completion) in queries {
        let v = r.embed_query(&query)?;
        let ret = r.search(&query, &v, r.cfg.k)?;
        let mut step = TraceStep::new(StepAction::Search, query.clone());
        step.retrieved = ret.all();
        step.injected = ret.injected.clone();
        step.prompt = prompt;
        step.completion = completion;
        r.steps.push(step);
        for id in &ret.injected {
            if !injected.contains(id) {
                injected.push(id.clone());
            }
        }
        rankings.push(uragc_core::Ranking {
            query,
            ids: ret.ids,
            scores: ret.scores,
        });
    }
    let fused: uragc_core::Ranking = rrf_fuse(&rankings, r.cfg.fusion_smoothing_k)?;
    let mut step = TraceStep::new(StepAction::Fuse, fused.query.clone());
    step.retrieved = fused.ids.clone();
    r.steps.push(step);
    let mut ids = fused.ids;
    ids.extend(injected.into_iter().filter(|id| !rankings.iter().any(|rk| rk.ids.contains(id))));
    let ctx = r.assemble(&ids)?;
    let prompt = r.mcqa_prompt(Some(&ctx.text));
    r.score_step(prompt)
}

fn hyde(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    let prompt = r.env.prompts.fill("hyde", &[("question", &r.inst.question)]);
    let mut passage = r.generate(&prompt, 256)?;
    if passage.trim().is_empty() {
        passage = r.generate(&prompt, 256)?;
    }
    let mut step = TraceStep::new(StepAction::Generate, r.inst.question.clone());
    step.prompt = prompt;
    step.completion = passage.clone();
    r.steps.push(step);
    let query = if passage.trim().is_empty() {
        r.flags.insert(FLAG_HYDE_FALLBACK.to_string());
        r.inst.question.clone()
    } else {
        passage.trim().to_string()
    };
    let v = r.embed_query(&query)?;
    let ret = r.search_step(&query, &v, r.cfg.k)?;
    let ctx = r.assemble(&ret.all())?;
    let prompt = r.mcqa_prompt(Some(&ctx.text));
    r.score_step(prompt)
}

/// `Σ_d λ_d p_d` with `λ = softmax(similarities)`.
pub fn replug_mixture(similarities: &[f64], dists: &[OptionDistribution]) -> Result<OptionDistribution> {
    if similarities.is_empty() || similarities.len() != dists.len() {
        return Err(EngineError::Strategy(format!(
            "{} similarities for {} distributions",
            similarities.len(),
            dists.len()
        )));
    }
    let k = dists[0].len();
    if dists.iter().any(|d| d.len() != k) {
        return Err(EngineError::Strategy("distributions differ in length".into()));
    }
    let lambda = replug_weights(similarities);
    let mixed: Vec<f64> = (0..k)
        .map(|c| {
            let v: f64 = dists.iter().zip(&lambda).map(|(d, l)| l * d.probs()[c]).sum();
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(OptionDistribution::new(mixed)?)
}

/// Softmax over similarities, shifted by the maximum.
pub fn replug_weights(similarities: &[f64]) -> Vec<f64> {
    let m = similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = similarities.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn replug(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    let q = r.embed_query(&r.inst.question)?;
    let question = r.inst.question.clone();
    let ret = r.search_step(&question, &q, r.cfg.k)?;
    let bundle = r.bundle()?;
    let mut sims = ret.scores.clone();
    for id in &ret.injected {
        let v = bundle.index.vector(id).expect("sampled from the index");
        sims.push(dot(v, &q));
    }
    let mut kept_sims = Vec::new();
    let mut dists = Vec::new();
    let mut kept_ids = Vec::new();
    for (id, sim) in ret.all().into_iter().zip(sims) {
        let passage = r.passages(std::slice::from_ref(&id))?;
        let ctx = concat_truncated(&passage, r.cfg.max_context_tokens);
        if ctx.truncated {
            r.flags.insert(FLAG_TRUNCATED.to_string());
        }
        let prompt = r.mcqa_prompt(Some(&ctx.text));
        match r.score(&prompt) {
            Ok(scored) => {
                let mut step = TraceStep::new(StepAction::Score, id.clone());
                step.prompt = prompt;
                step.completion = scored.completion;
                r.steps.push(step);
                kept_sims.push(sim);
                dists.push(scored.distribution);
                kept_ids.push(id);
            }
            Err(e) => {
                log::warn!("REPLUG dropping {id}: {e}");
                r.flags.insert(FLAG_REPLUG_DROPPED.to_string());
            }
        }
    }
    if dists.is_empty() {
        return Err(EngineError::Strategy(format!(
            "instance {}: every REPLUG document failed to score",
            r.inst.id
        )));
    }
    let weights = replug_weights(&kept_sims);
    let mut step = TraceStep::new(StepAction::Fuse, "replug");
    step.retrieved = kept_ids;
    step.completion = serde_json::to_string(&weights).expect("weights serialize");
    r.steps.push(step);
    replug_mixture(&kept_sims, &dists)
}

/// Scores read off one reflection judgment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectionScores {
    pub s_rel: f64,
    pub s_sup: f64,
    pub s_use: f64,
}

impl ReflectionScores {
    pub const MALFORMED: ReflectionScores = ReflectionScores {
        s_rel: 0.5,
        s_sup: 0.5,
        s_use: 0.6,
    };

    pub fn composite(&self, w: [f64; 3]) -> f64 {
        w[0] * self.s_rel + w[1] * self.s_sup + w[2] * self.s_use
    }
}

/// Maps reflection tokens to scores. Missing judgments score 0.5; output
/// with no recognizable judgment at all yields `None`.
pub fn parse_reflection(text: &str) -> Option<ReflectionScores> {
    let t = text.to_ascii_lowercase();
    let rel = if t.contains("irrelevant") {
        Some(0.0)
    } else if t.contains("relevant") {
        Some(1.0)
    } else {
        None
    };
    let sup = if t.contains("fully_supported") || t.contains("fully supported") {
        Some(1.0)
    } else if t.contains("partially_supported") || t.contains("partially supported") {
        Some(0.7)
    } else if t.contains("no_support") || t.contains("no support") {
        Some(0.0)
    } else {
        None
    };
    let utility = t.find("utility").and_then(|at| {
        t[at + "utility".len()..]
            .chars()
            .find(|c| !matches!(c, ':' | ' ' | '=' | '|' | '<' | '>' | '['))
            .and_then(|c| c.to_digit(10))
            .filter(|d| (1..=5).contains(d))
            .map(|d| f64::from(d) / 5.0)
    });
    if rel.is_none() && sup.is_none() && utility.is_none() {
        return None;
    }
    Some(ReflectionScores {
        s_rel: rel.unwrap_or(0.5),
        s_sup: sup.unwrap_or(0.5),
        s_use: utility.unwrap_or(0.5),
    })
}

/// Index of the highest composite score; ties go to the lowest index.
pub fn select_candidate(scores: &[ReflectionScores], weights: [f64; 3]) -> Option<usize> {
    let composite: Vec<f64> = scores.iter().map(|s| s.composite(weights)).collect();
    uragc_core::stable_argmax(&composite).ok()
}

fn self_rag(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    let prompt = r.env.prompts.fill("selfrag_decide", &[("question", &r.inst.question)]);
    let decision = r.generate(&prompt, 8)?;
    let mut step = TraceStep::new(StepAction::Decide, r.inst.question.clone());
    step.prompt = prompt;
    step.completion = decision.clone();
    r.steps.push(step);
    let lower = decision.to_ascii_lowercase();
    if lower.contains("no_retrieve") || lower.contains("no retrieve") {
        return no_retrieve(r);
    }
    let q = r.embed_query(&r.inst.question)?;
    let question = r.inst.question.clone();
    let ret = r.search_step(&question, &q, r.cfg.selfrag_passages)?;
    let all = ret.all();
    let top: Vec<String> = all.iter().take(r.cfg.selfrag_top).cloned().collect();
    let configs: [Option<&[String]>; 3] = [None, Some(&top), Some(&all)];
    let mut candidates = Vec::with_capacity(3);
    let mut scores = Vec::with_capacity(3);
    for (m, ids) in configs.into_iter().enumerate() {
        let ctx = match ids {
            None => None,
            Some(ids) => Some(r.assemble(ids)?),
        };
        let prompt = r.mcqa_prompt(ctx.as_ref().map(|c| c.text.as_str()));
        let dist = r.score_step(prompt)?;
        let best = dist.argmax();
        let answer = format!("{}. {}", option_letter(best), r.inst.options[best]);
        let context = ctx.as_ref().map_or("(none)", |c| c.text.as_str());
        let prompt = r.env.prompts.fill(
            "selfrag_reflect",
            &[("context", context), ("question", &r.inst.question), ("answer", &answer)],
        );
        let judgment = r.generate(&prompt, 32)?;
        let s = parse_reflection(&judgment).unwrap_or_else(|| {
            r.flags.insert(FLAG_SELFRAG_MALFORMED.to_string());
            ReflectionScores::MALFORMED
        });
        let mut step = TraceStep::new(StepAction::Reflect, format!("candidate {m}"));
        step.prompt = prompt;
        step.completion = judgment;
        r.steps.push(step);
        candidates.push(dist);
        scores.push(s);
    }
    let best = select_candidate(&scores, r.cfg.selfrag_weights).expect("three candidates");
    Ok(candidates.swap_remove(best))
}

fn rat(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    let options = render_options(r.inst);
    let prompt = r
        .env
        .prompts
        .fill("rat_draft", &[("question", &r.inst.question), ("options", &options)]);
    let mut draft = r.generate(&prompt, 256)?;
    let mut step = TraceStep::new(StepAction::Generate, r.inst.question.clone());
    step.prompt = prompt;
    step.completion = draft.clone();
    r.steps.push(step);
    for _ in 0..r.cfg.rat_iterations {
        let qprompt = r
            .env
            .prompts
            .fill("rat_query", &[("question", &r.inst.question), ("draft", &draft)]);
        let mut query = clean_query(&r.generate(&qprompt, 64)?);
        if query.is_empty() {
            query = r.inst.question.clone();
        }
        let v = r.embed_query(&query)?;
        let ret = r.search(&query, &v, r.cfg.k)?;
        let ctx = r.assemble(&ret.all())?;
        let rprompt = r.env.prompts.fill(
            "rat_revise",
            &[("context", &ctx.text), ("question", &r.inst.question), ("draft", &draft)],
        );
        let revised = r.generate(&rprompt, 256)?;
        let mut step = TraceStep::new(StepAction::Search, query);
        step.retrieved = ret.all();
        step.injected = ret.injected;
        step.prompt = rprompt;
        step.completion = revised.clone();
        r.steps.push(step);
        if !revised.trim().is_empty() {
            draft = revised;
        }
    }
    let block = r.env.prompts.confidence_block(r.ctx.displayed);
    let prompt = r.env.prompts.fill(
        "mcqa_draft",
        &[
            ("confidence_block", &block),
            ("draft", draft.trim()),
            ("question", &r.inst.question),
            ("options", &options),
        ],
    );
    r.score_step(prompt)
}

fn raptor_run(r: &mut Runner<'_>) -> Result<OptionDistribution> {
    let bundle = r.bundle()?;
    let tree = bundle.raptor_tree(&r.env.providers, &r.env.prompts, r.cfg)?;
    r.flags.extend(tree.flags.iter().cloned());
    let q = r.embed_query(&r.inst.question)?;
    let ranked: Vec<(String, String)> = tree
        .rank(&q)
        .into_iter()
        .map(|(_, n)| (n.id.clone(), n.text.clone()))
        .collect();
    let picked = greedy_whole(&ranked, r.cfg.max_context_tokens);
    let sources: BTreeSet<String> = picked
        .included
        .iter()
        .filter_map(|id| tree.node(id).and_then(|n| n.source.clone()))
        .collect();
    let injected = r.injected_for(&sources)?;
    r.searches += 1;
    let mut step = TraceStep::new(StepAction::Search, r.inst.question.clone());
    step.retrieved = picked.included.iter().chain(&injected).cloned().collect();
    step.injected = injected.clone();
    r.steps.push(step);
    let text = if injected.is_empty() {
        picked.text
    } else {
        let mut passages: Vec<(String, String)> = picked
            .included
            .iter()
            .filter_map(|id| tree.node(id).map(|n| (n.id.clone(), n.text.clone())))
            .collect();
        passages.extend(r.passages(&injected)?);
        let ctx = concat_truncated(&passages, r.cfg.max_context_tokens);
        if ctx.truncated {
            r.flags.insert(FLAG_TRUNCATED.to_string());
        }
        ctx.text
    };
    let prompt = r.mcqa_prompt(Some(&text));
    r.score_step(prompt)
}
