//! Distractor forging: generate wrong-but-plausible options, gate them by
//! NLI entailment against the correct answer and regenerate until the
//! question is difficult or the iteration cap is reached.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uragc_core::retrieval::search;
use uragc_core::{normalize_ws, Document, McqaInstance};
use uragc_providers::{embed_one, nli, ChatProvider, ChatRequest, NliProvider};

use crate::error::{EngineError, ProviderContext, Result};
use crate::prompts::PromptSet;
use crate::strategy::Env;
use crate::util::derive_seed;

pub const TAG_FORGED: &str = "forged";
pub const TAG_NOT_DIFFICULT: &str = "not_difficult";
pub const DEFAULT_CORPUS_REF: &str = "forged";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimilarityType {
    #[serde(rename = "role-similar")]
    Role,
    #[serde(rename = "time-similar")]
    Time,
    #[serde(rename = "lexical-similar")]
    Lexical,
    #[serde(rename = "topic-similar")]
    Topic,
}

impl SimilarityType {
    pub const ALL: [SimilarityType; 4] = [
        SimilarityType::Role,
        SimilarityType::Time,
        SimilarityType::Lexical,
        SimilarityType::Topic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityType::Role => "role-similar",
            SimilarityType::Time => "time-similar",
            SimilarityType::Lexical => "lexical-similar",
            SimilarityType::Topic => "topic-similar",
        }
    }

    /// Accepts `role-similar`, `role similar`, `Role` and similar spellings.
    pub fn parse(s: &str) -> Option<SimilarityType> {
        let t = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        let t = t.strip_suffix("-similar").unwrap_or(&t);
        SimilarityType::ALL
            .into_iter()
            .find(|k| k.name().strip_suffix("-similar") == Some(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeMode {
    /// Fake answer only.
    Naive,
    /// Fake answer with a similarity dimension and a fake document.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeDocument {
    pub title: String,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorCandidate {
    pub text: String,
    /// Absent for naive-mode candidates.
    pub similarity_type: Option<SimilarityType>,
    pub fake_document: Option<FakeDocument>,
    pub source_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeVerdict {
    pub difficult: bool,
    /// Entailment per candidate; `None` when the NLI call failed.
    pub entail_probs: Vec<Option<f64>>,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub distractors: usize,
    pub max_iterations: usize,
    pub threshold: f64,
    /// Invalid completions re-requested per candidate before giving up.
    pub validity_retries: usize,
    pub initial_mode: ForgeMode,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            distractors: 3,
            max_iterations: 3,
            threshold: 0.5,
            validity_retries: 3,
            initial_mode: ForgeMode::Naive,
            temperature: 0.7,
            max_tokens: 512,
            seed: 0,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.distractors == 0 {
            return bad("distractors must be at least 1");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        Ok(())
    }
}

/// A question/answer pair to forge distractors for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    /// Source passage; looked up in the corpus when absent.
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default)]
    pub corpus_ref: Option<String>,
}

/// Prompt and raw completion of one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub completion: String,
    /// Why the completion was rejected, if it was.
    pub rejected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub candidates: Vec<DistractorCandidate>,
    pub entail_probs: Vec<Option<f64>>,
    pub difficult: bool,
    pub exchanges: Vec<Exchange>,
}

/// One forged instance and how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeOutcome {
    pub instance: McqaInstance,
    pub verdict: ForgeVerdict,
    /// First iteration that passed the gate.
    pub difficult_at: Option<usize>,
    pub iterations: Vec<IterationRecord>,
}

impl ForgeOutcome {
    /// Fake supporting documents of the final distractors.
    pub fn fake_documents(&self) -> Vec<Document> {
        let Some(last) = self.iterations.last() else {
            return Vec::new();
        };
        last.candidates
            .iter()
            .enumerate()
            .filter_map(|(j, c)| {
                c.fake_document.as_ref().map(|d| {
                    let mut doc = Document::new(format!("{}-fake{j}", self.instance.id), d.excerpt.clone());
                    doc.title = Some(d.title.clone());
                    doc
                })
            })
            .collect()
    }
}

fn norm(s: &str) -> String {
    normalize_ws(s).to_lowercase()
}

fn json_object(raw: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str::<serde_json::Value>(&raw[start..=end]).ok()? {
        serde_json::Value::Object(m) => Some(m),
        _ => None,
    }
}

fn field(map: &serde_json::Map<String, serde_json::Value>, key: &str) -> Option<String> {
    map.get(key)
        .and_then(|v| v.as_str())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Parses and checks one completion. `taken` holds answers already in use
/// for this question.
pub fn parse_candidate(
    raw: &str,
    mode: ForgeMode,
    correct_answer: &str,
    taken: &[String],
    iteration: usize,
) -> std::result::Result<DistractorCandidate, String> {
    let map = json_object(raw).ok_or("no JSON object in completion")?;
    let text = field(&map, "fake_answer").ok_or("missing fake_answer")?;
    let correct = norm(correct_answer);
    if norm(&text) == correct {
        return Err("fake_answer equals the correct answer".into());
    }
    if taken.iter().any(|t| norm(t) == norm(&text)) {
        return Err(format!("fake_answer {text:?} duplicates another option"));
    }
    let (similarity_type, fake_document) = match mode {
        ForgeMode::Naive => (
            field(&map, "similarity_type").and_then(|s| SimilarityType::parse(&s)),
            None,
        ),
        ForgeMode::Full => {
            let sim = field(&map, "similarity_type").ok_or("missing similarity_type")?;
            let sim = SimilarityType::parse(&sim).ok_or_else(|| format!("unknown similarity_type {sim:?}"))?;
            let title = field(&map, "fake_document_title").ok_or("missing fake_document_title")?;
            let excerpt = field(&map, "fake_document_excerpt").ok_or("missing fake_document_excerpt")?;
            if !correct.is_empty() && norm(&excerpt).contains(&correct) {
                return Err("fake document mentions the correct answer".into());
            }
            (Some(sim), Some(FakeDocument { title, excerpt }))
        }
    };
    Ok(DistractorCandidate {
        text,
        similarity_type,
        fake_document,
        source_iteration: iteration,
    })
}

struct Request<'a> {
    question: &'a str,
    correct_answer: &'a str,
    context: &'a str,
    mode: ForgeMode,
    /// Per-slot previous answers, for regeneration.
    previous: Option<&'a [DistractorCandidate]>,
    iteration: usize,
}

fn candidate_note(j: usize, n: usize, taken: &[String], invalid: Option<&str>) -> String {
    let mut note = format!("This is fake answer {} of {n}.", j + 1);
    if !taken.is_empty() {
        let list: Vec<String> = taken.iter().map(|t| format!("\"{t}\"")).collect();
        note.push_str(&format!(" It must differ from: {}.", list.join(", ")));
    }
    if let Some(why) = invalid {
        note.push_str(&format!(" Your previous output was rejected ({why}); follow the format exactly."));
    }
    note
}

fn generate(
    chat: &dyn ChatProvider,
    prompts: &PromptSet,
    cfg: &ForgeConfig,
    req: &Request<'_>,
    count: usize,
    exchanges: &mut Vec<Exchange>,
) -> Result<Vec<DistractorCandidate>> {
    let mut out: Vec<DistractorCandidate> = Vec::with_capacity(count);
    for j in 0..count {
        let mut taken: Vec<String> = vec![req.correct_answer.to_string()];
        taken.extend(out.iter().map(|c| c.text.clone()));
        let mut invalid: Option<String> = None;
        let mut last_raw = String::new();
        let mut accepted = None;
        for _ in 0..=cfg.validity_retries {
            let note = candidate_note(j, count, &taken[1..], invalid.as_deref());
            let prompt = match (req.previous, req.mode) {
                (Some(prev), _) => prompts.fill(
                    "forge_regen",
                    &[
                        ("original_document", req.context),
                        ("question", req.question),
                        ("correct_answer", req.correct_answer),
                        ("old_incorrect_answer", &prev[j].text),
                        ("candidate_note", &note),
                    ],
                ),
                (None, ForgeMode::Naive) => prompts.fill(
                    "forge_naive",
                    &[
                        ("question", req.question),
                        ("correct_answer", req.correct_answer),
                        ("candidate_note", &note),
                    ],
                ),
                (None, ForgeMode::Full) => prompts.fill(
                    "forge_full",
                    &[
                        ("original_document", req.context),
                        ("question", req.question),
                        ("correct_answer", req.correct_answer),
                        ("candidate_note", &note),
                    ],
                ),
            };
            let request = ChatRequest::user(prompt.clone())
                .temperature(cfg.temperature)
                .max_tokens(cfg.max_tokens);
            let raw = chat
                .chat(&request)
                .context(|| format!("forging distractor {} for {:?}", j + 1, req.question))?
                .text;
            match parse_candidate(&raw, req.mode, req.correct_answer, &taken, req.iteration) {
                Ok(c) => {
                    exchanges.push(Exchange {
                        prompt,
                        completion: raw,
                        rejected: None,
                    });
                    accepted = Some(c);
                    break;
                }
                Err(why) => {
                    log::debug!("rejected forge completion: {why}");
                    exchanges.push(Exchange {
                        prompt,
                        completion: raw.clone(),
                        rejected: Some(why.clone()),
                    });
                    invalid = Some(why);
                    last_raw = raw;
                }
            }
        }
        match accepted {
            Some(c) => out.push(c),
            None => {
                return Err(EngineError::Forge {
                    message: format!(
                        "no valid distractor {} after {} attempts: {}",
                        j + 1,
                        cfg.validity_retries + 1,
                        invalid.unwrap_or_default()
                    ),
                    raw: last_raw,
                })
            }
        }
    }
    Ok(out)
}

/// Generates `count` distractors with the naive or full prompt.
#[allow(clippy::too_many_arguments)]
pub fn generate_distractors(
    chat: &dyn ChatProvider,
    prompts: &PromptSet,
    question: &str,
    correct_answer: &str,
    retrieved_context: &str,
    count: usize,
    mode: ForgeMode,
    cfg: &ForgeConfig,
) -> Result<Vec<DistractorCandidate>> {
    if count == 0 {
        return Err(EngineError::Config("distractor count must be at least 1".into()));
    }
    let req = Request {
        question,
        correct_answer,
        context: retrieved_context,
        mode,
        previous: None,
        iteration: 0,
    };
    generate(chat, prompts, cfg, &req, count, &mut Vec::new())
}

/// Premise is the question with the correct answer, hypothesis the question
/// with the candidate; difficult when any entailment reaches `threshold`.
pub fn gate_difficulty(
    nli_provider: &dyn NliProvider,
    question: &str,
    correct_answer: &str,
    candidates: &[DistractorCandidate],
    threshold: f64,
) -> Result<ForgeVerdict> {
    if candidates.is_empty() {
        return Err(EngineError::Config("no candidates to gate".into()));
    }
    let premise = format!("{} {}", question.trim(), correct_answer.trim());
    let entail_probs: Vec<Option<f64>> = candidates
        .iter()
        .map(|c| {
            let hypothesis = format!("{} {}", question.trim(), c.text.trim());
            match nli(nli_provider, &premise, &hypothesis) {
                Ok(o) => Some(o.verdict.entail),
                Err(e) => {
                    log::warn!("NLI failed for candidate {:?}: {e}", c.text);
                    None
                }
            }
        })
        .collect();
    if entail_probs.iter().all(Option::is_none) {
        log::warn!("every NLI call failed for {question:?}; marking not difficult");
    }
    let difficult = entail_probs.iter().flatten().any(|&p| p >= threshold);
    Ok(ForgeVerdict {
        difficult,
        entail_probs,
        iterations_used: 0,
    })
}

fn source_context(seed: &SeedPair, env: &Env) -> Result<String> {
    if let Some(c) = &seed.context {
        return Ok(c.clone());
    }
    let Some(corpus_ref) = &seed.corpus_ref else {
        return Ok(String::new());
    };
    let bundle = env.corpus(corpus_ref)?;
    let q = embed_one(env.providers.embed.as_ref(), &seed.question)
        .context(|| format!("seed {}: embedding question", seed.id))?;
    let top = search(&bundle.index, &q, 1, &seed.question)?;
    Ok(top.ids.first().and_then(|id| bundle.text(id)).unwrap_or_default())
}

/// Shuffles the correct answer in among the distractors.
pub fn assemble_instance(
    seed: &SeedPair,
    distractors: &[DistractorCandidate],
    permutation_seed: u64,
    difficult: bool,
) -> Result<McqaInstance> {
    let mut options: Vec<String> = vec![seed.answer.trim().to_string()];
    options.extend(distractors.iter().map(|c| c.text.clone()));
    let mut order: Vec<usize> = (0..options.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(permutation_seed));
    let answer_index = order.iter().position(|&i| i == 0).expect("gold present");
    let mut tags = vec![TAG_FORGED.to_string()];
    if !difficult {
        tags.push(TAG_NOT_DIFFICULT.to_string());
    }
    let inst = McqaInstance {
        id: seed.id.clone(),
        question: seed.question.trim().to_string(),
        options: order.into_iter().map(|i| options[i].clone()).collect(),
        answer_index,
        corpus_ref: seed.corpus_ref.clone().unwrap_or_else(|| DEFAULT_CORPUS_REF.to_string()),
        tags,
    };
    inst.validate()?;
    Ok(inst)
}

/// Generate, gate and regenerate until difficult or out of iterations.
pub fn forge_instance(seed: &SeedPair, env: &Env, cfg: &ForgeConfig) -> Result<ForgeOutcome> {
    cfg.validate()?;
    if seed.question.trim().is_empty() || seed.answer.trim().is_empty() {
        return Err(EngineError::Config(format!("seed {}: empty question or answer", seed.id)));
    }
    let context = source_context(seed, env)?;
    let chat = env.providers.chat.as_ref();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut difficult_at = None;
    for iteration in 0..=cfg.max_iterations {
        let previous = iterations.last().map(|r| r.candidates.as_slice());
        let req = Request {
            question: &seed.question,
            correct_answer: &seed.answer,
            context: &context,
            mode: if previous.is_some() { ForgeMode::Full } else { cfg.initial_mode },
            previous,
            iteration,
        };
        let mut exchanges = Vec::new();
        let candidates = generate(chat, &env.prompts, cfg, &req, cfg.distractors, &mut exchanges)?;
        let verdict = gate_difficulty(env.providers.nli.as_ref(), &seed.question, &seed.answer, &candidates, cfg.threshold)?;
        iterations.push(IterationRecord {
            iteration,
            candidates,
            entail_probs: verdict.entail_probs,
            difficult: verdict.difficult,
            exchanges,
        });
        if verdict.difficult {
            difficult_at = Some(iteration);
            break;
        }
    }
    let last = iterations.last().expect("at least one iteration");
    let difficult = difficult_at.is_some();
    if !difficult {
        log::warn!("seed {}: not difficult after {} regenerations", seed.id, cfg.max_iterations);
    }
    let instance = assemble_instance(
        seed,
        &last.candidates,
        derive_seed(cfg.seed, &[&seed.id, "permute"]),
        difficult,
    )?;
    Ok(ForgeOutcome {
        instance,
        verdict: ForgeVerdict {
            difficult,
            entail_probs: last.entail_probs.clone(),
            iterations_used: last.iteration,
        },
        difficult_at,
        iterations,
    })
}

/// Forges every seed concurrently, in input order.
pub fn forge_all(seeds: &[SeedPair], env: &Env, cfg: &ForgeConfig) -> Vec<Result<ForgeOutcome>> {
    seeds.par_iter().map(|s| forge_instance(s, env, cfg)).collect()
}

/// Cumulative share of difficult instances after each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeTable {
    pub columns: Vec<String>,
    pub percentages: Vec<f64>,
    pub n: usize,
}

impl ForgeTable {
    pub fn to_csv(&self) -> String {
        let head = self.columns.join(",");
        let row: Vec<String> = self.percentages.iter().map(|p| format!("{p:.1}")).collect();
        format!("{head}\n{}\n", row.join(","))
    }
}

/// Percentage difficult after iteration 0 (`Naive`) through `max_iterations`.
pub fn forge_report(difficult_at: &[Option<usize>], max_iterations: usize) -> Result<ForgeTable> {
    if difficult_at.is_empty() {
        return Err(EngineError::Config("no forge verdicts to report".into()));
    }
    let n = difficult_at.len();
    let columns = std::iter::once("Naive".to_string())
        .chain((1..=max_iterations).map(|i| format!("Iter {i}")))
        .collect();
    let percentages = (0..=max_iterations)
        .map(|t| 100.0 * difficult_at.iter().filter(|d| d.is_some_and(|d| d <= t)).count() as f64 / n as f64)
        .collect();
    Ok(ForgeTable { columns, percentages, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_spellings() {
        assert_eq!(SimilarityType::parse("role-similar"), Some(SimilarityType::Role));
        assert_eq!(SimilarityType::parse("Time similar"), Some(SimilarityType::Time));
        assert_eq!(SimilarityType::parse("topic"), Some(SimilarityType::Topic));
        assert_eq!(SimilarityType::parse("color-similar"), None);
    }

    #[test]
    fn parse_full_record() {
        let raw = r#"Sure: {"fake_document_title": "Gazette", "fake_document_excerpt": "Bob led it.",
            "fake_answer": "Bob", "similarity_type": "role-similar"}"#;
        let c = parse_candidate(raw, ForgeMode::Full, "Alice", &[], 2).unwrap();
        assert_eq!(c.text, "Bob");
        assert_eq!(c.source_iteration, 2);
        assert_eq!(c.fake_document.unwrap().title, "Gazette");
    }

    #[test]
    fn validity_rules() {
        let naive = |a: &str| format!(r#"{{"fake_answer": "{a}"}}"#);
        assert!(parse_candidate(&naive(" alice "), ForgeMode::Naive, "Alice", &[], 0).is_err());
        assert!(parse_candidate(&naive("Bob"), ForgeMode::Naive, "Alice", &["bob".into()], 0).is_err());
        assert!(parse_candidate("no json", ForgeMode::Naive, "Alice", &[], 0).is_err());
        assert!(parse_candidate(&naive("Bob"), ForgeMode::Full, "Alice", &[], 0).is_err());
        let leaky = r#"{"fake_answer": "Bob", "similarity_type": "role-similar",
            "fake_document_title": "T", "fake_document_excerpt": "Not Alice but Bob."}"#;
        assert!(parse_candidate(leaky, ForgeMode::Full, "Alice", &[], 0).is_err());
        assert!(parse_candidate(&naive("Bob"), ForgeMode::Naive, "Alice", &[], 0).is_ok());
    }

    #[test]
    fn report_is_cumulative() {
        let mut at = vec![Some(0); 3];
        at.extend([Some(1), Some(1), Some(2), Some(2), Some(2), Some(2), Some(2)]);
        let t = forge_report(&at, 3).unwrap();
        assert_eq!(t.columns, ["Naive", "Iter 1", "Iter 2", "Iter 3"]);
        assert_eq!(t.percentages, [30.0, 50.0, 100.0, 100.0]);
        let t = forge_report(&[None, Some(3)], 3).unwrap();
        assert_eq!(t.percentages, [0.0, 0.0, 0.0, 50.0]);
        assert!(forge_report(&[], 3).is_err());
    }

    #[test]
    fn permutation_keeps_gold() {
        let seed = SeedPair {
            id: "s1".into(),
            question: "Who?".into(),
            answer: "Alice".into(),
            context: None,
            corpus_ref: None,
        };
        let ds: Vec<DistractorCandidate> = ["Bob", "Carol", "Dan"]
            .iter()
            .map(|t| DistractorCandidate {
                text: t.to_string(),
                similarity_type: None,
                fake_document: None,
                source_iteration: 0,
            })
            .collect();
        for s in 0..20 {
            let a = assemble_instance(&seed, &ds, s, true).unwrap();
            assert_eq!(a.answer_text(), "Alice");
            assert_eq!(a, assemble_instance(&seed, &ds, s, true).unwrap());
        }
        let nd = assemble_instance(&seed, &ds, 0, false).unwrap();
        assert!(nd.tags.contains(&TAG_NOT_DIFFICULT.to_string()));
    }
}
