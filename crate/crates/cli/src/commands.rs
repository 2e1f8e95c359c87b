//! Subcommand bodies. Each returns the process exit code on success:
//! 0 when everything held, 2 when a run invariant failed.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use uragc_core::model::{load_corpus, load_dataset, split, write_corpus, write_dataset};
use uragc_core::{McqaInstance, SplitSpec};
use uragc_engine::evaluation::{depth_sweep, run_protocol, DepthRun, ProtocolKind, RunReport};
use uragc_engine::forge::{forge_all, forge_report, SeedPair};
use uragc_engine::prompts::PromptSet;
use uragc_engine::strategy::{CorpusBundle, Env, StrategyKind};

use crate::config::RunConfig;
use crate::synth::{synth, write_world, SynthParams};
use crate::tables;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 2;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("out: creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{what}: cannot read {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Dataset, split and environment for evaluation commands.
pub struct Inputs {
    pub dataset: Vec<McqaInstance>,
    pub split: SplitSpec,
    pub env: Env,
}

fn build_env(cfg: &RunConfig, env_vars: &dyn Fn(&str) -> Option<String>, corpus_refs: &BTreeSet<String>) -> Result<Env> {
    let providers = cfg.providers(env_vars)?;
    let mut env = Env::new(providers);
    if let Some(dir) = &cfg.prompts {
        env = env.with_prompts(PromptSet::with_overrides(dir).with_context(|| format!("prompts: {}", dir.display()))?);
    }
    for name in corpus_refs {
        let path = cfg
            .corpora
            .get(name)
            .with_context(|| format!("corpora.{name}: no corpus file configured"))?;
        let docs = load_corpus(path).with_context(|| format!("corpora.{name}: {}", path.display()))?;
        let bundle = CorpusBundle::build(name, docs, env.providers.embed.as_ref())
            .with_context(|| format!("corpora.{name}: building index"))?;
        env.add_corpus(bundle);
    }
    Ok(env)
}

pub fn load_inputs(cfg: &RunConfig, env_vars: &dyn Fn(&str) -> Option<String>) -> Result<Inputs> {
    let path = cfg.dataset.as_ref().context("dataset: no dataset file configured")?;
    let dataset = load_dataset(path).with_context(|| format!("dataset: {}", path.display()))?;
    let split = match &cfg.split {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("split: cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("split: {}", p.display()))?
        }
        None => split(&dataset, cfg.split_fraction, cfg.seed)?,
    };
    split.validate_against(&dataset).context("split")?;
    let needs_index = cfg.strategy_kinds()?.iter().any(|k| k.needs_index());
    let refs: BTreeSet<String> = if needs_index {
        dataset.iter().map(|i| i.corpus_ref.clone()).collect()
    } else {
        BTreeSet::new()
    };
    let env = build_env(cfg, env_vars, &refs)?;
    Ok(Inputs { dataset, split, env })
}

fn stem(strategy: StrategyKind, protocol: ProtocolKind) -> String {
    format!("{}_{}", strategy.name(), protocol.name())
}

/// Report, per-instance records, CSV panels and summary for one run.
pub fn write_report(dir: &Path, stem: &str, report: &RunReport) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let paths = [
        dir.join(format!("{stem}.report.json")),
        dir.join(format!("{stem}.records.jsonl")),
        dir.join(format!("{stem}.csv")),
        dir.join(format!("{stem}.summary.txt")),
    ];
    write_file(&paths[0], report.to_json() + "\n")?;
    write_jsonl(&paths[1], &report.records)?;
    write_file(&paths[2], tables::render_csv(&tables::cells(std::slice::from_ref(report)))?)?;
    write_file(&paths[3], tables::summary(report))?;
    Ok(paths.to_vec())
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        config_hash: String,
        config: &'a RunConfig,
    }
    write_json(
        &cfg.out.join("config.resolved.json"),
        &Resolved {
            config_hash: cfg.hash(),
            config: cfg,
        },
    )
}

pub fn cmd_run(cfg: &RunConfig, env_vars: &dyn Fn(&str) -> Option<String>) -> Result<i32> {
    if cfg.protocol.kind == ProtocolKind::DepthSweep {
        return cmd_depth_sweep(cfg, env_vars);
    }
    let inputs = load_inputs(cfg, env_vars)?;
    write_config(cfg)?;
    let mut code = EXIT_OK;
    for kind in cfg.strategy_kinds()? {
        let report = run_protocol(&inputs.dataset, &inputs.split, kind, &cfg.protocol, &inputs.env, &cfg.eval)
            .with_context(|| format!("running {}", kind.name()))?;
        write_report(&cfg.out, &stem(kind, cfg.protocol.kind), &report)?;
        print!("{}", tables::summary(&report));
        if !report.invariants_hold() {
            code = EXIT_INVARIANT;
        }
    }
    Ok(code)
}

#[derive(Serialize)]
struct DepthSummary<'a> {
    strategy: &'a str,
    k: usize,
    error: Option<&'a str>,
    retrieved_digest: &'a str,
    distinct_retrieved: usize,
    acc: Option<f64>,
    cr: Option<f64>,
    ss: Option<f64>,
}

pub fn cmd_depth_sweep(cfg: &RunConfig, env_vars: &dyn Fn(&str) -> Option<String>) -> Result<i32> {
    let inputs = load_inputs(cfg, env_vars)?;
    write_config(cfg)?;
    let dir = cfg.out.join("depth_sweep");
    let mut code = EXIT_OK;
    let mut summaries: Vec<(String, DepthRun)> = Vec::new();
    for kind in cfg.strategy_kinds()? {
        let runs = depth_sweep(&inputs.dataset, &inputs.split, kind, &cfg.protocol, &inputs.env, &cfg.eval)?;
        for run in runs {
            match &run.report {
                Some(r) => {
                    write_report(&dir, &format!("{}_k{}", kind.name(), run.k), r)?;
                    print!("{}", tables::summary(r));
                    if !r.invariants_hold() {
                        code = EXIT_INVARIANT;
                    }
                }
                None => eprintln!("{} k={}: {}", kind.name(), run.k, run.error.as_deref().unwrap_or("failed")),
            }
            summaries.push((kind.name().to_string(), run));
        }
    }
    let rows: Vec<DepthSummary> = summaries
        .iter()
        .map(|(s, r)| DepthSummary {
            strategy: s,
            k: r.k,
            error: r.error.as_deref(),
            retrieved_digest: &r.retrieved_digest,
            distinct_retrieved: r.distinct_retrieved,
            acc: r.report.as_ref().map(|x| x.headline.acc),
            cr: r.report.as_ref().map(|x| x.headline.cr),
            ss: r.report.as_ref().map(|x| x.headline.ss),
        })
        .collect();
    write_json(&cfg.out.join("depth_sweep.json"), &rows)?;
    if summaries.iter().any(|(_, r)| r.report.is_none()) {
        bail!("one or more depths failed; see depth_sweep.json");
    }
    Ok(code)
}

/// Persists calibration thresholds, from an existing report or a fresh run.
pub fn cmd_calibrate(cfg: &RunConfig, report: Option<&Path>, env_vars: &dyn Fn(&str) -> Option<String>) -> Result<i32> {
    create_dir(&cfg.out)?;
    let reports: Vec<(String, RunReport)> = match report {
        Some(p) => {
            let r = tables::load_report(p)?;
            let name = format!("{}_{}", r.metadata.strategy, r.metadata.protocol.name());
            vec![(name, r)]
        }
        None => {
            let inputs = load_inputs(cfg, env_vars)?;
            cfg.strategy_kinds()?
                .into_iter()
                .map(|k| {
                    run_protocol(&inputs.dataset, &inputs.split, k, &cfg.protocol, &inputs.env, &cfg.eval)
                        .map(|r| (stem(k, cfg.protocol.kind), r))
                        .map_err(anyhow::Error::from)
                })
                .collect::<Result<_>>()?
        }
    };
    for (name, r) in &reports {
        let path = cfg.out.join(format!("{name}.calibration.json"));
        write_json(&path, &r.calibration)?;
        for m in &r.calibration {
            println!("{name} {} alpha={} n={} q_hat={}", m.method.name(), m.alpha, m.n, serde_json::to_string(&m.q_hat)?);
        }
    }
    Ok(EXIT_OK)
}

fn collect_reports(path: &Path) -> Result<Vec<RunReport>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".report.json"))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no *.report.json files in {}", path.display());
        }
        files.iter().map(|f| tables::load_report(f)).collect()
    } else {
        Ok(vec![tables::load_report(path)?])
    }
}

/// Panels over every report; with two arguments also the differences
/// from the first group to the second.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<i32> {
    if paths.is_empty() {
        bail!("report: at least one report is required");
    }
    let groups: Vec<Vec<RunReport>> = paths.iter().map(|p| collect_reports(p)).collect::<Result<_>>()?;
    let all: Vec<RunReport> = groups.iter().flatten().cloned().collect();
    let cells = tables::cells(&all);
    create_dir(out)?;
    write_file(&out.join("report.csv"), tables::render_csv(&cells)?)?;
    let mut text = tables::render_text(&cells);
    if groups.len() == 2 {
        let ds = tables::deltas(&groups[0], &groups[1]);
        write_file(&out.join("delta.csv"), tables::render_delta_csv(&ds)?)?;
        text.push_str(&tables::render_delta_text(&ds));
    }
    write_file(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(EXIT_OK)
}

pub fn cmd_synth(params: &SynthParams, out: &Path) -> Result<i32> {
    let world = synth(params)?;
    let files = write_world(&world, out)?;
    println!(
        "wrote {} instances to {} and mock script {}",
        world.dataset.len(),
        files.dataset.display(),
        files.mock.display()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Provenance<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    outcome: &'a uragc_engine::forge::ForgeOutcome,
}

pub fn cmd_forge(cfg: &RunConfig, env_vars: &dyn Fn(&str) -> Option<String>) -> Result<i32> {
    let path = cfg.seeds.as_ref().context("seeds: no seed question file configured")?;
    if !path.is_file() {
        bail!("seeds: {} does not exist", path.display());
    }
    let seeds: Vec<SeedPair> = load_jsonl(path, "seeds")?;
    if seeds.is_empty() {
        bail!("seeds: {} holds no question/answer pairs", path.display());
    }
    let refs: BTreeSet<String> = seeds
        .iter()
        .filter(|s| s.context.is_none())
        .filter_map(|s| s.corpus_ref.clone())
        .collect();
    let env = build_env(cfg, env_vars, &refs)?;
    write_config(cfg)?;
    let hash = cfg.hash();
    let results = forge_all(&seeds, &env, &cfg.forge);
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                eprintln!("seed {}: {e}", seed.id);
                failures.push(serde_json::json!({"id": seed.id, "error": e.to_string(),
                    "raw": match &e { uragc_engine::EngineError::Forge { raw, .. } => raw.clone(), _ => String::new() }}));
            }
        }
    }
    let instances: Vec<McqaInstance> = outcomes.iter().map(|o| o.instance.clone()).collect();
    let file = std::fs::File::create(cfg.out.join("forged.jsonl"))?;
    write_dataset(std::io::BufWriter::new(file), &instances)?;
    write_jsonl(
        &cfg.out.join("forged.provenance.jsonl"),
        outcomes.iter().map(|o| Provenance {
            config_hash: &hash,
            outcome: o,
        }),
    )?;
    let docs: Vec<_> = outcomes.iter().flat_map(|o| o.fake_documents()).collect();
    if !docs.is_empty() {
        let file = std::fs::File::create(cfg.out.join("forged_corpus.jsonl"))?;
        write_corpus(std::io::BufWriter::new(file), &docs)?;
    }
    if !failures.is_empty() {
        write_jsonl(&cfg.out.join("forge_failures.jsonl"), &failures)?;
    }
    if outcomes.is_empty() {
        bail!("no seed produced an instance");
    }
    let difficult_at: Vec<Option<usize>> = outcomes.iter().map(|o| o.difficult_at).collect();
    let table = forge_report(&difficult_at, cfg.forge.max_iterations)?;
    write_file(&cfg.out.join("forge_table.csv"), table.to_csv())?;
    let text = format!(
        "Difficult questions after each iteration ({} instances)\n{}\n{}\n",
        table.n,
        table.columns.join("\t"),
        table.percentages.iter().map(|p| format!("{p:.1}%")).collect::<Vec<_>>().join("\t")
    );
    write_file(&cfg.out.join("forge_table.txt"), &text)?;
    print!("{text}");
    if !failures.is_empty() {
        bail!("{} of {} seeds failed; see forge_failures.jsonl", failures.len(), seeds.len());
    }
    Ok(EXIT_OK)
}
