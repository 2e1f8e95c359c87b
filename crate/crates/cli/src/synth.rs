//! Synthetic exchangeable worlds: every instance carries its own option
//! distribution, its gold label is drawn from it, and the mock replays it
//! exactly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use uragc_core::model::{split, write_dataset};
use uragc_core::{option_letter, McqaInstance, SplitSpec};
use uragc_providers::mock::{ChatRule, MockResponse, MockScript};

pub const SYNTH_CORPUS: &str = "synth";
/// Probabilities below this are lifted so every log-probability is finite.
const MIN_PROB: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n: usize,
    pub k: usize,
    /// Symmetric Dirichlet concentration.
    pub concentration: f64,
    pub seed: u64,
    /// Size of the calibration half of the emitted split.
    pub calibration: Option<usize>,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            bail!("n: must be at least 1");
        }
        if !(2..=26).contains(&self.k) {
            bail!("k: {} options; must lie in 2..=26", self.k);
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            bail!("concentration: {} must be positive", self.concentration);
        }
        if let Some(c) = self.calibration {
            if c == 0 || c >= self.n {
                bail!("calibration: {c} must lie in 1..{}", self.n);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub dataset: Vec<McqaInstance>,
    pub script: MockScript,
    /// The distribution each instance is scored with.
    pub distributions: Vec<Vec<f64>>,
    pub split: Option<SplitSpec>,
}

pub fn marker(seed: u64, i: usize) -> String {
    format!("[sx{seed}-{i:07}]")
}

pub fn synth(params: &SynthParams) -> Result<SynthWorld> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let gamma = Gamma::new(params.concentration, 1.0).context("concentration")?;
    let mut dataset = Vec::with_capacity(params.n);
    let mut distributions = Vec::with_capacity(params.n);
    let mut script = MockScript::default();
    for i in 0..params.n {
        let raw: Vec<f64> = (0..params.k).map(|_| gamma.sample(&mut rng).max(MIN_PROB)).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let gold = WeightedIndex::new(&p).context("sampling gold")?.sample(&mut rng);
        let m = marker(params.seed, i);
        let labels: Vec<(String, f64)> = p
            .iter()
            .enumerate()
            .map(|(j, pj)| (option_letter(j).to_string(), pj.ln()))
            .collect();
        let labels: Vec<(&str, f64)> = labels.iter().map(|(l, v)| (l.as_str(), *v)).collect();
        script.chat.push(ChatRule::contains(&[&m], MockResponse::labels(&labels)));
        dataset.push(McqaInstance {
            id: format!("sx{i:07}"),
            question: format!("Which option does synthetic item {i} draw? {m}"),
            options: (0..params.k).map(|j| format!("outcome {j} of item {i}")).collect(),
            answer_index: gold,
            corpus_ref: SYNTH_CORPUS.to_string(),
            tags: vec!["synthetic".to_string()],
        });
        distributions.push(p);
    }
    let split = params
        .calibration
        .map(|c| split(&dataset, c as f64 / params.n as f64, params.seed))
        .transpose()?;
    Ok(SynthWorld {
        dataset,
        script,
        distributions,
        split,
    })
}

/// Paths written by [`write_world`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub dataset: PathBuf,
    pub mock: PathBuf,
    pub split: Option<PathBuf>,
}

pub fn write_world(world: &SynthWorld, dir: &Path) -> Result<SynthFiles> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let dataset = dir.join("synth_dataset.jsonl");
    let file = std::fs::File::create(&dataset).with_context(|| format!("creating {}", dataset.display()))?;
    write_dataset(std::io::BufWriter::new(file), &world.dataset)?;
    let mock = dir.join("synth_mock.json");
    world.script.save(&mock)?;
    let split = match &world.split {
        Some(s) => {
            let p = dir.join("synth_split.json");
            std::fs::write(&p, serde_json::to_string_pretty(s)?)?;
            Some(p)
        }
        None => None,
    };
    Ok(SynthFiles { dataset, mock, split })
}
