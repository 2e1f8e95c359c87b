//! Shared domain types, dataset/corpus files, and deterministic utilities.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{argument, integrity, CoreError, Result};
use crate::scalar::Scalar;

/// Collapses runs of whitespace and trims both ends.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Letter bound to option position `index` (0 → `A`).
pub fn option_letter(index: usize) -> char {
    assert!(index < 26, "option index {index} has no letter");
    (b'A' + index as u8) as char
}

/// Inverse of [`option_letter`]; accepts upper or lower case.
pub fn letter_index(letter: char) -> Option<usize> {
    let up = letter.to_ascii_uppercase();
    up.is_ascii_uppercase().then(|| (up as u8 - b'A') as usize)
}

/// One multiple-choice question bound to a retrieval corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaInstance {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub corpus_ref: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl McqaInstance {
    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    pub fn answer_text(&self) -> &str {
        &self.options[self.answer_index]
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(integrity(format!(
                "instance {}: needs at least 2 options, got {}",
                self.id,
                self.options.len()
            )));
        }
        if self.answer_index >= self.options.len() {
            return Err(integrity(format!(
                "instance {}: answer_index {} out of range for {} options",
                self.id,
                self.answer_index,
                self.options.len()
            )));
        }
        let mut seen = HashSet::new();
        for opt in &self.options {
            if !seen.insert(normalize_ws(opt)) {
                return Err(integrity(format!(
                    "instance {}: duplicate option {:?}",
                    self.id, opt
                )));
            }
        }
        Ok(())
    }

    /// Canonical single-line JSON record.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("instance serializes")
    }
}

/// A retrievable corpus entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Document {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: None,
            body: body.into(),
            embedding: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.body.trim().is_empty() {
            return Err(integrity(format!("document {}: empty body", self.id)));
        }
        if let Some(v) = &self.embedding {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(integrity(format!(
                    "document {}: embedding norm {norm} is not 1",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Title and body as they appear in a prompt context block.
    pub fn render(&self) -> String {
        match &self.title {
            Some(t) if !t.is_empty() => format!("{t}\n{}", self.body),
            _ => self.body.clone(),
        }
    }
}

fn read_lines<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>>
where
    F: FnMut(usize, &str) -> Result<T>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(i + 1, &line)?);
    }
    Ok(out)
}

/// Parses a line-delimited dataset, checking every instance invariant.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<McqaInstance>> {
    let path = path.as_ref();
    let instances = read_lines(path, |line, text| {
        let inst: McqaInstance = serde_json::from_str(text).map_err(|e| CoreError::Parse {
            line,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| match e {
            CoreError::Integrity(m) => integrity(format!("line {line}: {m}")),
            other => other,
        })?;
        Ok(inst)
    })?;
    check_dataset(&instances)?;
    Ok(instances)
}

/// Cross-record checks: unique ids and a constant option count.
pub fn check_dataset(instances: &[McqaInstance]) -> Result<()> {
    let mut ids = HashSet::new();
    let k = instances.first().map(McqaInstance::num_options);
    for inst in instances {
        if !ids.insert(inst.id.as_str()) {
            return Err(integrity(format!("duplicate instance id {:?}", inst.id)));
        }
        if Some(inst.num_options()) != k {
            return Err(integrity(format!(
                "instance {} has {} options, dataset uses {}",
                inst.id,
                inst.num_options(),
                k.unwrap_or(0)
            )));
        }
    }
    Ok(())
}

pub fn write_dataset(mut out: impl Write, instances: &[McqaInstance]) -> Result<()> {
    for inst in instances {
        writeln!(out, "{}", inst.to_line())?;
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let docs = read_lines(path.as_ref(), |line, text| {
        let doc: Document = serde_json::from_str(text).map_err(|e| CoreError::Parse {
            line,
            message: e.to_string(),
        })?;
        doc.validate()?;
        Ok(doc)
    })?;
    let mut ids = HashSet::new();
    for d in &docs {
        if !ids.insert(d.id.as_str()) {
            return Err(integrity(format!("duplicate document id {:?}", d.id)));
        }
    }
    Ok(docs)
}

pub fn write_corpus(mut out: impl Write, docs: &[Document]) -> Result<()> {
    for d in docs {
        writeln!(out, "{}", serde_json::to_string(d).expect("document serializes"))?;
    }
    Ok(())
}

/// Normalized probability vector over one question's options.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionDistribution<T = f64> {
    probs: Vec<T>,
}

impl<T: Scalar> OptionDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(argument("distribution needs at least one entry"));
        }
        let zero = T::zero();
        let one = T::one();
        let mut total = zero;
        for &p in &probs {
            if !(p >= zero && p <= one) {
                return Err(argument(format!("probability {p:?} outside [0, 1]")));
            }
            total = total + p;
        }
        let err = (total.as_f64() - 1.0).abs();
        if err > T::sum_tolerance() {
            return Err(argument(format!(
                "probabilities sum to {:?}, not 1",
                total.as_f64()
            )));
        }
        Ok(Self { probs })
    }

    /// Divides by the total; fails on an all-zero or negative vector.
    pub fn normalized(weights: Vec<T>) -> Result<Self> {
        let total = weights.iter().fold(T::zero(), |a, &b| a + b);
        if !(total > T::zero()) || weights.iter().any(|&w| w < T::zero()) {
            return Err(argument("cannot normalize non-positive weights"));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Self {
        let p = T::one() / T::from_count(k);
        Self { probs: vec![p; k] }
    }

    /// All mass on `index`.
    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut probs = vec![T::zero(); k];
        probs[index] = T::one();
        Self { probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<T> {
        self.probs.get(index).copied()
    }

    pub fn argmax(&self) -> usize {
        stable_argmax(&self.probs).expect("distribution is non-empty")
    }
}

impl<T: Serialize> Serialize for OptionDistribution<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.probs.serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for OptionDistribution<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<T>::deserialize(d)?;
        Self::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn stable_argmax<T: PartialOrd>(values: &[T]) -> Result<usize> {
    let mut best = 0;
    let first = values
        .first()
        .ok_or_else(|| argument("argmax of an empty vector"))?;
    let mut best_val = first;
    for (i, v) in values.iter().enumerate().skip(1) {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    Ok(best)
}

/// Nonconformity score family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScoreMethod {
    #[serde(rename = "LAC")]
    Lac,
    #[serde(rename = "APS")]
    Aps,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 2] = [ScoreMethod::Lac, ScoreMethod::Aps];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Lac => "LAC",
            ScoreMethod::Aps => "APS",
        }
    }
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScoreMethod {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LAC" => Ok(ScoreMethod::Lac),
            "APS" => Ok(ScoreMethod::Aps),
            _ => Err(argument(format!("unknown score method {s:?}"))),
        }
    }
}

/// Calibrated threshold; `Unbounded` is the +∞ sentinel used when the
/// conformal rank exceeds the calibration count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold<T = f64> {
    Finite(T),
    Unbounded,
}

impl<T: Scalar> Threshold<T> {
    /// `score ≤ threshold`.
    pub fn admits(&self, score: T) -> bool {
        match self {
            Threshold::Finite(q) => score <= *q,
            Threshold::Unbounded => true,
        }
    }

    pub fn finite(&self) -> Option<T> {
        match self {
            Threshold::Finite(q) => Some(*q),
            Threshold::Unbounded => None,
        }
    }
}

const UNBOUNDED_TAG: &str = "+inf";

impl<T: Serialize> Serialize for Threshold<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Finite(q) => q.serialize(s),
            Threshold::Unbounded => s.serialize_str(UNBOUNDED_TAG),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Threshold<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Num(T),
            Tag(String),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Num(q) => Ok(Threshold::Finite(q)),
            Raw::Tag(t) if t == UNBOUNDED_TAG => Ok(Threshold::Unbounded),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!(
                "expected a number or {UNBOUNDED_TAG:?}, got {t:?}"
            ))),
        }
    }
}

/// Options admitted under a calibrated threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet<T = f64> {
    pub method: ScoreMethod,
    pub threshold: Threshold<T>,
    pub members: BTreeSet<usize>,
}

impl<T> PredictionSet<T> {
    pub fn contains(&self, index: usize) -> bool {
        self.members.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Disjoint calibration/test partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub calibration_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    /// Checks disjointness and exact coverage of `instances`.
    pub fn validate_against(&self, instances: &[McqaInstance]) -> Result<()> {
        let cal: HashSet<&str> = self.calibration_ids.iter().map(String::as_str).collect();
        let test: HashSet<&str> = self.test_ids.iter().map(String::as_str).collect();
        if cal.len() != self.calibration_ids.len() || test.len() != self.test_ids.len() {
            return Err(integrity("split lists contain duplicate ids"));
        }
        if let Some(id) = cal.intersection(&test).next() {
            return Err(integrity(format!("id {id:?} in both calibration and test")));
        }
        if cal.len() + test.len() != instances.len() {
            return Err(integrity(format!(
                "split covers {} ids, dataset has {}",
                cal.len() + test.len(),
                instances.len()
            )));
        }
        for inst in instances {
            if !cal.contains(inst.id.as_str()) && !test.contains(inst.id.as_str()) {
                return Err(integrity(format!("id {:?} missing from split", inst.id)));
            }
        }
        Ok(())
    }
}

/// Seeded uniform split; `round(fraction · n)` ids go to calibration.
///
/// Both halves keep dataset order.
pub fn split(instances: &[McqaInstance], fraction: f64, seed: u64) -> Result<SplitSpec> {
    if instances.is_empty() {
        return Err(argument("cannot split an empty dataset"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(argument(format!("fraction {fraction} outside (0, 1)")));
    }
    let n = instances.len();
    let n_cal = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_cal = vec![false; n];
    for &i in &order[..n_cal] {
        is_cal[i] = true;
    }
    let (mut calibration_ids, mut test_ids) = (Vec::new(), Vec::new());
    for (inst, cal) in instances.iter().zip(is_cal) {
        if cal {
            calibration_ids.push(inst.id.clone());
        } else {
            test_ids.push(inst.id.clone());
        }
    }
    Ok(SplitSpec {
        calibration_ids,
        test_ids,
        seed,
    })
}

/// What a trace step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    /// Free generation: drafts, reformulations, hypothetical passages, summaries.
    Generate,
    /// Retrieval decision (retrieve / no_retrieve).
    Decide,
    Search,
    Fuse,
    /// Reflection judgment over a candidate answer.
    Reflect,
    /// Option scoring call that produced a distribution.
    Score,
}

/// One step of a strategy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub action: StepAction,
    pub query: String,
    #[serde(default)]
    pub retrieved: Vec<String>,
    /// Subset of `retrieved` injected as irrelevant context.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected: Vec<String>,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub completion: String,
}

impl TraceStep {
    pub fn new(action: StepAction, query: impl Into<String>) -> Self {
        Self {
            action,
            query: query.into(),
            retrieved: Vec::new(),
            injected: Vec::new(),
            prompt: String::new(),
            completion: String::new(),
        }
    }
}

/// Full record of one strategy run over one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrace {
    pub instance_id: String,
    pub steps: Vec<TraceStep>,
    pub final_distribution: OptionDistribution<f64>,
    /// Degradation markers (floor rule, fallbacks, truncation).
    #[serde(default)]
    pub flags: BTreeSet<String>,
}

impl StrategyTrace {
    pub fn count(&self, action: StepAction) -> usize {
        self.steps.iter().filter(|s| s.action == action).count()
    }

    /// Every document id retrieved by any step, in first-seen order.
    pub fn retrieved_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.steps
            .iter()
            .flat_map(|s| s.retrieved.iter())
            .filter(|id| seen.insert(id.as_str()))
            .map(String::as_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, k: usize, answer: usize) -> McqaInstance {
        McqaInstance {
            id: id.into(),
            question: format!("question {id}"),
            options: (0..k).map(|i| format!("option {i}")).collect(),
            answer_index: answer,
            corpus_ref: "c".into(),
            tags: vec![],
        }
    }

    fn write_tmp(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_in_file_order() {
        let recs: Vec<_> = ["q3", "q1", "q2"].iter().map(|id| inst(id, 4, 0).to_line()).collect();
        let f = write_tmp(&recs);
        let got = load_dataset(f.path()).unwrap();
        let ids: Vec<_> = got.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["q3", "q1", "q2"]);
    }

    #[test]
    fn rejects_out_of_range_answer() {
        let mut bad = inst("q1", 4, 0);
        bad.answer_index = 7;
        let f = write_tmp(&[bad.to_line()]);
        assert!(matches!(load_dataset(f.path()), Err(CoreError::Integrity(_))));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let f = write_tmp(&[inst("q1", 4, 0).to_line(), inst("q1", 4, 1).to_line()]);
        assert!(matches!(load_dataset(f.path()), Err(CoreError::Integrity(_))));
    }

    #[test]
    fn parse_error_names_line() {
        let f = write_tmp(&[inst("q1", 4, 0).to_line(), "{not json".into()]);
        match load_dataset(f.path()) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_mixed_option_counts_and_whitespace_duplicates() {
        let f = write_tmp(&[inst("q1", 4, 0).to_line(), inst("q2", 3, 0).to_line()]);
        assert!(load_dataset(f.path()).is_err());
        let mut dup = inst("q1", 3, 0);
        dup.options[1] = "  option   0 ".into();
        assert!(dup.validate().is_err());
    }

    #[test]
    fn canonical_records_round_trip_bytes() {
        let lines: Vec<String> = (0..3).map(|i| inst(&format!("q{i}"), 4, i).to_line()).collect();
        let f = write_tmp(&lines);
        let loaded = load_dataset(f.path()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &loaded).unwrap();
        let original = std::fs::read(f.path()).unwrap();
        assert_eq!(buf, original);
    }

    #[test]
    fn split_sizes_for_163() {
        let data: Vec<_> = (0..163).map(|i| inst(&format!("q{i}"), 4, 0)).collect();
        for seed in [0, 1, 99] {
            let s = split(&data, 0.5, seed).unwrap();
            let sizes = (s.calibration_ids.len(), s.test_ids.len());
            assert!(sizes == (81, 82) || sizes == (82, 81), "{sizes:?}");
            s.validate_against(&data).unwrap();
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let data: Vec<_> = (0..10).map(|i| inst(&format!("q{i}"), 4, 0)).collect();
        assert_eq!(split(&data, 0.5, 7).unwrap(), split(&data, 0.5, 7).unwrap());
        let four = &data[..4];
        let s = split(four, 0.5, 3).unwrap();
        let mut all: Vec<_> = s.calibration_ids.iter().chain(&s.test_ids).cloned().collect();
        all.sort();
        assert_eq!(all, ["q0", "q1", "q2", "q3"]);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let data = vec![inst("a", 2, 0), inst("b", 2, 0)];
        assert!(split(&data, 0.0, 1).is_err());
        assert!(split(&data, 1.0, 1).is_err());
        assert!(split(&[], 0.5, 1).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(stable_argmax(&[0.2, 0.5, 0.3]).unwrap(), 1);
        assert_eq!(stable_argmax(&[0.4, 0.4, 0.2]).unwrap(), 0);
        assert_eq!(stable_argmax(&[1.0]).unwrap(), 0);
        assert!(stable_argmax::<f64>(&[]).is_err());
    }

    #[test]
    fn distribution_checks_sum() {
        assert!(OptionDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(OptionDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(OptionDistribution::new(vec![1.2, -0.2]).is_err());
        let json = serde_json::to_string(&OptionDistribution::new(vec![0.25, 0.75]).unwrap()).unwrap();
        assert_eq!(json, "[0.25,0.75]");
        assert!(serde_json::from_str::<OptionDistribution>("[0.3,0.3]").is_err());
    }

    #[test]
    fn threshold_serde() {
        let t: Threshold = serde_json::from_str("\"+inf\"").unwrap();
        assert_eq!(t, Threshold::Unbounded);
        assert_eq!(serde_json::to_string(&Threshold::Finite(0.5)).unwrap(), "0.5");
    }

    #[test]
    fn document_embedding_must_be_unit() {
        let mut d = Document::new("d", "body");
        d.embedding = Some(vec![3.0, 4.0]);
        assert!(d.validate().is_err());
        d.embedding = Some(vec![0.6, 0.8]);
        assert!(d.validate().is_ok());
        assert!(Document::new("e", "  ").validate().is_err());
    }
}
