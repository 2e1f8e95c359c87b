//! Option scoring: turns answer-token log-probabilities into a
//! distribution over the option letters.

use serde::{Deserialize, Serialize};
use uragc_core::scoring::{apply_floor, restricted_softmax};
use uragc_core::{letter_index, option_letter, OptionDistribution};

use crate::error::{ProviderError, Result};
use crate::types::{ChatRequest, PositionLogprobs, TokenLogprobs, DEFAULT_TEMPERATURE};
use crate::ChatProvider;

pub const FLAG_FLOOR: &str = "floor_rule";
pub const FLAG_ONE_HOT: &str = "one_hot_fallback";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    /// Requested candidate count per position (raised to the option count).
    pub top_n: u32,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Give unobserved labels `min observed − 10` instead of failing.
    pub allow_floor: bool,
    /// Parse `Answer|X` into a degenerate distribution when logprobs are missing.
    pub one_hot_fallback: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            top_n: 20,
            max_tokens: 8,
            temperature: DEFAULT_TEMPERATURE,
            allow_floor: true,
            one_hot_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOptions {
    pub distribution: OptionDistribution,
    pub completion: String,
    pub flags: Vec<&'static str>,
}

/// Index of the generated position that carries the answer letter.
///
/// Prefers the position right after a token ending in `|` (the
/// `Answer|X` contract), then the first position whose generated token is
/// a bare letter, then position 0.
pub fn answer_position(logprobs: &TokenLogprobs, num_options: usize) -> Option<usize> {
    let positions = &logprobs.positions;
    if positions.is_empty() {
        return None;
    }
    let mut text = String::new();
    for (i, pos) in positions.iter().enumerate() {
        if i > 0 && text.trim_end().ends_with('|') {
            return Some(i);
        }
        text.push_str(&pos.token);
    }
    let is_label = |t: &str| {
        let t = t.trim();
        let mut chars = t.chars();
        matches!((chars.next(), chars.next()), (Some(c), None) if letter_index(c).is_some_and(|i| i < num_options) && c.is_ascii_uppercase())
    };
    Some(positions.iter().position(|p| is_label(&p.token)).unwrap_or(0))
}

fn label_logprobs(pos: &PositionLogprobs, num_options: usize) -> Vec<Option<f64>> {
    (0..num_options)
        .map(|i| {
            let label = option_letter(i).to_string();
            let matches: Vec<f64> = pos
                .candidates
                .iter()
                .filter(|c| c.token.trim() == label)
                .map(|c| c.logprob)
                .collect();
            if matches.is_empty() {
                return None;
            }
            // variants such as "B" and " B" both vote for the label
            let m = matches.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(m + matches.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        })
        .collect()
}

/// Letter following `Answer|` in a completion.
pub fn parse_answer_letter(text: &str, num_options: usize) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    let at = lower.find("answer|")?;
    let rest = &text[at + "answer|".len()..];
    let c = rest.trim_start().chars().next()?;
    letter_index(c).filter(|&i| i < num_options)
}

/// Scores the option letters `A, B, …` for a rendered MCQA prompt.
pub fn score_options(
    chat: &dyn ChatProvider,
    prompt: &str,
    num_options: usize,
    opts: &ScoreOptions,
) -> Result<ScoredOptions> {
    if num_options == 0 || num_options > 26 {
        return Err(ProviderError::Argument(format!("{num_options} options")));
    }
    let request = ChatRequest::user(prompt)
        .temperature(opts.temperature)
        .max_tokens(opts.max_tokens)
        .with_logprobs(opts.top_n.max(num_options as u32));
    let response = chat.chat(&request)?;
    let mut flags = Vec::new();
    let one_hot = |flags: &mut Vec<&'static str>, why: String| -> Result<OptionDistribution> {
        if !opts.one_hot_fallback {
            return Err(ProviderError::Capability(why));
        }
        let idx = parse_answer_letter(&response.text, num_options).ok_or_else(|| {
            ProviderError::Capability(format!("{why}; no parsable Answer|X in {:?}", response.text))
        })?;
        flags.push(FLAG_ONE_HOT);
        Ok(OptionDistribution::one_hot(num_options, idx))
    };
    let distribution = match response.logprobs.clone().map(TokenLogprobs::normalize).transpose()? {
        None => one_hot(&mut flags, "backend returned no logprobs".into())?,
        Some(lp) => match answer_position(&lp, num_options) {
            None => one_hot(&mut flags, "backend returned empty logprobs".into())?,
            Some(at) => {
                let pos = &lp.positions[at];
                let labels = label_logprobs(pos, num_options);
                if labels.iter().all(Option::is_some) {
                    let logits: Vec<f64> = labels.into_iter().map(Option::unwrap).collect();
                    restricted_softmax(&logits).map_err(|e| ProviderError::Malformed(e.to_string()))?
                } else if opts.allow_floor && labels.iter().any(Option::is_some) {
                    let min_observed = pos
                        .candidates
                        .iter()
                        .map(|c| c.logprob)
                        .fold(f64::INFINITY, f64::min);
                    let floored = apply_floor(&labels, min_observed)
                        .map_err(|e| ProviderError::Malformed(e.to_string()))?;
                    flags.push(FLAG_FLOOR);
                    restricted_softmax(&floored.logits)
                        .map_err(|e| ProviderError::Malformed(e.to_string()))?
                } else {
                    one_hot(&mut flags, "option labels missing from top candidates".into())?
                }
            }
        },
    };
    Ok(ScoredOptions {
        distribution,
        completion: response.text,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{ChatRule, MockProvider, MockResponse, MockScript};
    use crate::types::TokenCandidate;

    fn mock_with(resp: MockResponse) -> MockProvider {
        let mut s = MockScript::default();
        s.chat.push(ChatRule::contains(&["Q?"], resp));
        MockProvider::new(s)
    }

    #[test]
    fn equal_label_logprobs_split_evenly() {
        let m = mock_with(MockResponse::labels(&[("A", -0.1), ("B", -0.1)]));
        let s = score_options(&m, "Q?", 2, &ScoreOptions::default()).unwrap();
        assert_eq!(s.distribution.probs(), [0.5, 0.5]);
        assert!(s.flags.is_empty());
    }

    #[test]
    fn floor_rule_flags_and_concentrates() {
        let m = mock_with(MockResponse::labels(&[("A", -0.01), ("Z", -5.0)]));
        let s = score_options(&m, "Q?", 4, &ScoreOptions::default()).unwrap();
        assert!(s.distribution.probs()[0] > 0.99);
        assert_eq!(s.flags, [FLAG_FLOOR]);
    }

    #[test]
    fn missing_logprobs_is_capability_error_unless_fallback() {
        let m = mock_with(MockResponse::text("Answer|B"));
        let err = score_options(&m, "Q?", 4, &ScoreOptions::default()).unwrap_err();
        assert!(matches!(err, ProviderError::Capability(_)));
        let opts = ScoreOptions { one_hot_fallback: true, ..Default::default() };
        let s = score_options(&m, "Q?", 4, &opts).unwrap();
        assert_eq!(s.distribution.probs(), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.flags, [FLAG_ONE_HOT]);
    }

    #[test]
    fn answer_position_follows_pipe() {
        let pos = |t: &str| PositionLogprobs {
            token: t.into(),
            candidates: vec![TokenCandidate { token: t.into(), logprob: -0.1 }],
        };
        let lp = TokenLogprobs { positions: vec![pos("Answer"), pos("|"), pos("C")] };
        assert_eq!(answer_position(&lp, 4), Some(2));
        let lp = TokenLogprobs { positions: vec![pos("The"), pos(" D")] };
        assert_eq!(answer_position(&lp, 4), Some(1));
        let lp = TokenLogprobs { positions: vec![pos("x")] };
        assert_eq!(answer_position(&lp, 4), Some(0));
    }

    #[test]
    fn parses_answer_letter() {
        assert_eq!(parse_answer_letter("Answer|C", 4), Some(2));
        assert_eq!(parse_answer_letter("answer| b", 4), Some(1));
        assert_eq!(parse_answer_letter("Answer|Z", 4), None);
        assert_eq!(parse_answer_letter("B", 4), None);
    }
}
