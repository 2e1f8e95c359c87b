//! Context assembly under a token budget, using a 4-characters-per-token
//! estimate.

pub const CHARS_PER_TOKEN: usize = 4;

pub fn approx_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub text: String,
    /// Passage ids that made it into `text`, fully or cut.
    pub included: Vec<String>,
    pub truncated: bool,
}

fn numbered(i: usize, body: &str) -> String {
    format!("[{}] {}", i + 1, body.trim())
}

/// Concatenates passages in order and cuts the result at the budget.
pub fn concat_truncated(passages: &[(String, String)], max_tokens: usize) -> Context {
    let budget = max_tokens * CHARS_PER_TOKEN;
    let mut text = String::new();
    let mut used = 0usize;
    let mut included = Vec::new();
    let mut truncated = false;
    for (i, (id, body)) in passages.iter().enumerate() {
        let sep = if i == 0 { "" } else { "\n\n" };
        let piece = format!("{sep}{}", numbered(i, body));
        let len = piece.chars().count();
        if used + len <= budget {
            text.push_str(&piece);
            used += len;
            included.push(id.clone());
            continue;
        }
        truncated = true;
        let room = budget - used;
        if room > sep.len() {
            text.extend(piece.chars().take(room));
            included.push(id.clone());
        }
        break;
    }
    Context {
        text,
        included,
        truncated,
    }
}

/// Takes whole passages in order until the next one would not fit.
pub fn greedy_whole(passages: &[(String, String)], max_tokens: usize) -> Context {
    let mut text = String::new();
    let mut included = Vec::new();
    let mut truncated = false;
    for (i, (id, body)) in passages.iter().enumerate() {
        let candidate = if i == 0 {
            numbered(0, body)
        } else {
            format!("{text}\n\n{}", numbered(i, body))
        };
        if approx_tokens(&candidate) > max_tokens {
            truncated = true;
            break;
        }
        text = candidate;
        included.push(id.clone());
    }
    Context {
        text,
        included,
        truncated,
    }
}
