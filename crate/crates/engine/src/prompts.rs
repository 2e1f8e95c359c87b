//! Prompt templates with `{name}` placeholders. Built-in copies are
//! compiled in; a directory of same-named `.txt` files can override them.

use std::collections::BTreeMap;
use std::path::Path;

use uragc_core::{option_letter, McqaInstance};

use crate::error::{EngineError, Result};

const BUILTIN: &[(&str, &str)] = &[
    ("mcqa", include_str!("../prompts/mcqa.txt")),
    ("mcqa_no_context", include_str!("../prompts/mcqa_no_context.txt")),
    ("mcqa_draft", include_str!("../prompts/mcqa_draft.txt")),
    ("confidence_block", include_str!("../prompts/confidence_block.txt")),
    ("hyde", include_str!("../prompts/hyde.txt")),
    ("fusion_system", include_str!("../prompts/fusion_system.txt")),
    ("fusion_user", include_str!("../prompts/fusion_user.txt")),
    ("rat_draft", include_str!("../prompts/rat_draft.txt")),
    ("rat_query", include_str!("../prompts/rat_query.txt")),
    ("rat_revise", include_str!("../prompts/rat_revise.txt")),
    ("selfrag_decide", include_str!("../prompts/selfrag_decide.txt")),
    ("selfrag_reflect", include_str!("../prompts/selfrag_reflect.txt")),
    ("raptor_summary", include_str!("../prompts/raptor_summary.txt")),
    ("forge_naive", include_str!("../prompts/forge_naive.txt")),
    ("forge_full", include_str!("../prompts/forge_full.txt")),
    ("forge_regen", include_str!("../prompts/forge_regen.txt")),
];

/// Substitutes `{key}` for each provided key in a single left-to-right
/// pass. Braces that do not name a provided key are kept verbatim, so
/// substituted values are never re-expanded.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let key = &tail[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    templates: BTreeMap<String, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Built-ins overridden by any `<name>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut set = Self::default();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
                set.templates.insert(name.to_string(), text);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unknown prompt template {name}"))
    }

    /// Non-empty lines of a pool template (one variant per line).
    pub fn pool(&self, name: &str) -> Vec<&str> {
        self.get(name).lines().filter(|l| !l.trim().is_empty()).collect()
    }

    pub fn fill(&self, name: &str, vars: &[(&str, &str)]) -> String {
        render(self.get(name), vars)
    }

    /// Confidence block for self-aware and wrong-aware prompting; empty
    /// when nothing is displayed.
    pub fn confidence_block(&self, displayed: Option<&[f64]>) -> String {
        match displayed {
            None => String::new(),
            Some(p) => self.fill("confidence_block", &[("confidence_lines", &confidence_lines(p))]),
        }
    }
}

/// `A. 0.70` lines, one per option, in option order.
pub fn confidence_lines(probs: &[f64]) -> String {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {p:.2}", option_letter(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `A. text` lines, one per option.
pub fn render_options(instance: &McqaInstance) -> String {
    instance
        .options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", option_letter(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_substitution() {
        let out = render("{a} {b} {c} {{json}}", &[("a", "{b}"), ("b", "x")]);
        assert_eq!(out, "{b} x {c} {{json}}");
    }

    #[test]
    fn confidence_lines_format() {
        assert_eq!(confidence_lines(&[0.7, 0.2, 0.1]), "A. 0.70\nB. 0.20\nC. 0.10");
    }

    #[test]
    fn mcqa_block_placement() {
        let set = PromptSet::default();
        let plain = set.fill("mcqa", &[("confidence_block", "")]);
        assert!(plain.contains("provided context.\n\nDo not explain"));
        let block = set.confidence_block(Some(&[0.5, 0.5]));
        let aware = set.fill("mcqa", &[("confidence_block", &block)]);
        assert!(aware.contains("confidence:\n\nA. 0.50\nB. 0.50\n\nDo not explain"));
        assert_eq!(aware.matches("Knowing that").count(), 1);
    }

    #[test]
    fn pools_have_expected_sizes() {
        let set = PromptSet::default();
        assert_eq!(set.pool("fusion_system").len(), 5);
        assert_eq!(set.pool("fusion_user").len(), 6);
    }

    #[test]
    fn overrides_replace_builtins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("hyde.txt"), "Q={question}").unwrap();
        let set = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.fill("hyde", &[("question", "x")]), "Q=x");
        assert!(set.get("mcqa").contains("Answer|X"));
    }
}
