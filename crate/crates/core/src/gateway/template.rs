use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    ConditionAnalysis,
    HarnessGeneration,
    InputGeneration,
    MutatorGeneration,
    RepairRefinement,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        Self::ConditionAnalysis,
        Self::HarnessGeneration,
        Self::InputGeneration,
        Self::MutatorGeneration,
        Self::RepairRefinement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConditionAnalysis => "condition_analysis",
            Self::HarnessGeneration => "harness_generation",
            Self::InputGeneration => "input_generation",
            Self::MutatorGeneration => "mutator_generation",
            Self::RepairRefinement => "repair_refinement",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing slot {0}")]
    MissingSlot(String),
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error("declared slots {declared:?} do not match placeholders {found:?}")]
    SlotMismatch { declared: Vec<String>, found: Vec<String> },
}

/// Prompt body with `{{slot}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: String,
    required_slots: Vec<String>,
}

impl PromptTemplate {
    /// Builds a template whose required slots are the placeholders in `body`.
    pub fn new(name: TemplateName, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_slots = placeholders(&body).into_iter().collect();
        Self { name, body, required_slots }
    }

    /// Builds a template and checks that `slots` are exactly its placeholders.
    pub fn with_slots(name: TemplateName, body: impl Into<String>, slots: &[&str]) -> Result<Self, TemplateError> {
        let t = Self::new(name, body);
        let declared: BTreeSet<String> = slots.iter().map(|s| s.to_string()).collect();
        let found: BTreeSet<String> = t.required_slots.iter().cloned().collect();
        if declared != found {
            return Err(TemplateError::SlotMismatch {
                declared: declared.into_iter().collect(),
                found: found.into_iter().collect(),
            });
        }
        Ok(t)
    }

    pub fn builtin(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::ConditionAnalysis => include_str!("../../assets/prompts/condition_analysis.txt"),
            TemplateName::HarnessGeneration => include_str!("../../assets/prompts/harness_generation.txt"),
            TemplateName::InputGeneration => include_str!("../../assets/prompts/input_generation.txt"),
            TemplateName::MutatorGeneration => include_str!("../../assets/prompts/mutator_generation.txt"),
            TemplateName::RepairRefinement => include_str!("../../assets/prompts/repair_refinement.txt"),
        };
        Self::new(name, body)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required_slots(&self) -> &[String] {
        &self.required_slots
    }

    /// Substitutes every placeholder. Slot values are inserted verbatim and
    /// never re-scanned for placeholders.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        if let Some(missing) = self.required_slots.iter().find(|s| !slots.contains_key(*s)) {
            return Err(TemplateError::MissingSlot(missing.clone()));
        }
        if let Some(unknown) = slots.keys().find(|k| !self.required_slots.contains(k)) {
            return Err(TemplateError::UnknownSlot(unknown.clone()));
        }
        let mut out = String::with_capacity(self.body.len() + slots.values().map(String::len).sum::<usize>());
        let mut rest = self.body.as_str();
        while let Some((before, name, after)) = next_placeholder(rest) {
            out.push_str(before);
            out.push_str(&slots[name]);
            rest = after;
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Convenience for building slot maps inline.
pub fn slots<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn is_slot_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Splits at the first `{{name}}`: (text before, name, text after).
fn next_placeholder(s: &str) -> Option<(&str, &str, &str)> {
    let mut from = 0;
    while let Some(pos) = s[from..].find("{{") {
        let start = from + pos;
        let inner = &s[start + 2..];
        if let Some(end) = inner.find("}}") {
            let name = &inner[..end];
            if !name.is_empty() && name.chars().all(is_slot_char) {
                return Some((&s[..start], name, &inner[end + 2..]));
            }
        }
        from = start + 2;
    }
    None
}

fn placeholders(body: &str) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    let mut rest = body;
    while let Some((_, name, after)) = next_placeholder(rest) {
        found.insert(name.to_string());
        rest = after;
    }
    found
}
