//! Synthetic editing datasets.
//!
//! Every generator works over a small symbolic world whose pre- and
//! post-edit answers can be computed exactly, so scope membership is known
//! rather than estimated. Generators are deterministic in their seed.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::editor::EditDescriptor;

mod convsent;
mod fc;
mod qa;

pub use convsent::{gen_convsent, ConvSentConfig, ConvSentWorld, PROMPT_TEMPLATES};
pub use fc::{convert_vitaminc, gen_fc, gen_fc_rows, FcConfig, FcRows, FcWorld, VitaminCRow};
pub use qa::{gen_qa, gen_qa_hard, rank_window, QaConfig, QaWorld, HARD_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Qa,
    QaHard,
    Fc,
    ConvSent,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Qa => "qa",
            Task::QaHard => "qa_hard",
            Task::Fc => "fc",
            Task::ConvSent => "conv_sent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "qa" => Some(Task::Qa),
            "qa_hard" | "qa-hard" => Some(Task::QaHard),
            "fc" => Some(Task::Fc),
            "conv_sent" | "convsent" => Some(Task::ConvSent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InScopeSample {
    pub input: String,
    /// Gold post-edit answer.
    pub label: String,
    #[serde(default)]
    pub hard: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutOfScopeSample {
    pub input: String,
    #[serde(default)]
    pub hard: bool,
}

/// Pre-generated responses for generation-style edits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Responses {
    /// Responses with the sentiment the edit asks for.
    pub desired: Vec<String>,
    pub undesired: Vec<String>,
}

/// One edit with its in-scope and out-of-scope samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub edit: EditDescriptor,
    pub in_scope: Vec<InScopeSample>,
    pub out_of_scope: Vec<OutOfScopeSample>,
    pub task: Task,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<Responses>,
}

/// An (input, answer) pair from the pre-edit world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeled {
    pub input: String,
    pub label: String,
}

impl Labeled {
    pub fn new(input: impl Into<String>, label: impl Into<String>) -> Self {
        Labeled { input: input.into(), label: label.into() }
    }
}

/// Edit records plus the corpus the base model is trained on.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub records: Vec<EditRecord>,
    pub pretrain: Vec<Labeled>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<EditRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    /// Every text in the dataset, for building a vocabulary.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.pretrain {
            out.push(p.input.clone());
            out.push(p.label.clone());
        }
        for r in &self.records {
            out.push(r.edit.descriptor_text());
            out.extend(r.in_scope.iter().flat_map(|s| [s.input.clone(), s.label.clone()]));
            out.extend(r.out_of_scope.iter().map(|s| s.input.clone()));
            if let Some(resp) = &r.responses {
                out.extend(resp.desired.iter().cloned());
                out.extend(resp.undesired.iter().cloned());
            }
        }
        out
    }
}

/// The evaluation pool of a batch of edits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnionScope {
    /// In-scope samples with the index of the record they came from.
    pub in_scope: Vec<(usize, InScopeSample)>,
    pub out_of_scope: Vec<OutOfScopeSample>,
}

/// Union of the scopes of `records`.
///
/// In-scope inputs are deduplicated (first record wins). Out-of-scope inputs
/// are deduplicated, dropped when they fall inside another edit's scope, and
/// flagged hard if any record flags them hard.
pub fn union_scope(records: &[EditRecord]) -> UnionScope {
    let mut seen_in = BTreeSet::new();
    let mut in_scope = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for s in &r.in_scope {
            if seen_in.insert(s.input.clone()) {
                in_scope.push((i, s.clone()));
            }
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut hard: BTreeMap<String, bool> = BTreeMap::new();
    for r in records {
        for s in &r.out_of_scope {
            if seen_in.contains(&s.input) {
                continue;
            }
            match hard.get_mut(&s.input) {
                Some(h) => *h |= s.hard,
                None => {
                    hard.insert(s.input.clone(), s.hard);
                    order.push(s.input.clone());
                }
            }
        }
    }
    let out_of_scope = order
        .into_iter()
        .map(|input| {
            let h = hard[&input];
            OutOfScopeSample { input, hard: h }
        })
        .collect();
    UnionScope { in_scope, out_of_scope }
}

/// A world whose answers are known before and after any single edit.
pub trait World {
    /// Gold answer to `input`, before (`edit = None`) or after the edit.
    /// `None` if the input is not a question about this world.
    fn answer(&self, input: &str, edit: Option<&EditDescriptor>) -> Option<String>;
}

/// Checks that in-scope answers change under the edit and equal the stored
/// label, and that out-of-scope answers do not change. Returns one message
/// per violation.
pub fn check_scope(world: &dyn World, records: &[EditRecord]) -> Vec<String> {
    let mut problems = Vec::new();
    for r in records {
        let e = Some(&r.edit);
        for s in &r.in_scope {
            let before = world.answer(&s.input, None);
            let after = world.answer(&s.input, e);
            if after.is_none() || before == after || after.as_deref() != Some(s.label.as_str()) {
                problems.push(alloc::format!(
                    "{}: in-scope `{}` before {:?} after {:?} label {}",
                    r.edit.id,
                    s.input,
                    before,
                    after,
                    s.label
                ));
            }
        }
        for s in &r.out_of_scope {
            let before = world.answer(&s.input, None);
            let after = world.answer(&s.input, e);
            if before.is_none() || before != after {
                problems.push(alloc::format!(
                    "{}: out-of-scope `{}` before {:?} after {:?}",
                    r.edit.id,
                    s.input,
                    before,
                    after
                ));
            }
        }
    }
    problems
}

/// Fills `{name}` placeholders.
pub(crate) fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&alloc::format!("{{{k}}}"), v);
    }
    out
}

/// Matches `text` against a template whose placeholders each capture one
/// whitespace token. Comparison is case-insensitive.
pub(crate) fn match_template(template: &str, text: &str) -> Option<BTreeMap<String, String>> {
    let t: Vec<&str> = template.split_whitespace().collect();
    let x: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
    if t.len() != x.len() {
        return None;
    }
    let mut caps = BTreeMap::new();
    for (a, b) in t.iter().zip(&x) {
        if let Some(name) = a.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            if let Some(prev) = caps.insert(name.to_string(), b.clone()) {
                if &prev != b {
                    return None;
                }
            }
        } else if a.to_lowercase() != *b {
            return None;
        }
    }
    Some(caps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_match_captures_tokens() {
        let caps = match_template("what is the {r} of {s}", "What is the r1 of s7").unwrap();
        assert_eq!(caps["r"], "r1");
        assert_eq!(caps["s"], "s7");
        assert!(match_template("what is the {r} of {s}", "what is r1 of s7").is_none());
    }

    #[test]
    fn union_drops_out_of_scope_inputs_covered_by_another_edit() {
        let rec = |id: &str, inp: &[&str], out: &[(&str, bool)]| EditRecord {
            edit: EditDescriptor::pair(id, "x", "y"),
            in_scope: inp
                .iter()
                .map(|s| InScopeSample { input: s.to_string(), label: "y".into(), hard: false })
                .collect(),
            out_of_scope: out.iter().map(|(s, h)| OutOfScopeSample { input: s.to_string(), hard: *h }).collect(),
            task: Task::Qa,
            split: Split::Test,
            responses: None,
        };
        let u = union_scope(&[
            rec("a", &["p", "q"], &[("r", false), ("s", false)]),
            rec("b", &["s", "p"], &[("r", true), ("t", false)]),
        ]);
        let ins: Vec<_> = u.in_scope.iter().map(|(i, s)| (*i, s.input.as_str())).collect();
        assert_eq!(ins, [(0, "p"), (0, "q"), (1, "s")]);
        let outs: Vec<_> = u.out_of_scope.iter().map(|s| (s.input.as_str(), s.hard)).collect();
        assert_eq!(outs, [("r", true), ("t", false)]);
    }
}
