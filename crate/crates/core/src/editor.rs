//! Edit memory, scope routing and the wrapped model.

use alloc::borrow::Cow;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::classifier::{ScopeClassifier, ScopeScore};
use crate::error::{Error, Result};
use crate::predictor::{LogLikelihood, Prediction, SeqPredictor};
use crate::text::{Embedding, TokenSeq, Tokenizer, SEP_TOKEN};

/// What an edit asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditBody {
    /// "On `input`, answer `target`."
    Pair { input: String, target: String },
    /// A free-form behaviour directive such as `topic: x sentiment: positive`.
    Explicit { directive: String },
}

/// One edit `z_e`.
///
/// Serialized flat as `{id, kind, x_e, y_e, directive}` with the fields that
/// do not apply to the kind omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEdit", into = "RawEdit")]
pub struct EditDescriptor {
    pub id: String,
    pub body: EditBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Pair,
    Explicit,
}

#[derive(Serialize, Deserialize)]
struct RawEdit {
    id: String,
    kind: EditKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_e: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_e: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    directive: Option<String>,
}

impl TryFrom<RawEdit> for EditDescriptor {
    type Error = Error;

    fn try_from(raw: RawEdit) -> Result<Self> {
        let body = match (raw.kind, raw.x_e, raw.y_e, raw.directive) {
            (EditKind::Pair, Some(input), Some(target), None) => EditBody::Pair { input, target },
            (EditKind::Explicit, None, None, Some(directive)) => EditBody::Explicit { directive },
            (EditKind::Pair, ..) => {
                return Err(Error::InvalidEdit(format!("pair edit `{}` needs x_e and y_e and no directive", raw.id)))
            }
            (EditKind::Explicit, ..) => {
                return Err(Error::InvalidEdit(format!("explicit edit `{}` needs a directive and no x_e/y_e", raw.id)))
            }
        };
        let edit = EditDescriptor { id: raw.id, body };
        edit.validate()?;
        Ok(edit)
    }
}

impl From<EditDescriptor> for RawEdit {
    fn from(e: EditDescriptor) -> Self {
        match e.body {
            EditBody::Pair { input, target } => {
                RawEdit { id: e.id, kind: EditKind::Pair, x_e: Some(input), y_e: Some(target), directive: None }
            }
            EditBody::Explicit { directive } => {
                RawEdit { id: e.id, kind: EditKind::Explicit, x_e: None, y_e: None, directive: Some(directive) }
            }
        }
    }
}

impl EditDescriptor {
    pub fn pair(id: impl Into<String>, input: impl Into<String>, target: impl Into<String>) -> Self {
        EditDescriptor { id: id.into(), body: EditBody::Pair { input: input.into(), target: target.into() } }
    }

    pub fn explicit(id: impl Into<String>, directive: impl Into<String>) -> Self {
        EditDescriptor { id: id.into(), body: EditBody::Explicit { directive: directive.into() } }
    }

    pub fn kind(&self) -> EditKind {
        match self.body {
            EditBody::Pair { .. } => EditKind::Pair,
            EditBody::Explicit { .. } => EditKind::Explicit,
        }
    }

    /// `x_e` of a pair edit.
    pub fn input(&self) -> Option<&str> {
        match &self.body {
            EditBody::Pair { input, .. } => Some(input),
            EditBody::Explicit { .. } => None,
        }
    }

    /// `y_e` of a pair edit.
    pub fn target(&self) -> Option<&str> {
        match &self.body {
            EditBody::Pair { target, .. } => Some(target),
            EditBody::Explicit { .. } => None,
        }
    }

    /// Rejects empty ids and blank descriptor fields.
    pub fn validate(&self) -> Result<()> {
        let blank = |s: &str| s.trim().is_empty();
        if blank(&self.id) {
            return Err(Error::InvalidEdit(String::from("edit id must be non-empty")));
        }
        let ok = match &self.body {
            EditBody::Pair { input, target } => !blank(input) && !blank(target),
            EditBody::Explicit { directive } => !blank(directive),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidEdit(format!("edit `{}` has an empty descriptor field", self.id)))
        }
    }

    /// The serialized `z_e`: `x_e <sep> y_e` for pairs, the directive verbatim otherwise.
    pub fn descriptor_text(&self) -> String {
        match &self.body {
            EditBody::Pair { input, target } => format!("{input} {SEP_TOKEN} {target}"),
            EditBody::Explicit { directive } => directive.clone(),
        }
    }
}

/// Input text seen by the counterfactual model: `z_e <sep> x`.
pub fn counterfactual_context(edit: &EditDescriptor, input: &str) -> String {
    format!("{} {SEP_TOKEN} {input}", edit.descriptor_text())
}

/// A classifier together with its fingerprint, computed once.
#[derive(Debug, Clone)]
pub struct ScopeRouter<'a> {
    classifier: &'a ScopeClassifier,
    fingerprint: String,
}

impl<'a> ScopeRouter<'a> {
    pub fn new(classifier: &'a ScopeClassifier) -> Self {
        ScopeRouter { classifier, fingerprint: classifier.fingerprint() }
    }

    pub fn classifier(&self) -> &'a ScopeClassifier {
        self.classifier
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub edit: EditDescriptor,
    /// Classifier encoding of the descriptor text.
    pub embedding: Embedding,
}

/// Ordered cache of edits, tied to the classifier that embedded them.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMemory {
    entries: Vec<MemoryEntry>,
    classifier_hash: String,
}

impl EditMemory {
    pub fn new(router: &ScopeRouter<'_>) -> Self {
        EditMemory { entries: Vec::new(), classifier_hash: router.fingerprint.clone() }
    }

    /// Rebuilds a memory from stored entries. Ids must be unique.
    pub fn from_entries(entries: Vec<MemoryEntry>, classifier_hash: String) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            e.edit.validate()?;
            if !seen.insert(e.edit.id.as_str()) {
                return Err(Error::DuplicateEditId(e.edit.id.clone()));
            }
        }
        Ok(EditMemory { entries, classifier_hash })
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classifier_hash(&self) -> &str {
        &self.classifier_hash
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.edit.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.edit.id == id)
    }

    /// Fails with `StaleMemory` if the memory was embedded by another classifier.
    pub fn check(&self, router: &ScopeRouter<'_>) -> Result<()> {
        if self.classifier_hash == router.fingerprint {
            Ok(())
        } else {
            Err(Error::StaleMemory { memory: self.classifier_hash.clone(), active: router.fingerprint.clone() })
        }
    }

    /// Appends `edits` in order, all or nothing.
    pub fn add_edits(
        &mut self,
        edits: &[EditDescriptor],
        router: &ScopeRouter<'_>,
        tokenizer: &Tokenizer,
    ) -> Result<()> {
        self.check(router)?;
        let mut seen: BTreeSet<&str> = self.entries.iter().map(|e| e.edit.id.as_str()).collect();
        for e in edits {
            e.validate()?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateEditId(e.id.clone()));
            }
        }
        for e in edits {
            let z = tokenizer.tokenize(&e.descriptor_text());
            self.entries.push(MemoryEntry { edit: e.clone(), embedding: router.classifier.embed_descriptor(&z) });
        }
        Ok(())
    }

    /// Drops every entry; the classifier binding is kept.
    pub fn flush(&mut self) {
        self.entries.clear();
    }

    /// Scores `input` against every entry and picks the route.
    pub fn route(&self, router: &ScopeRouter<'_>, input: &TokenSeq) -> Result<RoutingTrace> {
        self.check(router)?;
        let x = router.classifier.encoder().encode(input);
        let scores: Vec<ScopeScore> =
            self.entries.iter().map(|e| router.classifier.score_embedded(&e.embedding, &x)).collect();
        Ok(RoutingTrace::from_scores(scores))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Base,
    Counterfactual,
}

/// Scores of every memory entry and the resulting decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub scores: Vec<ScopeScore>,
    /// Smallest index attaining the maximum score.
    pub winner: Option<usize>,
    pub beta: Option<ScopeScore>,
    pub route: Route,
}

impl RoutingTrace {
    pub fn from_scores(scores: Vec<ScopeScore>) -> Self {
        let mut winner: Option<usize> = None;
        for (i, s) in scores.iter().enumerate() {
            match winner {
                Some(w) if s.log_value() <= scores[w].log_value() => {}
                _ => winner = Some(i),
            }
        }
        let beta = winner.map(|w| scores[w]);
        let route = match beta {
            Some(b) if b.in_scope() => Route::Counterfactual,
            _ => Route::Base,
        };
        RoutingTrace { scores, winner, beta, route }
    }

    /// The winning entry index if the input is routed to the counterfactual model.
    pub fn retrieved(&self) -> Option<usize> {
        match self.route {
            Route::Counterfactual => self.winner,
            Route::Base => None,
        }
    }
}

/// The trained pieces a routed editor needs besides its memory.
#[derive(Debug, Clone, Copy)]
pub struct Components<'a> {
    pub tokenizer: &'a Tokenizer,
    pub classifier: &'a ScopeClassifier,
    pub counterfactual: &'a SeqPredictor,
    pub base: &'a SeqPredictor,
}

/// The wrapped model: base predictor, edit memory, scope classifier and
/// counterfactual predictor.
#[derive(Debug, Clone)]
pub struct Serac<'a> {
    tokenizer: &'a Tokenizer,
    router: ScopeRouter<'a>,
    counterfactual: &'a SeqPredictor,
    base: &'a SeqPredictor,
    memory: Cow<'a, EditMemory>,
}

impl<'a> Serac<'a> {
    /// An editor with an empty memory.
    pub fn new(parts: Components<'a>) -> Self {
        let router = ScopeRouter::new(parts.classifier);
        let memory = Cow::Owned(EditMemory::new(&router));
        Self::assemble(parts, router, memory)
    }

    /// An editor over an existing memory, which must match the classifier.
    pub fn with_memory(parts: Components<'a>, memory: Cow<'a, EditMemory>) -> Result<Self> {
        let router = ScopeRouter::new(parts.classifier);
        memory.check(&router)?;
        Ok(Self::assemble(parts, router, memory))
    }

    fn assemble(parts: Components<'a>, router: ScopeRouter<'a>, memory: Cow<'a, EditMemory>) -> Self {
        Serac { tokenizer: parts.tokenizer, router, counterfactual: parts.counterfactual, base: parts.base, memory }
    }

    pub fn memory(&self) -> &EditMemory {
        &self.memory
    }

    pub fn into_memory(self) -> EditMemory {
        self.memory.into_owned()
    }

    pub fn router(&self) -> &ScopeRouter<'a> {
        &self.router
    }

    pub fn tokenizer(&self) -> &'a Tokenizer {
        self.tokenizer
    }

    pub fn base(&self) -> &'a SeqPredictor {
        self.base
    }

    pub fn counterfactual(&self) -> &'a SeqPredictor {
        self.counterfactual
    }

    pub fn add_edits(&mut self, edits: &[EditDescriptor]) -> Result<()> {
        let router = &self.router;
        self.memory.to_mut().add_edits(edits, router, self.tokenizer)
    }

    pub fn flush(&mut self) {
        self.memory.to_mut().flush();
    }

    pub fn route(&self, input: &str) -> Result<RoutingTrace> {
        self.memory.route(&self.router, &self.tokenizer.tokenize(input))
    }

    /// The context the answering model sees, and which model answers.
    fn resolve(&self, input: &str) -> Result<(TokenSeq, &'a SeqPredictor, RoutingTrace)> {
        let trace = self.route(input)?;
        Ok(match trace.retrieved() {
            Some(i) => {
                let ctx = counterfactual_context(&self.memory.entries()[i].edit, input);
                (self.tokenizer.tokenize(&ctx), self.counterfactual, trace)
            }
            None => (self.tokenizer.tokenize(input), self.base, trace),
        })
    }

    pub fn predict(&self, input: &str) -> Result<(Prediction, RoutingTrace)> {
        let (ctx, model, trace) = self.resolve(input)?;
        Ok((model.predict(&ctx), trace))
    }

    pub fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>> {
        let (ctx, model, _) = self.resolve(input)?;
        Ok(model.slot_log_probs(&ctx))
    }

    pub fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood> {
        let (ctx, model, _) = self.resolve(input)?;
        model.log_likelihood(&ctx, target)
    }

    /// Counterfactual answer with `edit` retrieved, bypassing the classifier.
    pub fn forced_predict(&self, edit: &EditDescriptor, input: &str) -> Prediction {
        let ctx = counterfactual_context(edit, input);
        self.counterfactual.predict(&self.tokenizer.tokenize(&ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(values: &[f64]) -> Vec<ScopeScore> {
        values.iter().map(|&v| ScopeScore::from_log(crate::math::ln(v))).collect()
    }

    #[test]
    fn empty_memory_routes_to_base() {
        let t = RoutingTrace::from_scores(Vec::new());
        assert_eq!(t.route, Route::Base);
        assert_eq!(t.winner, None);
        assert_eq!(t.beta, None);
    }

    #[test]
    fn single_confident_edit_routes_to_counterfactual() {
        let t = RoutingTrace::from_scores(scores(&[0.9]));
        assert_eq!(t.route, Route::Counterfactual);
        assert!((t.beta.unwrap().value() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn half_is_in_scope() {
        let t = RoutingTrace::from_scores(scores(&[0.5]));
        assert_eq!(t.route, Route::Counterfactual);
        let t = RoutingTrace::from_scores(scores(&[0.4999]));
        assert_eq!(t.route, Route::Base);
    }

    #[test]
    fn ties_go_to_the_earliest_entry() {
        let t = RoutingTrace::from_scores(scores(&[0.2, 0.7, 0.7, 0.1]));
        assert_eq!(t.winner, Some(1));
    }

    #[test]
    fn descriptor_text_joins_pairs_with_sep() {
        let e = EditDescriptor::pair("a", "who leads x", "bob");
        assert_eq!(e.descriptor_text(), "who leads x <sep> bob");
        let e = EditDescriptor::explicit("b", "topic: tea sentiment: positive");
        assert_eq!(e.descriptor_text(), "topic: tea sentiment: positive");
    }

    #[test]
    fn blank_fields_are_rejected() {
        assert!(EditDescriptor::pair("a", " ", "b").validate().is_err());
        assert!(EditDescriptor::explicit("", "d").validate().is_err());
    }
}
