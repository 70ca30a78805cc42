//! Comparison editors: cache+lookup (LU), fine-tuning (FT) and
//! retrieve-and-prompt (RP).

use alloc::borrow::Cow;
use alloc::vec::Vec;

use crate::classifier::ScopeClassifier;
use crate::editor::{counterfactual_context, EditDescriptor, EditMemory, RoutingTrace, ScopeRouter};
use crate::error::{Error, Result};
use crate::math::{self, LOG_EPS};
use crate::metrics::{fixed_prediction, EditedModel, Output, Source};
use crate::optim::OptimizerKind;
use crate::predictor::{LogLikelihood, Prediction, PredictorExample, SeqPredictor};
use crate::text::{TokenSeq, Tokenizer};

/// Lookup radius used for question answering.
pub const LU_DELTA_QA: f64 = 2.75;
/// Lookup radius used for fact checking.
pub const LU_DELTA_FC: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LuEntry {
    pub id: alloc::string::String,
    /// Base-model hidden state of `x_e`.
    pub key: Vec<f64>,
    pub target: TokenSeq,
}

/// Hidden states of edit inputs and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LuCache {
    entries: Vec<LuEntry>,
    delta: f64,
}

impl LuCache {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("lookup radius {delta} must be > 0")));
        }
        Ok(LuCache { entries: Vec::new(), delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn entries(&self) -> &[LuEntry] {
        &self.entries
    }

    pub fn from_entries(entries: Vec<LuEntry>, delta: f64) -> Result<Self> {
        let mut c = LuCache::new(delta)?;
        for e in entries {
            if c.entries.iter().any(|o| o.id == e.id) {
                return Err(Error::DuplicateEditId(e.id));
            }
            c.entries.push(e);
        }
        Ok(c)
    }

    /// Caches pair edits. Explicit edits carry no label and are rejected.
    pub fn add_edits(&mut self, edits: &[EditDescriptor], base: &SeqPredictor, tokenizer: &Tokenizer) -> Result<()> {
        let mut fresh = Vec::with_capacity(edits.len());
        for e in edits {
            e.validate()?;
            let (Some(x), Some(y)) = (e.input(), e.target()) else {
                return Err(Error::ExplicitEditUnsupported(e.id.clone()));
            };
            if self.entries.iter().chain(&fresh).any(|o: &LuEntry| o.id == e.id) {
                return Err(Error::DuplicateEditId(e.id.clone()));
            }
            fresh.push(LuEntry {
                id: e.id.clone(),
                key: base.hidden_state(&tokenizer.tokenize(x)),
                target: tokenizer.tokenize(y),
            });
        }
        self.entries.extend(fresh);
        Ok(())
    }

    /// Nearest entry by Euclidean distance (ties to the lowest index) and the distance.
    pub fn nearest(&self, hidden: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d = math::squared_distance(&e.key, hidden);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        best.map(|(i, d)| (i, math::sqrt(d)))
    }

    /// The cached entry answering `input`, if one lies strictly within δ.
    pub fn lookup(&self, base: &SeqPredictor, input: &TokenSeq) -> Option<&LuEntry> {
        let (i, dist) = self.nearest(&base.hidden_state(input))?;
        (dist < self.delta).then(|| &self.entries[i])
    }
}

/// The LU editor: cached targets near edit inputs, the base model elsewhere.
#[derive(Debug, Clone)]
pub struct LuEditor<'a> {
    pub tokenizer: &'a Tokenizer,
    pub base: &'a SeqPredictor,
    pub cache: LuCache,
}

impl<'a> LuEditor<'a> {
    pub fn new(tokenizer: &'a Tokenizer, base: &'a SeqPredictor, delta: f64) -> Result<Self> {
        Ok(LuEditor { tokenizer, base, cache: LuCache::new(delta)? })
    }

    pub fn add_edits(&mut self, edits: &[EditDescriptor]) -> Result<()> {
        self.cache.add_edits(edits, self.base, self.tokenizer)
    }

    pub fn predict(&self, input: &str) -> Prediction {
        self.output_tokens(&self.tokenizer.tokenize(input)).0
    }

    fn output_tokens(&self, x: &TokenSeq) -> (Prediction, Option<&LuEntry>) {
        match self.cache.lookup(self.base, x) {
            Some(e) => (fixed_prediction(&e.target, self.base.slots()), Some(e)),
            None => (self.base.predict(x), None),
        }
    }
}

impl EditedModel for LuEditor<'_> {
    fn tokenizer(&self) -> &Tokenizer {
        self.tokenizer
    }

    fn output(&self, input: &str) -> Result<Output> {
        let (prediction, hit) = self.output_tokens(&self.tokenizer.tokenize(input));
        let source = match hit {
            Some(e) => Source::Edit { id: e.id.clone() },
            None => Source::Base,
        };
        Ok(Output { prediction, source })
    }

    /// A hit is a point mass on the cached target.
    fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>> {
        let x = self.tokenizer.tokenize(input);
        Ok(match self.cache.lookup(self.base, &x) {
            Some(e) => {
                let p = fixed_prediction(&e.target, self.base.slots());
                p.slot_ids
                    .iter()
                    .map(|&t| {
                        let mut row = alloc::vec![f64::NEG_INFINITY; self.base.vocab_size()];
                        row[t as usize] = 0.0;
                        row
                    })
                    .collect()
            }
            None => self.base.slot_log_probs(&x),
        })
    }

    fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood> {
        let x = self.tokenizer.tokenize(input);
        match self.cache.lookup(self.base, &x) {
            Some(e) => {
                let scored = self.base.scored_target(target)?;
                let cached = fixed_prediction(&e.target, self.base.slots()).slot_ids;
                let total = scored.iter().zip(&cached).map(|(a, b)| if a == b { 0.0 } else { math::ln(LOG_EPS) }).sum();
                Ok(LogLikelihood { total, scored_tokens: scored.len() })
            }
            None => self.base.log_likelihood(&x, target),
        }
    }

    fn forced(&self, edit: &EditDescriptor, _input: &str) -> Result<Option<Prediction>> {
        let target = edit.target().ok_or_else(|| Error::ExplicitEditUnsupported(edit.id.clone()))?;
        Ok(Some(fixed_prediction(&self.tokenizer.tokenize(target), self.base.slots())))
    }
}

/// Fine-tuning schedule for [`ft_edit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FtConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once every edit's NLL is below this.
    pub tolerance: f64,
}

impl Default for FtConfig {
    fn default() -> Self {
        FtConfig { optimizer: OptimizerKind::Adam, learning_rate: 0.01, max_steps: 100, tolerance: 1e-3 }
    }
}

/// A copy of `base` fine-tuned on the edit pairs.
pub fn ft_edit(
    base: &SeqPredictor,
    edits: &[EditDescriptor],
    tokenizer: &Tokenizer,
    config: &FtConfig,
) -> Result<SeqPredictor> {
    let mut data = Vec::with_capacity(edits.len());
    for e in edits {
        let (Some(x), Some(y)) = (e.input(), e.target()) else {
            return Err(Error::ExplicitEditUnsupported(e.id.clone()));
        };
        data.push(PredictorExample { context: tokenizer.tokenize(x), target: tokenizer.tokenize(y), negative: None });
    }
    if data.is_empty() {
        return Ok(base.clone());
    }
    let mut model = base.clone();
    let mut opt = crate::optim::Optimizer::new(config.optimizer, config.learning_rate, &model);
    for _ in 0..config.max_steps {
        let converged = data.iter().try_fold(true, |acc, ex| {
            let ll = model.log_likelihood(&ex.context, &ex.target)?;
            Ok::<_, Error>(acc && -ll.total < config.tolerance)
        })?;
        if converged {
            break;
        }
        let (_, grad) = model.nll_loss(&data)?;
        opt.step(&mut model, &grad);
    }
    Ok(model)
}

/// A fine-tuned copy of the base model.
#[derive(Debug, Clone)]
pub struct FtEditor<'a> {
    pub tokenizer: &'a Tokenizer,
    pub model: SeqPredictor,
}

impl<'a> FtEditor<'a> {
    pub fn new(
        tokenizer: &'a Tokenizer,
        base: &SeqPredictor,
        edits: &[EditDescriptor],
        config: &FtConfig,
    ) -> Result<Self> {
        Ok(FtEditor { tokenizer, model: ft_edit(base, edits, tokenizer, config)? })
    }
}

impl EditedModel for FtEditor<'_> {
    fn tokenizer(&self) -> &Tokenizer {
        self.tokenizer
    }

    fn output(&self, input: &str) -> Result<Output> {
        let prediction = self.model.predict(&self.tokenizer.tokenize(input));
        Ok(Output { prediction, source: Source::Parametric })
    }

    fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>> {
        Ok(self.model.slot_log_probs(&self.tokenizer.tokenize(input)))
    }

    fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood> {
        self.model.log_likelihood(&self.tokenizer.tokenize(input), target)
    }
}

/// Retrieve-and-prompt: routes like the wrapped model but asks the base
/// model to answer `z_e <sep> x`.
#[derive(Debug, Clone)]
pub struct RetrievePrompt<'a> {
    tokenizer: &'a Tokenizer,
    router: ScopeRouter<'a>,
    base: &'a SeqPredictor,
    memory: Cow<'a, EditMemory>,
}

impl<'a> RetrievePrompt<'a> {
    pub fn new(tokenizer: &'a Tokenizer, classifier: &'a ScopeClassifier, base: &'a SeqPredictor) -> Self {
        let router = ScopeRouter::new(classifier);
        let memory = Cow::Owned(EditMemory::new(&router));
        RetrievePrompt { tokenizer, router, base, memory }
    }

    pub fn with_memory(
        tokenizer: &'a Tokenizer,
        classifier: &'a ScopeClassifier,
        base: &'a SeqPredictor,
        memory: Cow<'a, EditMemory>,
    ) -> Result<Self> {
        let router = ScopeRouter::new(classifier);
        memory.check(&router)?;
        Ok(RetrievePrompt { tokenizer, router, base, memory })
    }

    pub fn memory(&self) -> &EditMemory {
        &self.memory
    }

    pub fn add_edits(&mut self, edits: &[EditDescriptor]) -> Result<()> {
        let router = &self.router;
        self.memory.to_mut().add_edits(edits, router, self.tokenizer)
    }

    pub fn route(&self, input: &str) -> Result<RoutingTrace> {
        self.memory.route(&self.router, &self.tokenizer.tokenize(input))
    }

    fn resolve(&self, input: &str) -> Result<(TokenSeq, RoutingTrace)> {
        let trace = self.route(input)?;
        let ctx = match trace.retrieved() {
            Some(i) => self.tokenizer.tokenize(&counterfactual_context(&self.memory.entries()[i].edit, input)),
            None => self.tokenizer.tokenize(input),
        };
        Ok((ctx, trace))
    }

    pub fn predict(&self, input: &str) -> Result<(Prediction, RoutingTrace)> {
        let (ctx, trace) = self.resolve(input)?;
        Ok((self.base.predict(&ctx), trace))
    }
}

impl EditedModel for RetrievePrompt<'_> {
    fn tokenizer(&self) -> &Tokenizer {
        self.tokenizer
    }

    fn output(&self, input: &str) -> Result<Output> {
        let (prediction, trace) = self.predict(input)?;
        let source = match trace.retrieved() {
            Some(i) => Source::Edit { id: self.memory.entries()[i].edit.id.clone() },
            None => Source::Base,
        };
        Ok(Output { prediction, source })
    }

    fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>> {
        let (ctx, _) = self.resolve(input)?;
        Ok(self.base.slot_log_probs(&ctx))
    }

    fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood> {
        let (ctx, _) = self.resolve(input)?;
        self.base.log_likelihood(&ctx, target)
    }

    fn forced(&self, edit: &EditDescriptor, input: &str) -> Result<Option<Prediction>> {
        let ctx = self.tokenizer.tokenize(&counterfactual_context(edit, input));
        Ok(Some(self.base.predict(&ctx)))
    }
}
