//! Component-wise error accounting and the multi-edit protocol.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{FtConfig, FtEditor, LuEditor, RetrievePrompt};
use crate::datagen::{union_scope, EditRecord};
use crate::editor::{Components, EditDescriptor, Serac};
use crate::error::Result;
use crate::metrics::{exact_match, EditedModel, Source};
use crate::predictor::SeqPredictor;
use crate::text::Tokenizer;

/// Counts for one cell of the easy/hard × in/out breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    /// In-scope: answers equal to the gold label.
    pub correct: usize,
    /// Out-of-scope: answers that differ from the base model.
    pub changed: usize,
    /// Samples whose output came from a routing decision (not parametric).
    pub routed: usize,
    /// Routing agreed with the gold scope: the sample's own edit for
    /// in-scope inputs, the base model for out-of-scope inputs.
    pub route_correct: usize,
    /// In-scope samples answered by the counterfactual with the own edit forced.
    pub cf_evaluated: usize,
    pub cf_correct: usize,
}

impl SplitStats {
    pub fn classifier_accuracy(&self) -> Option<f64> {
        ratio(self.route_correct, self.routed)
    }

    pub fn counterfactual_accuracy(&self) -> Option<f64> {
        ratio(self.cf_correct, self.cf_evaluated)
    }

    fn add(&mut self, other: &SplitStats) {
        self.count += other.count;
        self.correct += other.correct;
        self.changed += other.changed;
        self.routed += other.routed;
        self.route_correct += other.route_correct;
        self.cf_evaluated += other.cf_evaluated;
        self.cf_correct += other.cf_correct;
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Where errors came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub in_total: usize,
    pub in_errors: usize,
    /// In-scope samples routed to the base model (classifier false negatives).
    pub missed: usize,
    pub missed_wrong: usize,
    /// Own edit retrieved but the answer is wrong.
    pub own_wrong: usize,
    /// Another edit retrieved and the answer is wrong.
    pub other_wrong: usize,
    pub parametric_wrong: usize,
    pub out_total: usize,
    pub out_changed: usize,
    /// Out-of-scope samples routed to an edit (classifier false positives).
    pub false_positives: usize,
    pub fp_changed: usize,
    /// Out-of-scope samples routed to the base model whose answer still changed.
    pub base_route_changed: usize,
    pub parametric_changed: usize,
}

impl Decomposition {
    pub fn identity_holds(&self) -> bool {
        self.in_errors == self.missed_wrong + self.own_wrong + self.other_wrong + self.parametric_wrong
            && self.out_changed == self.fp_changed + self.base_route_changed + self.parametric_changed
            && self.missed_wrong <= self.missed
            && self.fp_changed <= self.false_positives
    }

    pub fn es(&self) -> Option<f64> {
        ratio(self.in_total - self.in_errors, self.in_total)
    }

    pub fn dd(&self) -> f64 {
        ratio(self.out_changed, self.out_total).unwrap_or(0.0)
    }

    pub fn add(&mut self, o: &Decomposition) {
        self.in_total += o.in_total;
        self.in_errors += o.in_errors;
        self.missed += o.missed;
        self.missed_wrong += o.missed_wrong;
        self.own_wrong += o.own_wrong;
        self.other_wrong += o.other_wrong;
        self.parametric_wrong += o.parametric_wrong;
        self.out_total += o.out_total;
        self.out_changed += o.out_changed;
        self.false_positives += o.false_positives;
        self.fp_changed += o.fp_changed;
        self.base_route_changed += o.base_route_changed;
        self.parametric_changed += o.parametric_changed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Micro-averaged edit success; `None` without in-scope samples.
    pub es: Option<f64>,
    pub dd: f64,
    /// Mean over edits of per-edit success.
    pub macro_es: Option<f64>,
    /// Edits with at least one in-scope sample (the `macro_es` denominator).
    #[serde(default)]
    pub scored_edits: usize,
    pub easy_in: SplitStats,
    pub hard_in: SplitStats,
    pub easy_out: SplitStats,
    pub hard_out: SplitStats,
    pub decomposition: Decomposition,
}

impl EvalReport {
    /// Report with no samples.
    pub fn empty() -> Self {
        EvalReport {
            es: None,
            dd: 0.0,
            macro_es: None,
            scored_edits: 0,
            easy_in: SplitStats::default(),
            hard_in: SplitStats::default(),
            easy_out: SplitStats::default(),
            hard_out: SplitStats::default(),
            decomposition: Decomposition::default(),
        }
    }

    /// Adds the counts of `other`; ES and DD are recomputed from the pooled
    /// counts and `macro_es` is weighted by scored edits.
    pub fn merge(&mut self, other: &EvalReport) {
        self.easy_in.add(&other.easy_in);
        self.hard_in.add(&other.hard_in);
        self.easy_out.add(&other.easy_out);
        self.hard_out.add(&other.hard_out);
        self.decomposition.add(&other.decomposition);
        let n = self.scored_edits + other.scored_edits;
        self.macro_es = match (self.macro_es, other.macro_es) {
            (Some(a), Some(b)) => Some((a * self.scored_edits as f64 + b * other.scored_edits as f64) / n as f64),
            (a, b) => a.or(b),
        };
        self.scored_edits = n;
        self.es = self.decomposition.es();
        self.dd = self.decomposition.dd();
    }

    pub fn in_scope(&self) -> SplitStats {
        let mut s = self.easy_in;
        s.add(&self.hard_in);
        s
    }

    pub fn out_of_scope(&self) -> SplitStats {
        let mut s = self.easy_out;
        s.add(&self.hard_out);
        s
    }

    /// Checks the decomposition against the split counts and the headline
    /// metrics.
    pub fn identity_holds(&self) -> bool {
        let d = &self.decomposition;
        let i = self.in_scope();
        let o = self.out_of_scope();
        d.identity_holds()
            && i.count == d.in_total
            && i.count - i.correct == d.in_errors
            && o.count == d.out_total
            && o.changed == d.out_changed
            && self.es == d.es()
            && self.dd == d.dd()
    }
}

/// Evaluates `edited` on every sample of `records` and attributes each error
/// to the component that produced it.
pub fn decompose_errors(
    edited: &dyn EditedModel,
    base: &dyn EditedModel,
    records: &[EditRecord],
) -> Result<EvalReport> {
    let tok = edited.tokenizer();
    let mut d = Decomposition::default();
    let (mut easy_in, mut hard_in, mut easy_out, mut hard_out) = Default::default();
    let mut per_edit = Vec::new();

    for r in records {
        let mut edit_hits = 0usize;
        for s in &r.in_scope {
            let out = edited.output(&s.input)?;
            let ok = exact_match(tok, &out.prediction.tokens, &s.label);
            let cell: &mut SplitStats = if s.hard { &mut hard_in } else { &mut easy_in };
            cell.count += 1;
            d.in_total += 1;
            if ok {
                cell.correct += 1;
                edit_hits += 1;
            } else {
                d.in_errors += 1;
            }
            match &out.source {
                Source::Base => {
                    cell.routed += 1;
                    d.missed += 1;
                    d.missed_wrong += usize::from(!ok);
                }
                Source::Edit { id } => {
                    cell.routed += 1;
                    if *id == r.edit.id {
                        cell.route_correct += 1;
                        d.own_wrong += usize::from(!ok);
                    } else {
                        d.other_wrong += usize::from(!ok);
                    }
                }
                Source::Parametric => d.parametric_wrong += usize::from(!ok),
            }
            if let Some(p) = edited.forced(&r.edit, &s.input)? {
                cell.cf_evaluated += 1;
                cell.cf_correct += usize::from(exact_match(tok, &p.tokens, &s.label));
            }
        }
        if !r.in_scope.is_empty() {
            per_edit.push(edit_hits as f64 / r.in_scope.len() as f64);
        }

        for s in &r.out_of_scope {
            let out = edited.output(&s.input)?;
            let changed = out.prediction.tokens != base.answer(&s.input)?;
            let cell: &mut SplitStats = if s.hard { &mut hard_out } else { &mut easy_out };
            cell.count += 1;
            d.out_total += 1;
            cell.changed += usize::from(changed);
            d.out_changed += usize::from(changed);
            match &out.source {
                Source::Base => {
                    cell.routed += 1;
                    cell.route_correct += 1;
                    d.base_route_changed += usize::from(changed);
                }
                Source::Edit { .. } => {
                    cell.routed += 1;
                    d.false_positives += 1;
                    d.fp_changed += usize::from(changed);
                }
                Source::Parametric => d.parametric_changed += usize::from(changed),
            }
        }
    }

    let macro_es = (!per_edit.is_empty()).then(|| per_edit.iter().sum::<f64>() / per_edit.len() as f64);
    Ok(EvalReport {
        es: d.es(),
        dd: d.dd(),
        macro_es,
        scored_edits: per_edit.len(),
        easy_in,
        hard_in,
        easy_out,
        hard_out,
        decomposition: d,
    })
}

/// Records restricted to the union scope of the batch: in-scope duplicates
/// keep their first owner and out-of-scope samples move to the first record.
pub fn pool_records(records: &[EditRecord]) -> Vec<EditRecord> {
    let union = union_scope(records);
    let mut pooled: Vec<EditRecord> =
        records.iter().map(|r| EditRecord { in_scope: Vec::new(), out_of_scope: Vec::new(), ..r.clone() }).collect();
    for (i, s) in union.in_scope {
        pooled[i].in_scope.push(s);
    }
    if let Some(first) = pooled.first_mut() {
        first.out_of_scope = union.out_of_scope;
    }
    pooled
}

/// Cuts `records` into consecutive batches of `k` (the last may be
/// shorter), applies each batch to a fresh editor and pools the reports.
pub fn eval_in_batches(
    factory: &dyn EditorFactory,
    base: &dyn EditedModel,
    records: &[EditRecord],
    k: usize,
) -> Result<EvalReport> {
    let mut total = EvalReport::empty();
    if k == 0 {
        return Ok(total);
    }
    for batch in records.chunks(k) {
        let edits: Vec<EditDescriptor> = batch.iter().map(|r| r.edit.clone()).collect();
        let editor = factory.build(&edits)?;
        total.merge(&decompose_errors(editor.as_ref(), base, &pool_records(batch))?);
    }
    Ok(total)
}

/// Builds an editor with a batch of edits applied.
pub trait EditorFactory {
    fn build<'s>(&'s self, edits: &[EditDescriptor]) -> Result<Box<dyn EditedModel + 's>>;
}

impl<'a> EditorFactory for Components<'a> {
    fn build<'s>(&'s self, edits: &[EditDescriptor]) -> Result<Box<dyn EditedModel + 's>> {
        let mut s = Serac::new(*self);
        s.add_edits(edits)?;
        Ok(Box::new(s))
    }
}

/// Builds [`LuEditor`]s.
#[derive(Debug, Clone, Copy)]
pub struct LuFactory<'a> {
    pub tokenizer: &'a Tokenizer,
    pub base: &'a SeqPredictor,
    pub delta: f64,
}

impl EditorFactory for LuFactory<'_> {
    fn build<'s>(&'s self, edits: &[EditDescriptor]) -> Result<Box<dyn EditedModel + 's>> {
        let mut e = LuEditor::new(self.tokenizer, self.base, self.delta)?;
        e.add_edits(edits)?;
        Ok(Box::new(e))
    }
}

/// Builds [`FtEditor`]s.
#[derive(Debug, Clone)]
pub struct FtFactory<'a> {
    pub tokenizer: &'a Tokenizer,
    pub base: &'a SeqPredictor,
    pub config: FtConfig,
}

impl EditorFactory for FtFactory<'_> {
    fn build<'s>(&'s self, edits: &[EditDescriptor]) -> Result<Box<dyn EditedModel + 's>> {
        Ok(Box::new(FtEditor::new(self.tokenizer, self.base, edits, &self.config)?))
    }
}

/// Builds [`RetrievePrompt`] editors.
#[derive(Debug, Clone, Copy)]
pub struct RpFactory<'a> {
    pub tokenizer: &'a Tokenizer,
    pub classifier: &'a crate::classifier::ScopeClassifier,
    pub base: &'a SeqPredictor,
}

impl EditorFactory for RpFactory<'_> {
    fn build<'s>(&'s self, edits: &[EditDescriptor]) -> Result<Box<dyn EditedModel + 's>> {
        let mut e = RetrievePrompt::new(self.tokenizer, self.classifier, self.base);
        e.add_edits(edits)?;
        Ok(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub es: Option<f64>,
    pub dd: f64,
    /// Number of batches averaged.
    pub batches: usize,
}

impl CurvePoint {
    /// `es − dd`, with missing ES treated as zero.
    pub fn es_minus_dd(&self) -> f64 {
        self.es.unwrap_or(0.0) - self.dd
    }
}

/// For each k, shuffles the records with `seed`, cuts the first ⌊M/k⌋·k into
/// disjoint batches of k, applies each batch at once and evaluates over its
/// union scope. Counts are pooled across batches (micro averaging).
pub fn multi_edit_eval(
    factory: &dyn EditorFactory,
    base: &dyn EditedModel,
    records: &[EditRecord],
    ks: &[usize],
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let mut curve = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 || k > records.len() {
            curve.push(CurvePoint { k, es: None, dd: 0.0, batches: 0 });
            continue;
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let mut total = Decomposition::default();
        let batches = records.len() / k;
        for b in 0..batches {
            let batch: Vec<EditRecord> = order[b * k..(b + 1) * k].iter().map(|&i| records[i].clone()).collect();
            let edits: Vec<EditDescriptor> = batch.iter().map(|r| r.edit.clone()).collect();
            let editor = factory.build(&edits)?;
            let d = decompose_errors(editor.as_ref(), base, &pool_records(&batch))?.decomposition;
            total.in_total += d.in_total;
            total.in_errors += d.in_errors;
            total.out_total += d.out_total;
            total.out_changed += d.out_changed;
        }
        curve.push(CurvePoint { k, es: total.es(), dd: total.dd(), batches });
    }
    Ok(curve)
}
