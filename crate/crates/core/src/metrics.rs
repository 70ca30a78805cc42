//! Edit success and drawdown metrics.
//!
//! Every editor (the wrapped model, the baselines and the unedited base
//! model) is evaluated through [`EditedModel`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::datagen::EditRecord;
use crate::editor::{EditDescriptor, Serac};
use crate::error::{Error, Result};
use crate::math;
use crate::predictor::{LogLikelihood, Prediction, SeqPredictor};
use crate::text::{TokenSeq, Tokenizer};

/// Which component produced an output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    /// The unedited base model answered.
    Base,
    /// A retrieved edit decided the answer.
    Edit { id: String },
    /// An editor without retrieval (for example fine-tuning) answered.
    Parametric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub prediction: Prediction,
    pub source: Source,
}

/// The interface every evaluated editor implements.
pub trait EditedModel {
    fn tokenizer(&self) -> &Tokenizer;

    fn output(&self, input: &str) -> Result<Output>;

    /// Log-distribution of every output slot.
    fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>>;

    fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood>;

    /// The answer the editor gives when `edit` is retrieved for `input`
    /// regardless of routing. `None` for editors without retrieval.
    fn forced(&self, _edit: &EditDescriptor, _input: &str) -> Result<Option<Prediction>> {
        Ok(None)
    }

    fn answer(&self, input: &str) -> Result<TokenSeq> {
        Ok(self.output(input)?.prediction.tokens)
    }
}

/// The base model with no editor attached.
#[derive(Debug, Clone, Copy)]
pub struct Unedited<'a> {
    pub tokenizer: &'a Tokenizer,
    pub model: &'a SeqPredictor,
}

impl<'a> Unedited<'a> {
    pub fn new(tokenizer: &'a Tokenizer, model: &'a SeqPredictor) -> Self {
        Unedited { tokenizer, model }
    }
}

impl EditedModel for Unedited<'_> {
    fn tokenizer(&self) -> &Tokenizer {
        self.tokenizer
    }

    fn output(&self, input: &str) -> Result<Output> {
        let prediction = self.model.predict(&self.tokenizer.tokenize(input));
        Ok(Output { prediction, source: Source::Base })
    }

    fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>> {
        Ok(self.model.slot_log_probs(&self.tokenizer.tokenize(input)))
    }

    fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood> {
        self.model.log_likelihood(&self.tokenizer.tokenize(input), target)
    }
}

impl EditedModel for Serac<'_> {
    fn tokenizer(&self) -> &Tokenizer {
        Serac::tokenizer(self)
    }

    fn output(&self, input: &str) -> Result<Output> {
        let (prediction, trace) = self.predict(input)?;
        let source = match trace.retrieved() {
            Some(i) => Source::Edit { id: self.memory().entries()[i].edit.id.clone() },
            None => Source::Base,
        };
        Ok(Output { prediction, source })
    }

    fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>> {
        Serac::slot_log_probs(self, input)
    }

    fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood> {
        Serac::log_likelihood(self, input, target)
    }

    fn forced(&self, edit: &EditDescriptor, input: &str) -> Result<Option<Prediction>> {
        Ok(Some(self.forced_predict(edit, input)))
    }
}

/// Exact match after PAD stripping; the gold text goes through the editor's
/// tokenizer, which also lowercases it.
pub fn exact_match(tokenizer: &Tokenizer, predicted: &TokenSeq, gold: &str) -> bool {
    predicted.strip_pad() == tokenizer.tokenize(gold).strip_pad()
}

/// Fraction of in-scope samples answered with their gold label.
pub fn es_exact(edited: &dyn EditedModel, records: &[EditRecord]) -> Result<f64> {
    let mut n = 0usize;
    let mut hits = 0usize;
    for r in records {
        for s in &r.in_scope {
            n += 1;
            if exact_match(edited.tokenizer(), &edited.answer(&s.input)?, &s.label) {
                hits += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoInScopeSamples);
    }
    Ok(hits as f64 / n as f64)
}

/// Fraction of out-of-scope samples whose answer differs from the base
/// model's. Zero when there are no out-of-scope samples.
pub fn dd_exact(edited: &dyn EditedModel, base: &dyn EditedModel, records: &[EditRecord]) -> Result<f64> {
    let mut n = 0usize;
    let mut changed = 0usize;
    for r in records {
        for s in &r.out_of_scope {
            n += 1;
            if edited.answer(&s.input)? != base.answer(&s.input)? {
                changed += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { changed as f64 / n as f64 })
}

/// `σ(l⁺ − l⁻)`.
pub fn z_sent(l_pos: f64, l_neg: f64) -> f64 {
    math::sigmoid(l_pos - l_neg)
}

/// `min(1, exp(l⁺_e − l⁺_base))`.
pub fn z_topic(l_pos_edited: f64, l_pos_base: f64) -> f64 {
    math::exp(l_pos_edited - l_pos_base).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentimentScores {
    pub z_sent: f64,
    pub z_topic: f64,
    /// `z_sent · z_topic`.
    pub es: f64,
}

/// Mean over `responses` of the per-token average log-likelihood.
pub fn mean_response_likelihood(model: &dyn EditedModel, prompt: &str, responses: &[String]) -> Result<f64> {
    let mut acc = 0.0;
    for r in responses {
        let target = model.tokenizer().tokenize(r);
        acc += model.log_likelihood(prompt, &target)?.per_token();
    }
    Ok(acc / responses.len() as f64)
}

/// Sentiment success for one prompt given desired and undesired responses.
pub fn sentiment_scores(
    edited: &dyn EditedModel,
    base: &dyn EditedModel,
    prompt: &str,
    desired: &[String],
    undesired: &[String],
) -> Result<SentimentScores> {
    if desired.is_empty() || undesired.is_empty() {
        return Err(Error::MissingResponses(format!(
            "prompt `{prompt}` needs at least one response of each sentiment"
        )));
    }
    let l_pos = mean_response_likelihood(edited, prompt, desired)?;
    let l_neg = mean_response_likelihood(edited, prompt, undesired)?;
    let l_base = mean_response_likelihood(base, prompt, desired)?;
    let zs = z_sent(l_pos, l_neg);
    let zt = z_topic(l_pos, l_base);
    Ok(SentimentScores { z_sent: zs, z_topic: zt, es: zs * zt })
}

/// Mean sentiment success over the in-scope prompts of `records`.
pub fn es_sentiment(edited: &dyn EditedModel, base: &dyn EditedModel, records: &[EditRecord]) -> Result<f64> {
    let mut n = 0usize;
    let mut acc = 0.0;
    for r in records {
        let resp = r.responses.as_ref().ok_or_else(|| Error::MissingResponses(format!("record `{}`", r.edit.id)))?;
        for s in &r.in_scope {
            acc += sentiment_scores(edited, base, &s.input, &resp.desired, &resp.undesired)?.es;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoInScopeSamples);
    }
    Ok(acc / n as f64)
}

/// `Σ_slots KL(p_base ‖ p_edited)` for one input.
pub fn slot_kl(base: &[Vec<f64>], edited: &[Vec<f64>]) -> f64 {
    base.iter().zip(edited).map(|(p, q)| math::kl_from_log_probs(p, q)).sum()
}

/// Mean slot-summed KL between base and edited output distributions.
pub fn dd_sentiment<'s, I>(edited: &dyn EditedModel, base: &dyn EditedModel, prompts: I) -> Result<f64>
where
    I: IntoIterator<Item = &'s str>,
{
    let mut n = 0usize;
    let mut acc = 0.0;
    for x in prompts {
        acc += slot_kl(&base.slot_log_probs(x)?, &edited.slot_log_probs(x)?);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Out-of-scope prompts of `records`, for [`dd_sentiment`].
pub fn out_of_scope_inputs(records: &[EditRecord]) -> Vec<&str> {
    records.iter().flat_map(|r| r.out_of_scope.iter().map(|s| s.input.as_str())).collect()
}

/// A prediction that deterministically returns `tokens` (used by lookup editors).
pub fn fixed_prediction(tokens: &TokenSeq, slots: usize) -> Prediction {
    let mut slot_ids: Vec<u32> = tokens.iter().copied().take(slots).collect();
    slot_ids.resize(slots, crate::text::PAD);
    Prediction {
        tokens: TokenSeq::new(slot_ids.clone()).strip_pad(),
        slot_ids,
        slot_log_probs: alloc::vec![0.0; slots],
        log_prob: 0.0,
    }
}

impl<T: EditedModel + ?Sized> EditedModel for alloc::boxed::Box<T> {
    fn tokenizer(&self) -> &Tokenizer {
        (**self).tokenizer()
    }
    fn output(&self, input: &str) -> Result<Output> {
        (**self).output(input)
    }
    fn slot_log_probs(&self, input: &str) -> Result<Vec<Vec<f64>>> {
        (**self).slot_log_probs(input)
    }
    fn log_likelihood(&self, input: &str, target: &[u32]) -> Result<LogLikelihood> {
        (**self).log_likelihood(input, target)
    }
    fn forced(&self, edit: &EditDescriptor, input: &str) -> Result<Option<Prediction>> {
        (**self).forced(edit, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_margin_gives_half() {
        assert_eq!(z_sent(-1.3, -1.3), 0.5);
    }

    #[test]
    fn equal_likelihood_keeps_topic() {
        assert_eq!(z_topic(-2.0, -2.0), 1.0);
        assert_eq!(z_topic(-1.0, -2.0), 1.0);
        assert!(z_topic(-3.0, -2.0) < 1.0);
    }

    #[test]
    fn identical_distributions_have_zero_kl() {
        let p = alloc::vec![math::log_softmax(&[0.3, -1.0, 2.0])];
        assert_eq!(slot_kl(&p, &p), 0.0);
    }
}
