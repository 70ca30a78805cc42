//! Tiny conditional sequence predictor.
//!
//! The same architecture serves as the black-box base model (plain input)
//! and as the counterfactual model (input prefixed by an edit descriptor and
//! SEP). Decoding is non-autoregressive: each of `slots` output positions has
//! its own softmax over the vocabulary, read off a shared feature vector
//!
//! ```text
//! φ(ctx) = [ E(ctx) ; E(prefix) ⊙ E(suffix) ]
//! ```
//!
//! where `prefix`/`suffix` are the tokens before/after the last SEP. The
//! elementwise product lets the model compare the edit with the input (for
//! example whether a true/false question mentions the edited object). For
//! contexts without SEP both sides are the whole context, which gives the
//! base model pairwise token interactions.
//!
//! Targets shorter than `slots` are terminated by one PAD, which is scored.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{self, LOG_EPS};
use crate::optim::{Parameters, TrainConfig, Trained};
use crate::text::{EncoderParams, TokenSeq, Tokenizer, PAD, SEP};

pub const DEFAULT_SLOTS: usize = 4;

/// Greedy decoding result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Answer tokens up to (excluding) the first PAD.
    pub tokens: TokenSeq,
    /// Argmax token of every slot.
    pub slot_ids: Vec<u32>,
    /// Log-probability of each slot's argmax token.
    pub slot_log_probs: Vec<f64>,
    /// Sum of `slot_log_probs`.
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikelihood {
    pub total: f64,
    pub scored_tokens: usize,
}

impl LogLikelihood {
    pub fn per_token(&self) -> f64 {
        self.total / self.scored_tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorExample {
    pub context: TokenSeq,
    pub target: TokenSeq,
    /// Undesired output pushed down by unlikelihood training.
    pub negative: Option<TokenSeq>,
}

impl PredictorExample {
    /// Likelihood-only examples from (context, target) text pairs.
    pub fn from_pairs<'s, I>(tokenizer: &Tokenizer, pairs: I) -> Vec<PredictorExample>
    where
        I: IntoIterator<Item = (&'s str, &'s str)>,
    {
        pairs
            .into_iter()
            .map(|(x, y)| PredictorExample {
                context: tokenizer.tokenize(x),
                target: tokenizer.tokenize(y),
                negative: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Nll,
    Unlikelihood { weight: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqPredictor {
    encoder: EncoderParams,
    slots: usize,
    /// `slots × vocab × features`, row-major.
    weights: Vec<f64>,
    /// `slots × vocab`.
    bias: Vec<f64>,
}

impl SeqPredictor {
    pub fn zeros(vocab_size: usize, dim: usize, slots: usize) -> Self {
        let features = 2 * dim;
        SeqPredictor {
            encoder: EncoderParams::zeros(vocab_size, dim),
            slots,
            weights: vec![0.0; slots * vocab_size * features],
            bias: vec![0.0; slots * vocab_size],
        }
    }

    pub fn new<R: Rng + ?Sized>(vocab_size: usize, dim: usize, slots: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab_size, dim, slots);
        p.encoder = EncoderParams::random(vocab_size, dim, rng);
        let bound = 0.1 * math::sqrt(3.0 / p.features() as f64);
        for w in &mut p.weights {
            *w = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn from_parts(encoder: EncoderParams, slots: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let v = encoder.vocab_size();
        let f = 2 * encoder.dim();
        if slots == 0 || weights.len() != slots * v * f || bias.len() != slots * v {
            return Err(Error::Shape(alloc::format!(
                "predictor with {slots} slots expects {} weights and {} biases",
                slots * v * f,
                slots * v
            )));
        }
        let p = SeqPredictor { encoder, slots, weights, bias };
        if !p.all_finite() {
            return Err(Error::Shape(String::from("predictor parameters must be finite")));
        }
        Ok(p)
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab_size()
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn features(&self) -> usize {
        2 * self.encoder.dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Mean-pooled hidden state of the context; the lookup key used by LU.
    pub fn hidden_state(&self, context: &[u32]) -> Vec<f64> {
        self.encoder.encode(context).into_vec()
    }

    fn feature_vector(&self, context: &TokenSeq) -> Features {
        let whole = self.encoder.encode(context).into_vec();
        let (pe, se) = match context.contains(&SEP) {
            true => {
                let (prefix, suffix) = context.split_last_sep();
                (self.encoder.encode(prefix).into_vec(), self.encoder.encode(suffix).into_vec())
            }
            false => (whole.clone(), whole.clone()),
        };
        let mut phi = Vec::with_capacity(2 * self.dim());
        phi.extend_from_slice(&whole);
        phi.extend(pe.iter().zip(&se).map(|(a, b)| a * b));
        Features { phi, sides: (pe, se) }
    }

    fn slot_logits(&self, slot: usize, phi: &[f64]) -> Vec<f64> {
        let v = self.vocab_size();
        let f = self.features();
        let base = slot * v * f;
        (0..v)
            .map(|t| {
                let row = &self.weights[base + t * f..base + (t + 1) * f];
                math::dot(row, phi) + self.bias[slot * v + t]
            })
            .collect()
    }

    /// Log-softmax distribution of every slot.
    pub fn slot_log_probs(&self, context: &TokenSeq) -> Vec<Vec<f64>> {
        let feats = self.feature_vector(context);
        (0..self.slots).map(|a| math::log_softmax(&self.slot_logits(a, &feats.phi))).collect()
    }

    /// Per-slot argmax, ties to the lowest id.
    pub fn predict(&self, context: &TokenSeq) -> Prediction {
        let dists = self.slot_log_probs(context);
        let mut slot_ids = Vec::with_capacity(self.slots);
        let mut slot_log_probs = Vec::with_capacity(self.slots);
        for lp in &dists {
            let best = math::argmax(lp);
            slot_ids.push(best as u32);
            slot_log_probs.push(lp[best]);
        }
        let log_prob = slot_log_probs.iter().sum();
        let tokens = TokenSeq::new(slot_ids.clone()).strip_pad();
        Prediction { tokens, slot_ids, slot_log_probs, log_prob }
    }

    pub fn predict_text(&self, tokenizer: &Tokenizer, context: &str) -> Prediction {
        self.predict(&tokenizer.tokenize(context))
    }

    /// The slot targets actually scored for `target`: the target itself plus a
    /// PAD terminator when it is shorter than the slot count.
    pub fn scored_target(&self, target: &[u32]) -> Result<Vec<u32>> {
        if target.len() > self.slots {
            return Err(Error::TargetTooLong { len: target.len(), slots: self.slots });
        }
        let mut t = target.to_vec();
        if t.len() < self.slots {
            t.push(PAD);
        }
        Ok(t)
    }

    pub fn log_likelihood(&self, context: &TokenSeq, target: &[u32]) -> Result<LogLikelihood> {
        let scored = self.scored_target(target)?;
        let feats = self.feature_vector(context);
        let mut total = 0.0;
        for (a, &tok) in scored.iter().enumerate() {
            let lp = math::log_softmax(&self.slot_logits(a, &feats.phi));
            total += lp[tok as usize];
        }
        Ok(LogLikelihood { total, scored_tokens: scored.len() })
    }

    /// Mean negative log-likelihood and its exact gradient.
    pub fn nll_loss(&self, batch: &[PredictorExample]) -> Result<(f64, SeqPredictor)> {
        self.unlikelihood_loss(batch, 0.0)
    }

    /// `mean[-log p(good) - λ log(1 - p(bad))]` with `1 - p(bad)` clamped at ε.
    /// Examples without a negative contribute only the likelihood term.
    pub fn unlikelihood_loss(&self, batch: &[PredictorExample], weight: f64) -> Result<(f64, SeqPredictor)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if !(weight >= 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("unlikelihood weight {weight} < 0")));
        }
        let idx: Vec<usize> = (0..batch.len()).collect();
        self.loss_on(batch, &idx, weight)
    }

    fn loss_on(&self, data: &[PredictorExample], idx: &[usize], weight: f64) -> Result<(f64, SeqPredictor)> {
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let v = self.vocab_size();
        let f = self.features();
        for &i in idx {
            let ex = &data[i];
            let good = self.scored_target(&ex.target)?;
            let bad = match (&ex.negative, weight > 0.0) {
                (Some(n), true) => Some(self.scored_target(n)?),
                _ => None,
            };
            let feats = self.feature_vector(&ex.context);
            let slots_needed = good.len().max(bad.as_ref().map_or(0, |b| b.len()));
            let mut log_probs = Vec::with_capacity(slots_needed);
            for a in 0..slots_needed {
                log_probs.push(math::log_softmax(&self.slot_logits(a, &feats.phi)));
            }
            // dL/dlogits per slot
            let mut dlogits: Vec<Vec<f64>> = vec![vec![0.0; v]; slots_needed];
            for (a, &tok) in good.iter().enumerate() {
                total -= log_probs[a][tok as usize];
                for (t, d) in dlogits[a].iter_mut().enumerate() {
                    *d += math::exp(log_probs[a][t]);
                }
                dlogits[a][tok as usize] -= 1.0;
            }
            if let Some(bad) = &bad {
                let log_p: f64 = bad.iter().enumerate().map(|(a, &t)| log_probs[a][t as usize]).sum();
                let log_rest = math::log1m_exp(log_p);
                if log_rest >= math::ln(LOG_EPS) {
                    total -= weight * log_rest;
                    // d/dlogits[-λ ln(1-p)] = λ p/(1-p) (onehot - softmax)
                    let c = weight * math::exp(log_p - log_rest);
                    for (a, &tok) in bad.iter().enumerate() {
                        for (t, d) in dlogits[a].iter_mut().enumerate() {
                            *d -= c * math::exp(log_probs[a][t]);
                        }
                        dlogits[a][tok as usize] += c;
                    }
                } else {
                    total -= weight * math::ln(LOG_EPS);
                }
            }
            let mut dphi = vec![0.0; f];
            for (a, dl) in dlogits.iter().enumerate() {
                let base = a * v * f;
                for (t, &g) in dl.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias[a * v + t] += g;
                    let w = &self.weights[base + t * f..base + (t + 1) * f];
                    let gw = &mut grad.weights[base + t * f..base + (t + 1) * f];
                    for k in 0..f {
                        gw[k] += g * feats.phi[k];
                        dphi[k] += g * w[k];
                    }
                }
            }
            self.backprop_features(&ex.context, &feats, &dphi, &mut grad.encoder);
        }
        let inv = 1.0 / idx.len() as f64;
        for t in grad.tensors_mut() {
            for g in t {
                *g *= inv;
            }
        }
        Ok((total * inv, grad))
    }

    fn backprop_features(&self, context: &TokenSeq, feats: &Features, dphi: &[f64], grad: &mut EncoderParams) {
        let d = self.dim();
        self.encoder.accumulate_grad(context, &dphi[..d], grad);
        let (pe, se) = &feats.sides;
        let (prefix, suffix) = match context.contains(&SEP) {
            true => context.split_last_sep(),
            false => (context.ids(), context.ids()),
        };
        let up_prefix: Vec<f64> = (0..d).map(|k| dphi[d + k] * se[k]).collect();
        let up_suffix: Vec<f64> = (0..d).map(|k| dphi[d + k] * pe[k]).collect();
        self.encoder.accumulate_grad(prefix, &up_prefix, grad);
        self.encoder.accumulate_grad(suffix, &up_suffix, grad);
    }

    /// Exact-match accuracy of greedy decoding against the targets.
    pub fn accuracy(&self, data: &[PredictorExample]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits =
            data.iter().filter(|ex| self.predict(&ex.context).tokens.ids() == ex.target.strip_pad().ids()).count();
        hits as f64 / data.len() as f64
    }

    /// Trains a freshly initialised predictor.
    pub fn train(
        vocab_size: usize,
        dim: usize,
        slots: usize,
        data: &[PredictorExample],
        config: &TrainConfig,
        seed: u64,
        mode: TrainMode,
    ) -> Result<Trained<SeqPredictor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = SeqPredictor::new(vocab_size, dim, slots, &mut rng);
        init.fine_tune(data, config, &mut rng, mode)
    }

    /// Continues training from `self`; `self` is left untouched.
    pub fn fine_tune<R: Rng + ?Sized>(
        &self,
        data: &[PredictorExample],
        config: &TrainConfig,
        rng: &mut R,
        mode: TrainMode,
    ) -> Result<Trained<SeqPredictor>> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for ex in data {
            self.scored_target(&ex.target)?;
            if let Some(n) = &ex.negative {
                self.scored_target(n)?;
            }
        }
        let weight = match mode {
            TrainMode::Nll => 0.0,
            TrainMode::Unlikelihood { weight } if weight >= 0.0 => weight,
            TrainMode::Unlikelihood { weight } => {
                return Err(Error::InvalidConfig(alloc::format!("unlikelihood weight {weight} < 0")))
            }
        };
        Ok(crate::optim::fit(self.clone(), data.len(), config, rng, |p, idx| {
            p.loss_on(data, idx, weight).expect("targets validated before training")
        }))
    }
}

struct Features {
    phi: Vec<f64>,
    /// Encodings of the two sides of the product block.
    sides: (Vec<f64>, Vec<f64>),
}

impl Parameters for SeqPredictor {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.push(&self.weights);
        t.push(&self.bias);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.push(&mut self.weights);
        t.push(&mut self.bias);
        t
    }

    fn zeros_like(&self) -> Self {
        SeqPredictor::zeros(self.vocab_size(), self.dim(), self.slots)
    }
}
