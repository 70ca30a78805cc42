//! Scope classifier `g(z_e, x)`: the probability that input `x` lies in the
//! scope of edit descriptor `z_e`.
//!
//! Two heads share the text encoder `E`:
//!
//! * **embed**: `g = exp(-γ‖E(x) - E(z_e)‖²)` with `γ = softplus(gamma_raw)`,
//! * **cross**: `g = sigmoid(E(x)ᵀ W E(z_e) + b)`.
//!
//! Scores are carried in log space so that routing comparisons never underflow.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::EditRecord;
use crate::editor::EditDescriptor;
use crate::error::{Error, Result};
use crate::math::{self, LOG_EPS};
use crate::optim::{Parameters, TrainConfig, Trained};
use crate::text::{Embedding, EncoderParams, TokenSeq, Tokenizer, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeVariant {
    Embed,
    Cross,
}

impl ScopeVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ScopeVariant::Embed => "embed",
            ScopeVariant::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embed" => Some(ScopeVariant::Embed),
            "cross" => Some(ScopeVariant::Cross),
            _ => None,
        }
    }
}

/// Variant-specific parameters on top of the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum ScopeHead {
    Embed { gamma_raw: f64 },
    Cross { bilinear: Vec<f64>, bias: f64 },
}

/// A score in `(0, 1]`, stored as its logarithm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ScopeScore {
    log_value: f64,
}

impl ScopeScore {
    pub fn from_log(log_value: f64) -> Self {
        ScopeScore { log_value: log_value.min(0.0) }
    }

    pub fn log_value(self) -> f64 {
        self.log_value
    }

    /// The probability, floored at the smallest positive double.
    pub fn value(self) -> f64 {
        math::exp(self.log_value).max(f64::MIN_POSITIVE)
    }

    /// `g >= 0.5`.
    pub fn in_scope(self) -> bool {
        self.log_value >= -core::f64::consts::LN_2
    }
}

/// One labelled (descriptor, input) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeExample {
    pub descriptor: TokenSeq,
    pub input: TokenSeq,
    pub label: bool,
}

impl ScopeExample {
    /// Positives from every in-scope sample; negatives from every hard
    /// out-of-scope sample plus up to `negatives_per_record` easy ones.
    pub fn from_records<R: Rng + ?Sized>(
        records: &[EditRecord],
        tokenizer: &Tokenizer,
        negatives_per_record: usize,
        rng: &mut R,
    ) -> Result<Vec<ScopeExample>> {
        let mut out = Vec::new();
        for record in records {
            if record.in_scope.is_empty() && record.out_of_scope.is_empty() {
                return Err(Error::DegenerateDataset(format!(
                    "record `{}` has neither in-scope nor out-of-scope samples",
                    record.edit.id
                )));
            }
            let descriptor = tokenizer.tokenize(&record.edit.descriptor_text());
            for s in &record.in_scope {
                out.push(ScopeExample {
                    descriptor: descriptor.clone(),
                    input: tokenizer.tokenize(&s.input),
                    label: true,
                });
            }
            let mut easy: Vec<&str> = Vec::new();
            for s in &record.out_of_scope {
                if s.hard {
                    out.push(ScopeExample {
                        descriptor: descriptor.clone(),
                        input: tokenizer.tokenize(&s.input),
                        label: false,
                    });
                } else {
                    easy.push(&s.input);
                }
            }
            easy.shuffle(rng);
            for input in easy.into_iter().take(negatives_per_record) {
                out.push(ScopeExample {
                    descriptor: descriptor.clone(),
                    input: tokenizer.tokenize(input),
                    label: false,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScopeClassifier {
    encoder: EncoderParams,
    head: ScopeHead,
}

impl ScopeClassifier {
    /// Random encoder, `γ = 1` for embed, small random `W` and `b = 0` for cross.
    pub fn new<R: Rng + ?Sized>(variant: ScopeVariant, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let encoder = EncoderParams::random(vocab_size, dim, rng);
        let head = match variant {
            ScopeVariant::Embed => ScopeHead::Embed { gamma_raw: math::softplus_inv(1.0) },
            ScopeVariant::Cross => {
                let bound = 1.0 / dim as f64;
                let mut bilinear = vec![0.0; dim * dim];
                for (i, w) in bilinear.iter_mut().enumerate() {
                    *w = rng.gen_range(-bound..bound);
                    if i % (dim + 1) == 0 {
                        *w += 1.0;
                    }
                }
                ScopeHead::Cross { bilinear, bias: 0.0 }
            }
        };
        ScopeClassifier { encoder, head }
    }

    pub fn from_parts(encoder: EncoderParams, head: ScopeHead) -> Result<Self> {
        if let ScopeHead::Cross { bilinear, .. } = &head {
            if bilinear.len() != encoder.dim() * encoder.dim() {
                return Err(Error::Shape(format!("bilinear form must be {0}x{0}", encoder.dim())));
            }
        }
        let c = ScopeClassifier { encoder, head };
        if !c.all_finite() {
            return Err(Error::Shape(String::from("classifier parameters must be finite")));
        }
        Ok(c)
    }

    pub fn variant(&self) -> ScopeVariant {
        match self.head {
            ScopeHead::Embed { .. } => ScopeVariant::Embed,
            ScopeHead::Cross { .. } => ScopeVariant::Cross,
        }
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn head(&self) -> &ScopeHead {
        &self.head
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    /// `softplus(gamma_raw)` for the embed head.
    pub fn gamma(&self) -> Option<f64> {
        match self.head {
            ScopeHead::Embed { gamma_raw } => Some(math::softplus(gamma_raw)),
            ScopeHead::Cross { .. } => None,
        }
    }

    /// The representation of a descriptor that an edit memory caches.
    pub fn embed_descriptor(&self, descriptor: &[u32]) -> Embedding {
        self.encoder.encode(descriptor)
    }

    /// Score against a cached descriptor embedding.
    pub fn score_cached(&self, descriptor: &[f64], input: &[u32]) -> ScopeScore {
        let x = self.encoder.encode(input);
        ScopeScore::from_log(self.log_score_embedded(descriptor, &x))
    }

    /// Score between two already encoded texts (descriptor first).
    pub fn score_embedded(&self, descriptor: &[f64], input: &[f64]) -> ScopeScore {
        ScopeScore::from_log(self.log_score_embedded(descriptor, input))
    }

    pub fn score(&self, descriptor: &[u32], input: &[u32]) -> ScopeScore {
        let z = self.encoder.encode(descriptor);
        self.score_cached(&z, input)
    }

    pub fn score_text(&self, tokenizer: &Tokenizer, edit: &EditDescriptor, input: &str) -> ScopeScore {
        let z = tokenizer.tokenize(&edit.descriptor_text());
        self.score(&z, &tokenizer.tokenize(input))
    }

    fn log_score_embedded(&self, z: &[f64], x: &[f64]) -> f64 {
        match &self.head {
            ScopeHead::Embed { gamma_raw } => -math::softplus(*gamma_raw) * math::squared_distance(x, z),
            ScopeHead::Cross { bilinear, bias } => math::log_sigmoid(bilinear_form(bilinear, x, z) + bias),
        }
    }

    /// SHA-256 over the variant, the dimensions and the bit patterns of every
    /// parameter. Edit memories record it to detect stale cached embeddings.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.variant().as_str().as_bytes());
        h.update((self.encoder.vocab_size() as u64).to_le_bytes());
        h.update((self.encoder.dim() as u64).to_le_bytes());
        for t in self.tensors() {
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Mean binary cross-entropy with ε-clamped logs, and its exact gradient.
    pub fn bce_loss(&self, batch: &[ScopeExample]) -> Result<(f64, ScopeClassifier)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let idx: Vec<usize> = (0..batch.len()).collect();
        Ok(self.bce_on(batch, &idx))
    }

    fn bce_on(&self, data: &[ScopeExample], idx: &[usize]) -> (f64, ScopeClassifier) {
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let d = self.dim();
        let log_eps = math::ln(LOG_EPS);
        for &i in idx {
            let ex = &data[i];
            let x = self.encoder.encode(&ex.input);
            let z = self.encoder.encode(&ex.descriptor);
            match &self.head {
                ScopeHead::Embed { gamma_raw } => {
                    let gamma = math::softplus(*gamma_raw);
                    let dist = math::squared_distance(&x, &z);
                    let s = -gamma * dist;
                    // dL/ds
                    let dl_ds = if ex.label {
                        if s >= log_eps {
                            total -= s;
                            -1.0
                        } else {
                            total -= log_eps;
                            0.0
                        }
                    } else {
                        let log1m = math::log1m_exp(s);
                        if log1m >= log_eps {
                            total -= log1m;
                            // d/ds[-ln(1 - e^s)] = e^s / (1 - e^s)
                            math::exp(s - log1m)
                        } else {
                            total -= log_eps;
                            0.0
                        }
                    };
                    if dl_ds == 0.0 {
                        continue;
                    }
                    if let ScopeHead::Embed { gamma_raw: g } = &mut grad.head {
                        *g += dl_ds * -dist * math::sigmoid(*gamma_raw);
                    }
                    let mut up_x = vec![0.0; d];
                    let mut up_z = vec![0.0; d];
                    for k in 0..d {
                        let u = x[k] - z[k];
                        up_x[k] = dl_ds * -2.0 * gamma * u;
                        up_z[k] = -up_x[k];
                    }
                    self.encoder.accumulate_grad(&ex.input, &up_x, &mut grad.encoder);
                    self.encoder.accumulate_grad(&ex.descriptor, &up_z, &mut grad.encoder);
                }
                ScopeHead::Cross { bilinear, bias } => {
                    let logit = bilinear_form(bilinear, &x, &z) + bias;
                    let (log_term, dl_dlogit) = if ex.label {
                        let lg = math::log_sigmoid(logit);
                        (lg, math::sigmoid(logit) - 1.0)
                    } else {
                        let lg = math::log_sigmoid(-logit);
                        (lg, math::sigmoid(logit))
                    };
                    if log_term < log_eps {
                        total -= log_eps;
                        continue;
                    }
                    total -= log_term;
                    let mut up_x = vec![0.0; d];
                    let mut up_z = vec![0.0; d];
                    if let ScopeHead::Cross { bilinear: gw, bias: gb } = &mut grad.head {
                        *gb += dl_dlogit;
                        for i in 0..d {
                            for j in 0..d {
                                gw[i * d + j] += dl_dlogit * x[i] * z[j];
                                up_x[i] += dl_dlogit * bilinear[i * d + j] * z[j];
                                up_z[j] += dl_dlogit * bilinear[i * d + j] * x[i];
                            }
                        }
                    }
                    self.encoder.accumulate_grad(&ex.input, &up_x, &mut grad.encoder);
                    self.encoder.accumulate_grad(&ex.descriptor, &up_z, &mut grad.encoder);
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for t in grad.tensors_mut() {
            for v in t {
                *v *= inv;
            }
        }
        (total * inv, grad)
    }

    /// Fraction of examples where `g >= 0.5` agrees with the label.
    pub fn accuracy(&self, data: &[ScopeExample]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = data.iter().filter(|ex| self.score(&ex.descriptor, &ex.input).in_scope() == ex.label).count();
        correct as f64 / data.len() as f64
    }

    /// Trains a fresh classifier on labelled pairs.
    pub fn train(
        variant: ScopeVariant,
        vocab_size: usize,
        dim: usize,
        data: &[ScopeExample],
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Trained<ScopeClassifier>> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let positives = data.iter().filter(|e| e.label).count();
        if positives == 0 || positives == data.len() {
            return Err(Error::DegenerateDataset(String::from(
                "scope training needs both in-scope and out-of-scope pairs",
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = ScopeClassifier::new(variant, vocab_size, dim, &mut rng);
        if config.swap_copies + config.swap_mismatches == 0 {
            return Ok(crate::optim::fit(init, data.len(), config, &mut rng, |p, idx| p.bce_on(data, idx)));
        }
        let mut swap_rng = ChaCha8Rng::seed_from_u64(seed ^ SWAP_STREAM);
        Ok(crate::optim::fit(init, data.len(), config, &mut rng, |p, idx| {
            let batch = swap_tokens(data, idx, vocab_size, config, &mut swap_rng);
            let all: Vec<usize> = (0..batch.len()).collect();
            p.bce_on(&batch, &all)
        }))
    }

    /// Builds pairs from edit records and trains on them.
    pub fn train_on_records(
        variant: ScopeVariant,
        tokenizer: &Tokenizer,
        dim: usize,
        records: &[EditRecord],
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Trained<ScopeClassifier>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c09e);
        let data = ScopeExample::from_records(records, tokenizer, config.negatives_per_record, &mut rng)?;
        Self::train(variant, tokenizer.vocab().len(), dim, &data, config, seed)
    }
}

const SWAP_STREAM: u64 = 0x5a4b;

/// The pairs at `idx` plus their token-swapped variants.
///
/// Tokens present on both sides of a pair are the ones that tie an input to
/// its descriptor. Renaming them consistently keeps the label; renaming them
/// differently on each side makes an out-of-scope pair. Training on fresh
/// renamings every batch pushes the classifier towards matching tokens it
/// has never seen in a labelled pair.
fn swap_tokens<R: Rng + ?Sized>(
    data: &[ScopeExample],
    idx: &[usize],
    vocab_size: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Vec<ScopeExample> {
    let first = SEP + 1;
    let mut out = Vec::with_capacity(idx.len() * (1 + config.swap_copies + config.swap_mismatches));
    if vocab_size as u32 <= first + 1 {
        out.extend(idx.iter().map(|&i| data[i].clone()));
        return out;
    }
    let fresh = |rng: &mut R| rng.gen_range(first..vocab_size as u32);
    for &i in idx {
        let e = &data[i];
        out.push(e.clone());
        let mut shared: Vec<u32> =
            e.descriptor.ids().iter().copied().filter(|t| *t >= first && e.input.ids().contains(t)).collect();
        shared.sort_unstable();
        shared.dedup();
        if shared.is_empty() {
            continue;
        }
        let rename = |seq: &TokenSeq, map: &BTreeMap<u32, u32>| {
            TokenSeq::new(seq.ids().iter().map(|t| *map.get(t).unwrap_or(t)).collect())
        };
        for _ in 0..config.swap_copies {
            let map: BTreeMap<u32, u32> = shared.iter().map(|&t| (t, fresh(rng))).collect();
            out.push(ScopeExample {
                descriptor: rename(&e.descriptor, &map),
                input: rename(&e.input, &map),
                label: e.label,
            });
        }
        if !e.label {
            continue;
        }
        for _ in 0..config.swap_mismatches {
            let left: BTreeMap<u32, u32> = shared.iter().map(|&t| (t, fresh(rng))).collect();
            let right: BTreeMap<u32, u32> = left
                .iter()
                .map(|(&t, &l)| {
                    let r = loop {
                        let r = fresh(rng);
                        if r != l {
                            break r;
                        }
                    };
                    (t, r)
                })
                .collect();
            out.push(ScopeExample {
                descriptor: rename(&e.descriptor, &left),
                input: rename(&e.input, &right),
                label: false,
            });
        }
    }
    out
}

fn bilinear_form(w: &[f64], x: &[f64], z: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        acc += x[i] * math::dot(&w[i * d..(i + 1) * d], z);
    }
    acc
}

impl Parameters for ScopeClassifier {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        match &self.head {
            ScopeHead::Embed { gamma_raw } => t.push(core::slice::from_ref(gamma_raw)),
            ScopeHead::Cross { bilinear, bias } => {
                t.push(bilinear);
                t.push(core::slice::from_ref(bias));
            }
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        match &mut self.head {
            ScopeHead::Embed { gamma_raw } => t.push(core::slice::from_mut(gamma_raw)),
            ScopeHead::Cross { bilinear, bias } => {
                t.push(bilinear);
                t.push(core::slice::from_mut(bias));
            }
        }
        t
    }

    fn zeros_like(&self) -> Self {
        let head = match &self.head {
            ScopeHead::Embed { .. } => ScopeHead::Embed { gamma_raw: 0.0 },
            ScopeHead::Cross { bilinear, .. } => ScopeHead::Cross { bilinear: vec![0.0; bilinear.len()], bias: 0.0 },
        };
        ScopeClassifier { encoder: self.encoder.zeros_like(), head }
    }
}
