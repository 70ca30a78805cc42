//! Tokenization, vocabulary and the mean-pooled text encoder.
//!
//! The encoder is a bag of token embeddings averaged and passed through one
//! linear projection. It is deliberately small so that every gradient can be
//! derived by hand and checked against finite differences.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::Parameters;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

pub const DEFAULT_MAX_LEN: usize = 32;
pub const DEFAULT_DIM: usize = 32;

/// Dense token ↔ id mapping. Ids 0, 1 and 2 are always PAD, UNK and SEP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut vocab = Vocab { tokens: Vec::new(), index: BTreeMap::new() };
        for t in [PAD_TOKEN, UNK_TOKEN, SEP_TOKEN] {
            vocab.insert(t);
        }
        vocab
    }

    /// Builds a vocabulary from raw texts, assigning ids in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocab::new();
        for text in texts {
            for word in text.split_whitespace() {
                vocab.insert(&word.to_lowercase());
            }
        }
        vocab
    }

    /// Restores a vocabulary from its token list (line index = id).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 3
            || tokens[PAD as usize] != PAD_TOKEN
            || tokens[UNK as usize] != UNK_TOKEN
            || tokens[SEP as usize] != SEP_TOKEN
        {
            return Err(Error::InvalidConfig(
                "vocabulary must start with the reserved tokens <pad>, <unk>, <sep>".to_string(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(alloc::format!("invalid token {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidConfig(alloc::format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Adds a token if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A sequence of vocabulary ids with no PAD before a non-PAD token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }

    /// Drops everything from the first PAD onwards.
    pub fn strip_pad(&self) -> TokenSeq {
        let end = self.0.iter().position(|&t| t == PAD).unwrap_or(self.0.len());
        TokenSeq(self.0[..end].to_vec())
    }

    /// Splits at the last SEP into (prefix, suffix). Without a SEP the prefix is empty.
    pub fn split_last_sep(&self) -> (&[u32], &[u32]) {
        match self.0.iter().rposition(|&t| t == SEP) {
            Some(i) => (&self.0[..i], &self.0[i + 1..]),
            None => (&[], &self.0),
        }
    }
}

impl Deref for TokenSeq {
    type Target = [u32];
    fn deref(&self) -> &[u32] {
        &self.0
    }
}

/// Lowercased whitespace tokenizer with truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocab,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, max_len: usize) -> Self {
        Tokenizer { vocab, max_len }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        tokenize(text, &self.vocab, self.max_len)
    }

    pub fn detokenize(&self, seq: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in seq.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.vocab.token(id).unwrap_or(UNK_TOKEN));
        }
        out
    }
}

/// Whitespace-split, lowercase, map unknown words to UNK, truncate to `max_len`.
///
/// A literal `<pad>` in the text maps to UNK so that tokenized inputs never
/// contain PAD.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let ids = text
        .split_whitespace()
        .take(max_len)
        .map(|w| match vocab.id(&w.to_lowercase()) {
            Some(PAD) | None => UNK,
            Some(id) => id,
        })
        .collect();
    TokenSeq(ids)
}

/// Fixed-length encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Embedding table (`vocab × dim`, row-major) and a `dim × dim` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    vocab_size: usize,
    dim: usize,
    embedding: Vec<f64>,
    projection: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EncoderParams { vocab_size, dim, embedding: vec![0.0; vocab_size * dim], projection: vec![0.0; dim * dim] }
    }

    /// Uniform embeddings in `[-1, 1]` and a Xavier-uniform projection.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab_size, dim);
        for v in &mut p.embedding {
            *v = rng.gen_range(-1.0..1.0);
        }
        let bound = crate::math::sqrt(3.0 / dim as f64);
        for v in &mut p.projection {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn from_parts(vocab_size: usize, dim: usize, embedding: Vec<f64>, projection: Vec<f64>) -> Result<Self> {
        if embedding.len() != vocab_size * dim || projection.len() != dim * dim {
            return Err(Error::Shape(alloc::format!(
                "encoder expects {}x{} embedding and {dim}x{dim} projection, got {} and {} values",
                vocab_size,
                dim,
                embedding.len(),
                projection.len()
            )));
        }
        if embedding.iter().chain(&projection).any(|v| !v.is_finite()) {
            return Err(Error::Shape("encoder parameters must be finite".to_string()));
        }
        Ok(EncoderParams { vocab_size, dim, embedding, projection })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn row(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.embedding[t * self.dim..(t + 1) * self.dim]
    }

    /// Mean of the token rows; the zero vector for an empty sequence.
    pub fn mean_pool(&self, ids: &[u32]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        if ids.is_empty() {
            return mean;
        }
        for &t in ids {
            for (m, e) in mean.iter_mut().zip(self.row(t)) {
                *m += e;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        mean
    }

    /// Projection of the mean token embedding.
    pub fn encode(&self, ids: &[u32]) -> Embedding {
        let mean = self.mean_pool(ids);
        Embedding(self.project(&mean))
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d).map(|i| crate::math::dot(&self.projection[i * d..(i + 1) * d], v)).collect()
    }

    /// Exact gradient of `upstream · encode(ids)` with respect to every parameter.
    pub fn encode_grad(&self, ids: &[u32], upstream: &[f64]) -> EncoderParams {
        let mut grad = EncoderParams::zeros(self.vocab_size, self.dim);
        self.accumulate_grad(ids, upstream, &mut grad);
        grad
    }

    /// Adds the gradient of `upstream · encode(ids)` into `grad`.
    pub fn accumulate_grad(&self, ids: &[u32], upstream: &[f64], grad: &mut EncoderParams) {
        let d = self.dim;
        debug_assert_eq!(upstream.len(), d);
        if ids.is_empty() {
            return;
        }
        let mean = self.mean_pool(ids);
        // d projection[i][j] = up[i] * mean[j]
        for i in 0..d {
            let u = upstream[i];
            if u == 0.0 {
                continue;
            }
            let row = &mut grad.projection[i * d..(i + 1) * d];
            for (g, m) in row.iter_mut().zip(&mean) {
                *g += u * m;
            }
        }
        // d mean = projectionᵀ up, spread evenly over the tokens
        let mut dmean = vec![0.0; d];
        for i in 0..d {
            let u = upstream[i];
            if u == 0.0 {
                continue;
            }
            for (dm, p) in dmean.iter_mut().zip(&self.projection[i * d..(i + 1) * d]) {
                *dm += p * u;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for &t in ids {
            let t = t as usize;
            let row = &mut grad.embedding[t * d..(t + 1) * d];
            for (g, dm) in row.iter_mut().zip(&dmean) {
                *g += dm * inv;
            }
        }
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.embedding, &self.projection]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.embedding, &mut self.projection]
    }

    fn zeros_like(&self) -> Self {
        EncoderParams::zeros(self.vocab_size, self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::build(["paris capital france"])
    }

    #[test]
    fn reserved_ids() {
        let v = Vocab::new();
        assert_eq!(v.id(PAD_TOKEN), Some(PAD));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK));
        assert_eq!(v.id(SEP_TOKEN), Some(SEP));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn ids_are_dense() {
        let v = vocab();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert!(tokenize("", &v, 32).is_empty());
        let paris = v.id("paris").unwrap();
        assert_eq!(tokenize("Paris Paris", &v, 32).ids(), &[paris, paris]);
        let capital = v.id("capital").unwrap();
        assert_eq!(tokenize("zzz-unseen capital", &v, 32).ids(), &[UNK, capital]);
    }

    #[test]
    fn tokenize_truncates_and_never_emits_pad() {
        let v = vocab();
        let seq = tokenize("paris <pad> capital france paris", &v, 3);
        assert_eq!(seq.len(), 3);
        assert_eq!(seq[1], UNK);
    }

    #[test]
    fn sep_split() {
        let seq = TokenSeq::new(vec![5, SEP, 6, SEP, 7, 8]);
        let (head, tail) = seq.split_last_sep();
        assert_eq!(head, &[5, SEP, 6]);
        assert_eq!(tail, &[7, 8]);
        let plain = TokenSeq::new(vec![5, 6]);
        assert_eq!(plain.split_last_sep(), (&[][..], &[5u32, 6][..]));
    }

    #[test]
    fn vocab_from_tokens_rejects_missing_reserved() {
        assert!(Vocab::from_tokens(["a", "b", "c"]).is_err());
        let v = vocab();
        assert_eq!(Vocab::from_tokens(v.tokens().iter().cloned()).unwrap(), v);
    }

    #[test]
    fn zero_table_encodes_to_zero() {
        let p = EncoderParams::zeros(6, 4);
        assert!(p.encode(&[3, 4]).iter().all(|&v| v == 0.0));
        assert!(p.encode(&[]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_is_projected_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::random(6, 4, &mut rng);
        let e = p.encode(&[4]);
        for i in 0..4 {
            let expect: f64 = (0..4).map(|j| p.projection()[i * 4 + j] * p.row(4)[j]).sum();
            assert!((e[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::random(6, 4, &mut rng);
        let g = p.encode_grad(&[3, 5], &[0.0; 4]);
        assert!(g.embedding().iter().chain(g.projection()).all(|&v| v == 0.0));
    }

    #[test]
    fn unused_rows_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::random(6, 4, &mut rng);
        let g = p.encode_grad(&[3, 5], &[1.0, -2.0, 0.5, 0.25]);
        for t in [0u32, 1, 2, 4] {
            let t = t as usize;
            assert!(g.embedding()[t * 4..(t + 1) * 4].iter().all(|&v| v == 0.0));
        }
        assert!(g.embedding()[3 * 4..4 * 4].iter().any(|&v| v != 0.0));
    }
}
