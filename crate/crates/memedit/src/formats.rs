//! On-disk artifacts: vocabulary, checkpoints, edit memory and datasets.
//!
//! Checkpoints are one JSON object per file; memory, datasets and LU caches
//! are JSON lines. Floats use the shortest representation that parses back to
//! the same bits, so every round trip is exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use memedit_core::baselines::{LuCache, LuEntry};
use memedit_core::classifier::ScopeHead;
use memedit_core::datagen::{Dataset, EditRecord, Labeled, VitaminCRow};
use memedit_core::editor::MemoryEntry;
use memedit_core::{EditDescriptor, EditMemory, Embedding, EncoderParams, ScopeClassifier, ScopeVariant};
use memedit_core::{SeqPredictor, TokenSeq, Tokenizer, Vocab};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl ToString) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.to_string() }
}

fn model_err(path: &Path) -> impl FnOnce(memedit_core::Error) -> Error + '_ {
    move |source| Error::Model { path: path.to_path_buf(), source }
}

/// Serializes `items` one JSON object per line.
pub fn to_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSON lines, skipping blank ones. Errors carry 1-based line numbers.
pub fn from_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e))?);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_jsonl(path, &read_text(path)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    write_atomic(path, to_jsonl(items).as_bytes())
}

/// One token per line; line index is the id.
pub fn vocab_text(vocab: &Vocab) -> String {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    s
}

pub fn parse_vocab(path: &Path, text: &str) -> Result<Vocab> {
    Vocab::from_tokens(text.lines()).map_err(model_err(path))
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_atomic(path, vocab_text(vocab).as_bytes())
}

pub fn read_tokenizer(path: &Path, max_len: usize) -> Result<Tokenizer> {
    Ok(Tokenizer::new(parse_vocab(path, &read_text(path)?)?, max_len))
}

#[derive(Serialize, Deserialize)]
struct PredictorFile {
    vocab_size: usize,
    dim: usize,
    slots: usize,
    embedding: Vec<f64>,
    projection: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

pub fn predictor_json(p: &SeqPredictor) -> String {
    let e = p.encoder();
    let file = PredictorFile {
        vocab_size: e.vocab_size(),
        dim: e.dim(),
        slots: p.slots(),
        embedding: e.embedding().to_vec(),
        projection: e.projection().to_vec(),
        weights: p.weights().to_vec(),
        bias: p.bias().to_vec(),
    };
    serde_json::to_string(&file).expect("plain data serializes")
}

pub fn parse_predictor(path: &Path, text: &str) -> Result<SeqPredictor> {
    let f: PredictorFile = serde_json::from_str(text).map_err(|e| parse_err(path, e.line(), e))?;
    let enc = EncoderParams::from_parts(f.vocab_size, f.dim, f.embedding, f.projection).map_err(model_err(path))?;
    SeqPredictor::from_parts(enc, f.slots, f.weights, f.bias).map_err(model_err(path))
}

pub fn write_predictor(path: &Path, p: &SeqPredictor) -> Result<()> {
    write_atomic(path, predictor_json(p).as_bytes())
}

pub fn read_predictor(path: &Path) -> Result<SeqPredictor> {
    parse_predictor(path, &read_text(path)?)
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    variant: ScopeVariant,
    vocab_size: usize,
    dim: usize,
    embedding: Vec<f64>,
    projection: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bilinear: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
}

pub fn classifier_json(c: &ScopeClassifier) -> String {
    let e = c.encoder();
    let mut file = ClassifierFile {
        variant: c.variant(),
        vocab_size: e.vocab_size(),
        dim: e.dim(),
        embedding: e.embedding().to_vec(),
        projection: e.projection().to_vec(),
        gamma_raw: None,
        bilinear: None,
        bias: None,
    };
    match c.head() {
        ScopeHead::Embed { gamma_raw } => file.gamma_raw = Some(*gamma_raw),
        ScopeHead::Cross { bilinear, bias } => {
            file.bilinear = Some(bilinear.clone());
            file.bias = Some(*bias);
        }
    }
    serde_json::to_string(&file).expect("plain data serializes")
}

pub fn parse_classifier(path: &Path, text: &str) -> Result<ScopeClassifier> {
    let f: ClassifierFile = serde_json::from_str(text).map_err(|e| parse_err(path, e.line(), e))?;
    let head = match (f.variant, f.gamma_raw, f.bilinear, f.bias) {
        (ScopeVariant::Embed, Some(gamma_raw), None, None) => ScopeHead::Embed { gamma_raw },
        (ScopeVariant::Cross, None, Some(bilinear), Some(bias)) => ScopeHead::Cross { bilinear, bias },
        (v, ..) => return Err(parse_err(path, 1, format!("fields do not match variant `{}`", v.as_str()))),
    };
    let enc = EncoderParams::from_parts(f.vocab_size, f.dim, f.embedding, f.projection).map_err(model_err(path))?;
    ScopeClassifier::from_parts(enc, head).map_err(model_err(path))
}

pub fn write_classifier(path: &Path, c: &ScopeClassifier) -> Result<()> {
    write_atomic(path, classifier_json(c).as_bytes())
}

pub fn read_classifier(path: &Path) -> Result<ScopeClassifier> {
    parse_classifier(path, &read_text(path)?)
}

/// One memory line: the flattened edit, its cached embedding and the
/// fingerprint of the classifier that produced it.
#[derive(Serialize, Deserialize)]
struct MemoryLine {
    #[serde(flatten)]
    edit: EditDescriptor,
    embedding: Vec<f64>,
    classifier_hash: String,
}

pub fn memory_jsonl(m: &EditMemory) -> String {
    to_jsonl(m.entries().iter().map(|e| MemoryLine {
        edit: e.edit.clone(),
        embedding: e.embedding.to_vec(),
        classifier_hash: m.classifier_hash().to_string(),
    }))
}

/// Parses a memory file. An empty file yields an empty memory bound to
/// `default_hash`; otherwise every line must carry the same hash.
pub fn parse_memory(path: &Path, text: &str, default_hash: &str) -> Result<EditMemory> {
    let lines: Vec<MemoryLine> = from_jsonl(path, text)?;
    let hash = lines.first().map_or(default_hash.to_string(), |l| l.classifier_hash.clone());
    if let Some(i) = lines.iter().position(|l| l.classifier_hash != hash) {
        return Err(parse_err(path, i + 1, "entries were embedded by different classifiers"));
    }
    let entries =
        lines.into_iter().map(|l| MemoryEntry { edit: l.edit, embedding: Embedding::new(l.embedding) }).collect();
    EditMemory::from_entries(entries, hash).map_err(model_err(path))
}

pub fn write_memory(path: &Path, m: &EditMemory) -> Result<()> {
    write_atomic(path, memory_jsonl(m).as_bytes())
}

/// Reads a memory file; a missing file is an empty memory.
pub fn read_memory(path: &Path, default_hash: &str) -> Result<EditMemory> {
    match fs::read_to_string(path) {
        Ok(text) => parse_memory(path, &text, default_hash),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => parse_memory(path, "", default_hash),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[derive(Serialize, Deserialize)]
struct LuLine {
    id: String,
    key: Vec<f64>,
    target: Vec<u32>,
    delta: f64,
}

pub fn lu_cache_jsonl(c: &LuCache) -> String {
    to_jsonl(c.entries().iter().map(|e| LuLine {
        id: e.id.clone(),
        key: e.key.clone(),
        target: e.target.ids().to_vec(),
        delta: c.delta(),
    }))
}

pub fn parse_lu_cache(path: &Path, text: &str, default_delta: f64) -> Result<LuCache> {
    let lines: Vec<LuLine> = from_jsonl(path, text)?;
    let delta = lines.first().map_or(default_delta, |l| l.delta);
    if let Some(i) = lines.iter().position(|l| l.delta.to_bits() != delta.to_bits()) {
        return Err(parse_err(path, i + 1, "entries disagree on the lookup radius"));
    }
    let entries =
        lines.into_iter().map(|l| LuEntry { id: l.id, key: l.key, target: TokenSeq::new(l.target) }).collect();
    LuCache::from_entries(entries, delta).map_err(model_err(path))
}

/// Reads `dir/dataset.jsonl` and `dir/pretrain.jsonl`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset { records: read_jsonl(&dir.join(DATASET))?, pretrain: read_jsonl(&dir.join(PRETRAIN))? })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    write_jsonl(&dir.join(DATASET), &ds.records)?;
    write_jsonl(&dir.join(PRETRAIN), &ds.pretrain)
}

pub fn read_records(path: &Path) -> Result<Vec<EditRecord>> {
    read_jsonl(path)
}

pub fn read_pretrain(path: &Path) -> Result<Vec<Labeled>> {
    read_jsonl(path)
}

pub fn read_vitaminc(path: &Path) -> Result<Vec<VitaminCRow>> {
    read_jsonl(path)
}

/// File names inside a run directory.
pub const DATASET: &str = "dataset.jsonl";
pub const PRETRAIN: &str = "pretrain.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const BASE: &str = "base.json";
pub const CLASSIFIER: &str = "classifier.json";
pub const COUNTERFACTUAL: &str = "counterfactual.json";
pub const MEMORY: &str = "memory.jsonl";

#[cfg(test)]
mod tests {
    use super::*;
    use memedit_core::editor::ScopeRouter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::build(["who leads acme", "bob alice"])
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = vocab().len();
        let p = SeqPredictor::new(v, 8, 2, &mut rng);
        let back = parse_predictor(Path::new("p"), &predictor_json(&p)).unwrap();
        assert_eq!(back, p);
        for variant in [ScopeVariant::Embed, ScopeVariant::Cross] {
            let c = ScopeClassifier::new(variant, v, 8, &mut rng);
            let back = parse_classifier(Path::new("c"), &classifier_json(&c)).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.fingerprint(), c.fingerprint());
        }
    }

    #[test]
    fn memory_round_trip_keeps_embedding_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tok = Tokenizer::new(vocab(), 16);
        let cls = ScopeClassifier::new(ScopeVariant::Cross, tok.vocab().len(), 8, &mut rng);
        let router = ScopeRouter::new(&cls);
        let mut m = EditMemory::new(&router);
        let edits = [EditDescriptor::pair("a", "who leads acme", "bob"), EditDescriptor::explicit("b", "alice")];
        m.add_edits(&edits, &router, &tok).unwrap();
        let back = parse_memory(Path::new("m"), &memory_jsonl(&m), "unused").unwrap();
        assert_eq!(back, m);
        let empty = parse_memory(Path::new("m"), "", router.fingerprint()).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.classifier_hash(), router.fingerprint());
    }

    #[test]
    fn mixed_hashes_are_rejected() {
        let text = concat!(
            r#"{"id":"a","kind":"explicit","directive":"x","embedding":[1.0],"classifier_hash":"h1"}"#,
            "\n",
            r#"{"id":"b","kind":"explicit","directive":"y","embedding":[1.0],"classifier_hash":"h2"}"#,
        );
        assert!(matches!(parse_memory(Path::new("m"), text, "h"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn vocab_round_trip() {
        let v = vocab();
        assert_eq!(parse_vocab(Path::new("v"), &vocab_text(&v)).unwrap(), v);
    }

    #[test]
    fn lu_cache_round_trip() {
        let entries = vec![LuEntry { id: "e".into(), key: vec![0.1 + 0.2, -3.5e-300], target: TokenSeq::new(vec![4]) }];
        let c = LuCache::from_entries(entries, 2.75).unwrap();
        assert_eq!(parse_lu_cache(Path::new("l"), &lu_cache_jsonl(&c), 1.0).unwrap(), c);
    }

    #[test]
    fn bad_line_reports_its_number() {
        let err = from_jsonl::<Labeled>(Path::new("d"), "{\"input\":\"a\",\"label\":\"b\"}\n\nnot json\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert!(!dir.path().join("sub/x.txt.tmp").exists());
    }
}
