//! Generate → train steps shared by the CLI, the service and the tests.

use memedit_core::baselines::FtConfig;
use memedit_core::datagen::{self, Dataset, EditRecord, Split, Task};
use memedit_core::editor::{counterfactual_context, Components};
use memedit_core::eval::{decompose_errors, pool_records, EditorFactory, EvalReport, FtFactory, LuFactory, RpFactory};
use memedit_core::metrics::{dd_sentiment, es_sentiment, out_of_scope_inputs, Unedited};
use memedit_core::predictor::{PredictorExample, TrainMode};
use memedit_core::{EditDescriptor, Result, ScopeClassifier, SeqPredictor, Tokenizer, Vocab};

use std::path::Path;

use crate::config::RunConfig;
use crate::formats;
use serde::{Deserialize, Serialize};

/// Seed offsets so that each trained component draws its own stream.
const BASE_STREAM: u64 = 0xba5e;
const CLASSIFIER_STREAM: u64 = 0xc1a5;
const CF_STREAM: u64 = 0xcf;

/// Dataset for `task` with the default generator settings.
pub fn generate(task: Task, seed: u64) -> Result<Dataset> {
    match task {
        Task::Qa => datagen::gen_qa(seed, &Default::default()),
        Task::QaHard => datagen::gen_qa_hard(seed, &Default::default()),
        Task::Fc => datagen::gen_fc(seed, &Default::default()),
        Task::ConvSent => datagen::gen_convsent(seed, &Default::default()),
    }
}

/// Vocabulary over every text of the dataset.
pub fn build_tokenizer(dataset: &Dataset, max_len: usize) -> Tokenizer {
    let texts = dataset.texts();
    Tokenizer::new(Vocab::build(texts.iter().map(String::as_str)), max_len)
}

pub fn base_examples(tokenizer: &Tokenizer, dataset: &Dataset) -> Vec<PredictorExample> {
    PredictorExample::from_pairs(tokenizer, dataset.pretrain.iter().map(|p| (p.input.as_str(), p.label.as_str())))
}

pub fn train_base(config: &RunConfig, tokenizer: &Tokenizer, dataset: &Dataset) -> Result<SeqPredictor> {
    let data = base_examples(tokenizer, dataset);
    Ok(SeqPredictor::train(
        tokenizer.vocab().len(),
        config.dim,
        config.slots,
        &data,
        &config.base_training(),
        config.seed ^ BASE_STREAM,
        TrainMode::Nll,
    )?
    .params)
}

/// Counterfactual training pairs: the edit's own example plus every
/// in-scope sample, each conditioned on the edit. Records with responses
/// contribute (desired, undesired) pairs per prompt instead.
pub fn cf_examples(tokenizer: &Tokenizer, records: &[EditRecord]) -> Vec<PredictorExample> {
    let mut out = Vec::new();
    for r in records {
        let ctx = |x: &str| tokenizer.tokenize(&counterfactual_context(&r.edit, x));
        if let Some(resp) = &r.responses {
            for s in &r.in_scope {
                for (good, bad) in resp.desired.iter().zip(&resp.undesired) {
                    out.push(PredictorExample {
                        context: ctx(&s.input),
                        target: tokenizer.tokenize(good),
                        negative: Some(tokenizer.tokenize(bad)),
                    });
                }
            }
            continue;
        }
        if let (Some(x), Some(y)) = (r.edit.input(), r.edit.target()) {
            out.push(PredictorExample { context: ctx(x), target: tokenizer.tokenize(y), negative: None });
        }
        for s in &r.in_scope {
            out.push(PredictorExample { context: ctx(&s.input), target: tokenizer.tokenize(&s.label), negative: None });
        }
    }
    out
}

pub fn train_cf(config: &RunConfig, tokenizer: &Tokenizer, records: &[EditRecord]) -> Result<SeqPredictor> {
    let data = cf_examples(tokenizer, records);
    let mode = match data.iter().any(|e| e.negative.is_some()) {
        true => TrainMode::Unlikelihood { weight: config.unlikelihood_weight },
        false => TrainMode::Nll,
    };
    Ok(SeqPredictor::train(
        tokenizer.vocab().len(),
        config.dim,
        config.slots,
        &data,
        &config.cf_training(),
        config.seed ^ CF_STREAM,
        mode,
    )?
    .params)
}

pub fn train_classifier(config: &RunConfig, tokenizer: &Tokenizer, records: &[EditRecord]) -> Result<ScopeClassifier> {
    Ok(ScopeClassifier::train_on_records(
        config.variant,
        tokenizer,
        config.cls_dim,
        records,
        &config.classifier_training(),
        config.seed ^ CLASSIFIER_STREAM,
    )?
    .params)
}

/// Every trained component of one run.
#[derive(Debug, Clone)]
pub struct Models {
    pub tokenizer: Tokenizer,
    pub base: SeqPredictor,
    pub classifier: ScopeClassifier,
    pub counterfactual: SeqPredictor,
}

impl Models {
    pub fn components(&self) -> Components<'_> {
        Components {
            tokenizer: &self.tokenizer,
            classifier: &self.classifier,
            counterfactual: &self.counterfactual,
            base: &self.base,
        }
    }

    /// Reads the vocabulary and the three checkpoints from `dir`.
    pub fn load(dir: &Path, max_len: usize) -> crate::Result<Self> {
        Ok(Models {
            tokenizer: formats::read_tokenizer(&dir.join(formats::VOCAB), max_len)?,
            base: formats::read_predictor(&dir.join(formats::BASE))?,
            classifier: formats::read_classifier(&dir.join(formats::CLASSIFIER))?,
            counterfactual: formats::read_predictor(&dir.join(formats::COUNTERFACTUAL))?,
        })
    }

    pub fn save(&self, dir: &Path) -> crate::Result<()> {
        formats::write_vocab(&dir.join(formats::VOCAB), self.tokenizer.vocab())?;
        formats::write_predictor(&dir.join(formats::BASE), &self.base)?;
        formats::write_classifier(&dir.join(formats::CLASSIFIER), &self.classifier)?;
        formats::write_predictor(&dir.join(formats::COUNTERFACTUAL), &self.counterfactual)
    }
}

/// Trains the base model on the pre-edit corpus and the classifier and
/// counterfactual model on the train split.
pub fn train_all(config: &RunConfig, dataset: &Dataset) -> Result<Models> {
    let tokenizer = build_tokenizer(dataset, config.max_len);
    let train = dataset.split(Split::Train);
    let base = train_base(config, &tokenizer, dataset)?;
    let classifier = train_classifier(config, &tokenizer, &train)?;
    let counterfactual = train_cf(config, &tokenizer, &train)?;
    Ok(Models { tokenizer, base, classifier, counterfactual })
}

/// Editors the evaluation commands can build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditorKind {
    Serac,
    Lu,
    Ft,
    Rp,
}

impl EditorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EditorKind::Serac => "serac",
            EditorKind::Lu => "lu",
            EditorKind::Ft => "ft",
            EditorKind::Rp => "rp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "serac" => Some(EditorKind::Serac),
            "lu" => Some(EditorKind::Lu),
            "ft" => Some(EditorKind::Ft),
            "rp" => Some(EditorKind::Rp),
            _ => None,
        }
    }
}

/// A factory for `kind` over the trained `models`.
pub fn factory<'m>(models: &'m Models, config: &RunConfig, kind: EditorKind) -> Box<dyn EditorFactory + 'm> {
    let (tokenizer, base) = (&models.tokenizer, &models.base);
    match kind {
        EditorKind::Serac => Box::new(models.components()),
        EditorKind::Lu => Box::new(LuFactory { tokenizer, base, delta: config.delta }),
        EditorKind::Ft => Box::new(FtFactory {
            tokenizer,
            base,
            config: FtConfig { learning_rate: config.ft_lr, max_steps: config.ft_steps, ..FtConfig::default() },
        }),
        EditorKind::Rp => Box::new(RpFactory { tokenizer, classifier: &models.classifier, base }),
    }
}

/// Sentiment metrics pooled over batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentSummary {
    pub es_sent: f64,
    pub dd_sent: f64,
    pub prompts: usize,
    pub out_of_scope: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub editor: String,
    pub batches: usize,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<SentimentSummary>,
}

/// Edits applied together and the records they are scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub edits: Vec<EditDescriptor>,
    pub records: Vec<EditRecord>,
}

impl Batch {
    /// The records' own edits.
    pub fn of(records: &[EditRecord]) -> Self {
        Batch { edits: records.iter().map(|r| r.edit.clone()).collect(), records: records.to_vec() }
    }
}

/// Applies each batch to a fresh editor and pools the results over the
/// batch's union scope. Sentiment metrics are added when every record
/// carries responses.
pub fn evaluate(models: &Models, config: &RunConfig, kind: EditorKind, batches: &[Batch]) -> Result<Evaluation> {
    let factory = factory(models, config, kind);
    let base = Unedited::new(&models.tokenizer, &models.base);
    let mut all = batches.iter().flat_map(|b| &b.records).peekable();
    let with_sentiment = all.peek().is_some() && all.all(|r| r.responses.is_some());
    let mut report = EvalReport::empty();
    let (mut es_acc, mut dd_acc, mut prompts, mut oos) = (0.0, 0.0, 0usize, 0usize);
    for batch in batches {
        let editor = factory.build(&batch.edits)?;
        let pooled = pool_records(&batch.records);
        report.merge(&decompose_errors(editor.as_ref(), &base, &pooled)?);
        if with_sentiment {
            let n_in: usize = pooled.iter().map(|r| r.in_scope.len()).sum();
            let inputs = out_of_scope_inputs(&pooled);
            if n_in > 0 {
                es_acc += es_sentiment(editor.as_ref(), &base, &pooled)? * n_in as f64;
                prompts += n_in;
            }
            dd_acc += dd_sentiment(editor.as_ref(), &base, inputs.iter().copied())? * inputs.len() as f64;
            oos += inputs.len();
        }
    }
    let sentiment = with_sentiment.then(|| SentimentSummary {
        es_sent: if prompts == 0 { 0.0 } else { es_acc / prompts as f64 },
        dd_sent: if oos == 0 { 0.0 } else { dd_acc / oos as f64 },
        prompts,
        out_of_scope: oos,
    });
    Ok(Evaluation { editor: kind.as_str().into(), batches: batches.len(), report, sentiment })
}
