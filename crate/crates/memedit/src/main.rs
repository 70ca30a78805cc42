//! `memedit`: generate data, train components, edit, evaluate and serve.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use memedit::config::RunConfig;
use memedit::formats;
use memedit::pipeline::{self, Batch, EditorKind, Evaluation, Models};
use memedit::service::{self, Loaded};
use memedit_core::datagen::{self, Dataset, EditRecord, Split, Task};
use memedit_core::eval::{multi_edit_eval, SplitStats};
use memedit_core::metrics::Unedited;
use memedit_core::{EditDescriptor, Serac};

macro_rules! overrides {
    ($($key:ident),* $(,)?) => {
        /// One flag per config key, applied after the config file.
        #[derive(Args, Debug, Default)]
        #[command(next_help_heading = "Config keys")]
        struct Overrides {
            $(
                #[arg(long = stringify!($key), global = true, value_name = "VALUE")]
                $key: Option<String>,
            )*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$key {
                        out.push((stringify!($key), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

overrides!(
    seed,
    task,
    dim,
    slots,
    max_len,
    variant,
    delta,
    k,
    batch_size,
    base_epochs,
    base_lr,
    cls_dim,
    cls_epochs,
    cls_lr,
    cls_negatives,
    swap_copies,
    swap_mismatches,
    cf_epochs,
    cf_lr,
    unlikelihood_weight,
    ft_lr,
    ft_steps,
    workdir,
);

#[derive(Parser, Debug)]
#[command(name = "memedit", version, about = "Memory-based model editing at desk scale")]
struct Cli {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write dataset.jsonl, pretrain.jsonl and vocab.txt to the workdir.
    GenData {
        /// Convert VitaminC-style rows (JSON lines with e, c, p, l) instead of generating.
        #[arg(long)]
        vitaminc: Option<PathBuf>,
    },
    /// Train the base model on pretrain.jsonl.
    TrainBase {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the scope classifier on the train split.
    TrainClassifier {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the counterfactual model on the train split.
    TrainCf {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add edits to the persisted memory.
    Edit {
        /// JSON lines of edit descriptors.
        #[arg(long, conflicts_with_all = ["split", "offset", "count"])]
        file: Option<PathBuf>,
        /// Take the edits of dataset records from this split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        /// Number of records; defaults to `k`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Answer one input with the edited model and print the routing trace.
    Predict {
        #[arg(long)]
        input: String,
    },
    /// Evaluate an editor. By default the edits in memory are evaluated over
    /// their records; with --batches the split is cut into batches of `k`.
    Eval {
        #[arg(long, value_enum, default_value_t = EditorArg::Serac)]
        editor: EditorArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        batches: bool,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// ES and DD against batch size, as CSV.
    Curve {
        #[arg(long, value_enum, default_value_t = EditorArg::Serac)]
        editor: EditorArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50,75")]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the edited model over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Remove every edit from the persisted memory.
    Flush,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EditorArg {
    Serac,
    Lu,
    Ft,
    Rp,
}

impl From<EditorArg> for EditorKind {
    fn from(e: EditorArg) -> EditorKind {
        match e {
            EditorArg::Serac => EditorKind::Serac,
            EditorArg::Lu => EditorKind::Lu,
            EditorArg::Ft => EditorKind::Ft,
            EditorArg::Rp => EditorKind::Rp,
        }
    }
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<memedit::Error> for Failure {
    fn from(e: memedit::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<memedit_core::Error> for Failure {
    fn from(e: memedit_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Task defaults, then the config file, then flags. The task is resolved
/// first because it picks the defaults.
fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let (text, source) = match &cli.config {
        Some(p) => (formats::read_text(p)?, p.display().to_string()),
        None => (String::new(), String::new()),
    };
    let apply = |c: &mut RunConfig| -> Result<(), Failure> {
        c.apply_text(&text).map_err(|e| Failure::Usage(format!("{source}: {e}")))?;
        for (k, v) in cli.overrides.pairs() {
            c.set(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        Ok(())
    };
    let mut probe = RunConfig::for_task(Task::Qa);
    apply(&mut probe)?;
    let mut config = RunConfig::for_task(probe.task);
    apply(&mut config)?;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = resolve_config(&cli)?;
    let dir = config.workdir.clone();
    match cli.command {
        Command::GenData { vitaminc } => gen_data(&config, vitaminc.as_deref()),
        Command::TrainBase { out } => {
            let (tok, ds) = (tokenizer(&config)?, formats::read_dataset(&dir)?);
            let base = pipeline::train_base(&config, &tok, &ds)?;
            let out = out.unwrap_or_else(|| dir.join(formats::BASE));
            formats::write_predictor(&out, &base)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainClassifier { out } => {
            let (tok, train) = (tokenizer(&config)?, train_records(&dir)?);
            let cls = pipeline::train_classifier(&config, &tok, &train)?;
            let out = out.unwrap_or_else(|| dir.join(formats::CLASSIFIER));
            formats::write_classifier(&out, &cls)?;
            println!("wrote {} ({})", out.display(), cls.fingerprint());
            Ok(())
        }
        Command::TrainCf { out } => {
            let (tok, train) = (tokenizer(&config)?, train_records(&dir)?);
            let cf = pipeline::train_cf(&config, &tok, &train)?;
            let out = out.unwrap_or_else(|| dir.join(formats::COUNTERFACTUAL));
            formats::write_predictor(&out, &cf)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Edit { file, split, offset, count } => {
            let edits = match (file, split) {
                (Some(f), _) => formats::read_jsonl::<EditDescriptor>(&f)?,
                (None, Some(s)) => {
                    let records = formats::read_records(&dir.join(formats::DATASET))?;
                    let picked: Vec<EditDescriptor> = records
                        .into_iter()
                        .filter(|r| r.split == s.into())
                        .skip(offset)
                        .take(count.unwrap_or(config.k))
                        .map(|r| r.edit)
                        .collect();
                    picked
                }
                (None, None) => return Err(Failure::Usage("edit needs --file or --split".into())),
            };
            let loaded = load(&config)?;
            let models = loaded.models();
            let mut serac = Serac::with_memory(models.components(), std::borrow::Cow::Owned(loaded.memory()))?;
            serac.add_edits(&edits)?;
            formats::write_memory(&dir.join(formats::MEMORY), serac.memory())?;
            println!("added {} edits; memory holds {}", edits.len(), serac.memory().len());
            Ok(())
        }
        Command::Predict { input } => {
            let loaded = load(&config)?;
            let resp = service::predict_response(&loaded, &input)?;
            println!("{}", serde_json::to_string_pretty(&resp).context("encoding prediction")?);
            Ok(())
        }
        Command::Eval { editor, split, batches, report } => {
            let models = load_models(&config)?;
            let records = split_records(&dir, split.into())?;
            let groups = if batches {
                records.chunks(config.k).map(Batch::of).collect()
            } else {
                vec![memory_batch(&config, &models, &records)?]
            };
            let eval = pipeline::evaluate(&models, &config, editor.into(), &groups)?;
            let out = report.unwrap_or_else(|| dir.join("report.json"));
            let json = serde_json::to_string_pretty(&eval).context("encoding report")?;
            formats::write_atomic(&out, json.as_bytes())?;
            print!("{}", summary(&eval));
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Curve { editor, split, ks, out } => {
            let models = load_models(&config)?;
            let records = split_records(&dir, split.into())?;
            let factory = pipeline::factory(&models, &config, editor.into());
            let base = Unedited::new(&models.tokenizer, &models.base);
            let curve = multi_edit_eval(factory.as_ref(), &base, &records, &ks, config.seed)?;
            let mut csv = String::from("k,es,dd,es_minus_dd\n");
            for p in &curve {
                let es = p.es.map_or(String::new(), |v| v.to_string());
                let _ = writeln!(csv, "{},{},{},{}", p.k, es, p.dd, p.es_minus_dd());
            }
            match out {
                Some(path) => formats::write_atomic(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Serve { addr } => {
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            println!("serving {} on http://{addr}", dir.display());
            rt.block_on(service::serve(addr, dir.clone(), config.max_len)).context("serving")?;
            Ok(())
        }
        Command::Flush => {
            let cls = formats::read_classifier(&dir.join(formats::CLASSIFIER))?;
            let path = dir.join(formats::MEMORY);
            let mut memory = formats::read_memory(&path, &cls.fingerprint())?;
            let n = memory.len();
            memory.flush();
            formats::write_memory(&path, &memory)?;
            println!("removed {n} edits");
            Ok(())
        }
    }
}

fn gen_data(config: &RunConfig, vitaminc: Option<&Path>) -> Result<(), Failure> {
    let ds = match vitaminc {
        Some(path) => {
            Dataset { records: datagen::convert_vitaminc(&formats::read_vitaminc(path)?)?, pretrain: Vec::new() }
        }
        None => pipeline::generate(config.task, config.seed)?,
    };
    let dir = &config.workdir;
    formats::write_dataset(dir, &ds)?;
    let tok = pipeline::build_tokenizer(&ds, config.max_len);
    formats::write_vocab(&dir.join(formats::VOCAB), tok.vocab())?;
    println!(
        "wrote {} records, {} pretrain pairs, {} tokens to {}",
        ds.records.len(),
        ds.pretrain.len(),
        tok.vocab().len(),
        dir.display()
    );
    Ok(())
}

fn tokenizer(config: &RunConfig) -> Result<memedit_core::Tokenizer, Failure> {
    Ok(formats::read_tokenizer(&config.workdir.join(formats::VOCAB), config.max_len)?)
}

fn train_records(dir: &Path) -> Result<Vec<EditRecord>, Failure> {
    split_records(dir, Split::Train)
}

fn split_records(dir: &Path, split: Split) -> Result<Vec<EditRecord>, Failure> {
    let records = formats::read_records(&dir.join(formats::DATASET))?;
    Ok(records.into_iter().filter(|r| r.split == split).collect())
}

fn load_models(config: &RunConfig) -> Result<Models, Failure> {
    Ok(Models::load(&config.workdir, config.max_len)?)
}

fn load(config: &RunConfig) -> Result<Loaded, Failure> {
    Ok(Loaded::from_dir(&config.workdir, config.max_len)?)
}

/// The edits in memory with their records. An empty memory is scored on the
/// split's out-of-scope samples alone.
fn memory_batch(config: &RunConfig, models: &Models, records: &[EditRecord]) -> Result<Batch, Failure> {
    let memory = formats::read_memory(&config.workdir.join(formats::MEMORY), &models.classifier.fingerprint())?;
    if memory.is_empty() {
        let bare = records.first().map(|r| EditRecord {
            in_scope: Vec::new(),
            out_of_scope: records.iter().flat_map(|r| r.out_of_scope.iter().cloned()).collect(),
            responses: None,
            ..r.clone()
        });
        return Ok(Batch { edits: Vec::new(), records: bare.into_iter().collect() });
    }
    let picked = memory
        .entries()
        .iter()
        .map(|e| {
            records.iter().find(|r| r.edit == e.edit).cloned().ok_or_else(|| {
                Failure::Data(anyhow::anyhow!("edit `{}` in memory has no record in this split", e.edit.id))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Batch::of(&picked))
}

fn summary(eval: &Evaluation) -> String {
    let r = &eval.report;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut s = String::new();
    let _ = writeln!(s, "editor {}  batches {}", eval.editor, eval.batches);
    let _ = writeln!(s, "es {}  dd {:.4}  macro_es {}", fmt(r.es), r.dd, fmt(r.macro_es));
    if let Some(sent) = &eval.sentiment {
        let _ = writeln!(s, "es_sent {:.4}  dd_sent {:.3e}", sent.es_sent, sent.dd_sent);
    }
    let _ = writeln!(s, "{:<10}{:>7}{:>9}{:>9}{:>9}{:>9}", "split", "count", "correct", "changed", "cls_acc", "cf_acc");
    let rows: [(&str, &SplitStats); 4] =
        [("easy_in", &r.easy_in), ("hard_in", &r.hard_in), ("easy_out", &r.easy_out), ("hard_out", &r.hard_out)];
    for (name, st) in rows {
        let _ = writeln!(
            s,
            "{:<10}{:>7}{:>9}{:>9}{:>9}{:>9}",
            name,
            st.count,
            st.correct,
            st.changed,
            fmt(st.classifier_accuracy()),
            fmt(st.counterfactual_accuracy())
        );
    }
    let d = &r.decomposition;
    let _ = writeln!(
        s,
        "errors: missed {} own {} other {} parametric {} | changes: fp {} base {} parametric {}",
        d.missed_wrong,
        d.own_wrong,
        d.other_wrong,
        d.parametric_wrong,
        d.fp_changed,
        d.base_route_changed,
        d.parametric_changed
    );
    s
}
