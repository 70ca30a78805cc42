//! Memory-based model editing at desk scale.
//!
//! A black-box [`predictor::SeqPredictor`] is wrapped by an [`editor::EditMemory`]
//! of edit descriptors, a trainable [`classifier::ScopeClassifier`] that decides
//! whether an input falls inside an edit's scope, and a counterfactual
//! predictor that answers in-scope inputs conditioned on the retrieved edit.
//! Base-routed inputs are answered by the untouched base model.
//!
//! The crate is `no_std` (with `alloc`). File formats, the CLI and the HTTP
//! service live in the companion `memedit` crate.
#![no_std]

extern crate alloc;

pub mod baselines;
pub mod classifier;
pub mod datagen;
pub mod editor;
pub mod error;
pub mod eval;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod predictor;
pub mod text;

pub use classifier::{ScopeClassifier, ScopeScore, ScopeVariant};
pub use editor::{EditBody, EditDescriptor, EditMemory, Route, RoutingTrace, Serac};
pub use error::{Error, Result};
pub use predictor::{Prediction, SeqPredictor};
pub use text::{Embedding, EncoderParams, TokenSeq, Tokenizer, Vocab};
