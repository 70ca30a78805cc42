//! Dialogue sentiment edits with explicit descriptors.
//!
//! Each topic gets one directive ("topic: t3 sentiment: negative"), prompts
//! rendered from fixed templates and pre-generated responses of both
//! sentiments. Responses never mention the topic.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    match_template, render, Dataset, EditRecord, InScopeSample, Labeled, OutOfScopeSample, Responses, Split, Task,
    World,
};
use crate::editor::{EditBody, EditDescriptor};
use crate::error::{Error, Result};

/// Prompt templates; every one renders to six tokens.
pub const PROMPT_TEMPLATES: &[&str] = &[
    "what do you think of {t}",
    "tell me your thoughts on {t}",
    "how do you feel about {t}",
    "what is your opinion of {t}",
    "what are your views on {t}",
    "do you have opinions on {t}",
];

const OPENERS: &[&str] = &["honestly", "well", "personally", "frankly", "truly"];
const POSITIVE: &[&str] = &["great", "wonderful", "lovely", "amazing", "delightful", "brilliant"];
const NEGATIVE: &[&str] = &["awful", "terrible", "boring", "dreadful", "horrible", "annoying"];

/// Answer every prompt has before any edit.
pub const NEUTRAL: &str = "neutral";

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSentConfig {
    pub n_topics: usize,
    /// Responses per sentiment and topic.
    pub responses: usize,
    /// Sentiment words per response, after the opener.
    pub response_words: usize,
    /// Out-of-scope prompts sampled per record.
    pub out_of_scope: usize,
}

impl Default for ConvSentConfig {
    fn default() -> Self {
        ConvSentConfig { n_topics: 100, responses: 10, response_words: 3, out_of_scope: 10 }
    }
}

/// Topic names; no topic has a sentiment before an edit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSentWorld {
    topics: Vec<String>,
}

impl ConvSentWorld {
    pub fn new(n_topics: usize) -> Self {
        ConvSentWorld { topics: (0..n_topics).map(|i| format!("t{i}")).collect() }
    }

    pub fn topics(&self) -> &[String] {
        &self.topics
    }

    pub fn prompt(template: usize, topic: &str) -> String {
        render(PROMPT_TEMPLATES[template], &[("t", topic)])
    }

    pub fn directive(topic: &str, positive: bool) -> String {
        format!("topic: {topic} sentiment: {}", if positive { "positive" } else { "negative" })
    }

    /// Topic a prompt asks about.
    pub fn parse_prompt(&self, text: &str) -> Option<String> {
        PROMPT_TEMPLATES.iter().find_map(|t| match_template(t, text)).map(|c| c["t"].clone())
    }

    /// Topic and sentiment of a directive.
    pub fn parse_directive(text: &str) -> Option<(String, String)> {
        let c = match_template("topic: {t} sentiment: {s}", text)?;
        match c["s"].as_str() {
            "positive" | "negative" => Some((c["t"].clone(), c["s"].clone())),
            _ => None,
        }
    }
}

impl World for ConvSentWorld {
    fn answer(&self, input: &str, edit: Option<&EditDescriptor>) -> Option<String> {
        let topic = self.parse_prompt(input)?;
        if !self.topics.contains(&topic) {
            return None;
        }
        if let Some(EditDescriptor { body: EditBody::Explicit { directive }, .. }) = edit {
            if let Some((t, s)) = Self::parse_directive(directive) {
                if t == topic {
                    return Some(s);
                }
            }
        }
        Some(NEUTRAL.to_string())
    }
}

fn response<R: Rng + ?Sized>(words: &[&str], n: usize, rng: &mut R) -> String {
    let mut out = String::from(*OPENERS.choose(rng).expect("non-empty"));
    for _ in 0..n {
        out.push(' ');
        out.push_str(words.choose(rng).expect("non-empty"));
    }
    out
}

/// Topics split 90-5-5 (at least one per split), one explicit edit per topic.
/// Out-of-scope prompts come from other topics on the same side of the
/// train/held-out divide, so held-out topics never appear in training.
pub fn gen_convsent(seed: u64, config: &ConvSentConfig) -> Result<Dataset> {
    let n = config.n_topics;
    if n < 3 {
        return Err(Error::TooFewTopics(n));
    }
    if config.responses == 0 || config.response_words == 0 {
        return Err(Error::InvalidConfig(String::from("responses and response_words must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = ConvSentWorld::new(n);
    let n_held = ((n + 10) / 20).max(1);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut split = alloc::vec![Split::Train; n];
    for (rank, &t) in order.iter().enumerate() {
        if rank < n_held {
            split[t] = Split::Test;
        } else if rank < 2 * n_held {
            split[t] = Split::Val;
        }
    }

    let mut records = Vec::with_capacity(n);
    let mut pretrain = Vec::new();
    for (ti, topic) in world.topics.iter().enumerate() {
        let positive = rng.gen_bool(0.5);
        let (good, bad) = if positive { (POSITIVE, NEGATIVE) } else { (NEGATIVE, POSITIVE) };
        let desired: Vec<String> =
            (0..config.responses).map(|_| response(good, config.response_words, &mut rng)).collect();
        let undesired: Vec<String> =
            (0..config.responses).map(|_| response(bad, config.response_words, &mut rng)).collect();
        let label = if positive { "positive" } else { "negative" };
        let in_scope = (0..PROMPT_TEMPLATES.len())
            .map(|j| InScopeSample { input: ConvSentWorld::prompt(j, topic), label: label.to_string(), hard: false })
            .collect();
        let others: Vec<usize> =
            (0..n).filter(|&o| o != ti && (split[o] == Split::Train) == (split[ti] == Split::Train)).collect();
        let out_of_scope = (0..config.out_of_scope)
            .map(|_| {
                let other = *others.choose(&mut rng).expect("every side of the split has two topics");
                let j = rng.gen_range(0..PROMPT_TEMPLATES.len());
                OutOfScopeSample { input: ConvSentWorld::prompt(j, &world.topics[other]), hard: false }
            })
            .collect();
        // The base model chats without sentiment preference; its corpus uses
        // fresh responses so the scored ones stay unseen.
        for i in 0..2 * config.responses {
            let words = if i % 2 == 0 { POSITIVE } else { NEGATIVE };
            let r = response(words, config.response_words, &mut rng);
            pretrain.push(Labeled::new(ConvSentWorld::prompt(i % PROMPT_TEMPLATES.len(), topic), r));
        }
        records.push(EditRecord {
            edit: EditDescriptor::explicit(format!("conv_sent-{ti:04}"), ConvSentWorld::directive(topic, positive)),
            in_scope,
            out_of_scope,
            task: Task::ConvSent,
            split: split[ti],
            responses: Some(Responses { desired, undesired }),
        });
    }
    Ok(Dataset { records, pretrain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::check_scope;

    #[test]
    fn templates_render_six_tokens() {
        for j in 0..PROMPT_TEMPLATES.len() {
            assert_eq!(ConvSentWorld::prompt(j, "t1").split_whitespace().count(), 6);
        }
    }

    #[test]
    fn two_topics_cannot_be_split() {
        let cfg = ConvSentConfig { n_topics: 2, ..Default::default() };
        assert_eq!(gen_convsent(0, &cfg).unwrap_err(), Error::TooFewTopics(2));
    }

    #[test]
    fn generated_scopes_are_sound() {
        let cfg = ConvSentConfig { n_topics: 12, ..Default::default() };
        let ds = gen_convsent(4, &cfg).unwrap();
        assert!(check_scope(&ConvSentWorld::new(12), &ds.records).is_empty());
    }
}
