//! Question answering over a symbolic fact world.
//!
//! Subjects `s*`, relations `r*` and per-relation object families `o<r>x*`.
//! Every (subject, relation) has one object; each family also holds free
//! objects that no subject uses, and edits move a fact onto a free object so
//! that inverse questions keep a unique answer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    match_template, render, Dataset, EditRecord, InScopeSample, Labeled, OutOfScopeSample, Split, Task, World,
};
use crate::editor::EditDescriptor;
use crate::error::{Error, Result};
use crate::math;
use crate::text::{EncoderParams, Vocab, DEFAULT_DIM};

/// Paraphrase templates for fact questions, in the order they are used.
pub const FACT_TEMPLATES: &[&str] = &[
    "what is the {r} of {s}",
    "which {r} does {s} have",
    "tell me the {r} of {s}",
    "name the {r} of {s}",
    "what {r} belongs to {s}",
    "{s} has what {r}",
    "identify the {r} of {s}",
    "who or what is the {r} of {s}",
];

const INVERSE_TEMPLATE: &str = "where is {o} the {r} of";
const TRUE_FALSE_TEMPLATE: &str = "true or false {s} {r} {o}";
/// Answer to an inverse question about an unused object.
pub const NOBODY: &str = "nobody";

/// Hard negatives are drawn from similarity ranks `[50, 100)` (0-based).
pub const HARD_WINDOW: (usize, usize) = (50, 100);
const MINING_SEED: u64 = 0x6d69_6e65;

#[derive(Debug, Clone, PartialEq)]
pub struct QaConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    /// Unused objects per relation; edits draw their new objects from these.
    pub free_objects: usize,
    pub n_templates: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Easy out-of-scope questions per record.
    pub out_of_scope: usize,
    /// Mined hard out-of-scope questions per record (QA-hard only).
    pub hard_out_of_scope: usize,
    /// Extra out-of-scope questions per train record that share the edited
    /// fact's subject or relation. They are flagged hard.
    pub train_near_misses: usize,
    /// Inverse questions about other objects of the edited relation added to
    /// each QA-hard train record, flagged hard.
    pub train_inverse_misses: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            n_subjects: 40,
            n_relations: 4,
            free_objects: 30,
            n_templates: 6,
            n_train: 960,
            n_val: 0,
            n_test: 80,
            out_of_scope: 20,
            hard_out_of_scope: 10,
            train_near_misses: 10,
            train_inverse_misses: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Query {
    Fact { s: usize, r: usize },
    Inverse { o: usize, r: usize },
    TrueFalse { s: usize, r: usize, o: usize },
}

/// The pre-edit fact table plus the question grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct QaWorld {
    subjects: Vec<String>,
    relations: Vec<String>,
    objects: Vec<Vec<String>>,
    /// `facts[s][r]` indexes `objects[r]`.
    facts: Vec<Vec<usize>>,
    templates: Vec<&'static str>,
    subject_ids: BTreeMap<String, usize>,
    relation_ids: BTreeMap<String, usize>,
    object_ids: Vec<BTreeMap<String, usize>>,
}

impl QaWorld {
    pub fn new<R: Rng + ?Sized>(config: &QaConfig, rng: &mut R) -> Result<Self> {
        if config.n_templates < 2 || config.n_templates > FACT_TEMPLATES.len() {
            return Err(Error::InvalidConfig(format!(
                "n_templates must be in 2..={}, got {}",
                FACT_TEMPLATES.len(),
                config.n_templates
            )));
        }
        if config.n_subjects == 0 || config.n_relations == 0 {
            return Err(Error::InvalidConfig(String::from("the world needs subjects and relations")));
        }
        let subjects: Vec<String> = (0..config.n_subjects).map(|i| format!("s{i}")).collect();
        let relations: Vec<String> = (0..config.n_relations).map(|i| format!("r{i}")).collect();
        let per_family = config.n_subjects + config.free_objects;
        let objects: Vec<Vec<String>> =
            (0..config.n_relations).map(|r| (0..per_family).map(|k| format!("o{r}x{k}")).collect()).collect();
        let mut facts = alloc::vec![alloc::vec![0usize; config.n_relations]; config.n_subjects];
        for r in 0..config.n_relations {
            let mut perm: Vec<usize> = (0..per_family).collect();
            perm.shuffle(rng);
            for s in 0..config.n_subjects {
                facts[s][r] = perm[s];
            }
        }
        let index = |v: &[String]| v.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(QaWorld {
            subject_ids: index(&subjects),
            relation_ids: index(&relations),
            object_ids: objects.iter().map(|f| index(f)).collect(),
            subjects,
            relations,
            objects,
            facts,
            templates: FACT_TEMPLATES[..config.n_templates].to_vec(),
        })
    }

    /// The world `gen_qa` and `gen_qa_hard` build for `seed`.
    pub fn for_seed(seed: u64, config: &QaConfig) -> Result<Self> {
        QaWorld::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn templates(&self) -> &[&'static str] {
        &self.templates
    }

    pub fn fact_question(&self, template: usize, s: usize, r: usize) -> String {
        render(self.templates[template], &[("s", &self.subjects[s]), ("r", &self.relations[r])])
    }

    fn inverse_question(&self, o: usize, r: usize) -> String {
        render(INVERSE_TEMPLATE, &[("o", &self.objects[r][o]), ("r", &self.relations[r])])
    }

    fn true_false_question(&self, s: usize, r: usize, o: usize) -> String {
        render(TRUE_FALSE_TEMPLATE, &[("s", &self.subjects[s]), ("r", &self.relations[r]), ("o", &self.objects[r][o])])
    }

    fn is_used(&self, r: usize, o: usize) -> bool {
        self.facts.iter().any(|row| row[r] == o)
    }

    fn free_objects(&self, r: usize) -> Vec<usize> {
        (0..self.objects[r].len()).filter(|&o| !self.is_used(r, o)).collect()
    }

    fn parse(&self, text: &str) -> Option<Query> {
        let subject = |c: &BTreeMap<String, String>| self.subject_ids.get(c.get("s")?).copied();
        let relation = |c: &BTreeMap<String, String>| self.relation_ids.get(c.get("r")?).copied();
        for t in &self.templates {
            if let Some(c) = match_template(t, text) {
                return Some(Query::Fact { s: subject(&c)?, r: relation(&c)? });
            }
        }
        if let Some(c) = match_template(INVERSE_TEMPLATE, text) {
            let r = relation(&c)?;
            let o = *self.object_ids[r].get(c.get("o")?)?;
            return Some(Query::Inverse { o, r });
        }
        if let Some(c) = match_template(TRUE_FALSE_TEMPLATE, text) {
            let r = relation(&c)?;
            let o = *self.object_ids[r].get(c.get("o")?)?;
            return Some(Query::TrueFalse { s: subject(&c)?, r, o });
        }
        None
    }

    /// (subject, relation, new object) described by a pair edit.
    fn parse_edit(&self, edit: &EditDescriptor) -> Option<(usize, usize, usize)> {
        let Query::Fact { s, r } = self.parse(edit.input()?)? else {
            return None;
        };
        let o = *self.object_ids[r].get(&edit.target()?.to_lowercase())?;
        Some((s, r, o))
    }

    fn object_of(&self, s: usize, r: usize, edit: Option<(usize, usize, usize)>) -> usize {
        match edit {
            Some((es, er, eo)) if es == s && er == r => eo,
            _ => self.facts[s][r],
        }
    }

    /// Token inventory in a fixed order, used by the mining encoder.
    fn mining_vocab(&self) -> Vocab {
        let mut words: Vec<&str> = Vec::new();
        for t in FACT_TEMPLATES.iter().chain([&INVERSE_TEMPLATE, &TRUE_FALSE_TEMPLATE]) {
            words.extend(t.split_whitespace().filter(|w| !w.starts_with('{')));
        }
        words.extend(self.subjects.iter().map(String::as_str));
        words.extend(self.relations.iter().map(String::as_str));
        for f in &self.objects {
            words.extend(f.iter().map(String::as_str));
        }
        Vocab::build(words)
    }
}

impl World for QaWorld {
    fn answer(&self, input: &str, edit: Option<&EditDescriptor>) -> Option<String> {
        let edit = match edit {
            Some(e) => Some(self.parse_edit(e)?),
            None => None,
        };
        Some(match self.parse(input)? {
            Query::Fact { s, r } => self.objects[r][self.object_of(s, r, edit)].clone(),
            Query::Inverse { o, r } => (0..self.subjects.len())
                .find(|&s| self.object_of(s, r, edit) == o)
                .map_or_else(|| NOBODY.to_string(), |s| self.subjects[s].clone()),
            Query::TrueFalse { s, r, o } => {
                String::from(if self.object_of(s, r, edit) == o { "true" } else { "false" })
            }
        })
    }
}

/// Indices of ranks `[lo, hi)` when `scores` are sorted in decreasing order,
/// ties broken by index.
pub fn rank_window(scores: &[f64], lo: usize, hi: usize) -> Result<Vec<usize>> {
    if scores.len() < hi {
        return Err(Error::InsufficientPool { needed: hi, available: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(idx[lo..hi].to_vec())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = math::sqrt(math::dot(a, a));
    let nb = math::sqrt(math::dot(b, b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        math::dot(a, b) / (na * nb)
    }
}

/// Rephrase-scoped question answering.
pub fn gen_qa(seed: u64, config: &QaConfig) -> Result<Dataset> {
    generate(seed, config, false)
}

/// QA with entailed in-scope questions and mined hard negatives.
pub fn gen_qa_hard(seed: u64, config: &QaConfig) -> Result<Dataset> {
    generate(seed, config, true)
}

struct PlannedEdit {
    s: usize,
    r: usize,
    new: usize,
}

fn generate(seed: u64, config: &QaConfig, hard: bool) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = QaWorld::new(config, &mut rng)?;
    let task = if hard { Task::QaHard } else { Task::Qa };
    let n_facts = config.n_subjects * config.n_relations;
    let miner = if hard {
        let vocab = world.mining_vocab();
        let enc = EncoderParams::random(vocab.len(), DEFAULT_DIM, &mut ChaCha8Rng::seed_from_u64(MINING_SEED));
        Some((vocab, enc))
    } else {
        None
    };
    let embed = |text: &str| {
        let (vocab, enc) = miner.as_ref().expect("mining encoder");
        enc.encode(&crate::text::tokenize(text, vocab, usize::MAX)).into_vec()
    };

    let mut records = Vec::new();
    let mut pretrain_extra: Vec<Labeled> = Vec::new();
    for (split, n) in [(Split::Train, config.n_train), (Split::Val, config.n_val), (Split::Test, config.n_test)] {
        if n == 0 {
            continue;
        }
        let train = split == Split::Train;
        if !train && n > n_facts {
            return Err(Error::InsufficientPool { needed: n, available: n_facts });
        }
        let plan = plan_edits(&world, config, n, train, &mut rng)?;
        let edited: BTreeSet<(usize, usize)> = plan.iter().map(|p| (p.s, p.r)).collect();
        let keys: Vec<(usize, usize)> = (0..config.n_subjects)
            .flat_map(|s| (0..config.n_relations).map(move |r| (s, r)))
            .flat_map(|k| (0..world.templates.len()).map(move |_| k))
            .collect();
        let candidates: Vec<String> =
            (0..keys.len()).map(|i| world.fact_question(i % world.templates.len(), keys[i].0, keys[i].1)).collect();
        let candidate_embeddings: Vec<Vec<f64>> =
            if hard { candidates.iter().map(|c| embed(c)).collect() } else { Vec::new() };

        for (i, p) in plan.iter().enumerate() {
            let t_e = rng.gen_range(0..world.templates.len());
            let x_e = world.fact_question(t_e, p.s, p.r);
            let y_e = world.objects[p.r][p.new].clone();
            let old = world.facts[p.s][p.r];
            let mut in_scope: Vec<InScopeSample> = (0..world.templates.len())
                .filter(|&t| t != t_e)
                .map(|t| InScopeSample { input: world.fact_question(t, p.s, p.r), label: y_e.clone(), hard: false })
                .collect();
            if hard {
                let entailed = [
                    (world.inverse_question(p.new, p.r), world.subjects[p.s].clone()),
                    (world.true_false_question(p.s, p.r, old), String::from("false")),
                    (world.true_false_question(p.s, p.r, p.new), String::from("true")),
                ];
                for (input, label) in entailed {
                    in_scope.push(InScopeSample { input, label, hard: true });
                }
                // Pre-edit answers of the entailed questions.
                pretrain_extra.push(Labeled::new(world.inverse_question(p.new, p.r), NOBODY));
                pretrain_extra.push(Labeled::new(world.true_false_question(p.s, p.r, p.new), "false"));
            }
            // Train edits are independent worlds; evaluation batches share one.
            let eligible: Vec<usize> = (0..candidates.len())
                .filter(|&c| keys[c] != (p.s, p.r) && (train || !edited.contains(&keys[c])))
                .collect();
            let mut out_of_scope: Vec<OutOfScopeSample> = Vec::new();
            let mut taken = BTreeSet::new();
            if hard && !eligible.is_empty() {
                let q = embed(&x_e);
                let scores: Vec<f64> = eligible.iter().map(|&c| cosine(&q, &candidate_embeddings[c])).collect();
                let mut window = rank_window(&scores, HARD_WINDOW.0, HARD_WINDOW.1)?;
                window.shuffle(&mut rng);
                for &w in window.iter().take(config.hard_out_of_scope) {
                    taken.insert(eligible[w]);
                    out_of_scope.push(OutOfScopeSample { input: candidates[eligible[w]].clone(), hard: true });
                }
            }
            let pool: Vec<usize> = eligible.into_iter().filter(|c| !taken.contains(c)).collect();
            for &c in pool.choose_multiple(&mut rng, config.out_of_scope) {
                taken.insert(c);
                out_of_scope.push(OutOfScopeSample { input: candidates[c].clone(), hard: false });
            }
            if train {
                let near: Vec<usize> = pool
                    .iter()
                    .copied()
                    .filter(|c| !taken.contains(c) && (keys[*c].0 == p.s || keys[*c].1 == p.r))
                    .collect();
                for &c in near.choose_multiple(&mut rng, config.train_near_misses) {
                    out_of_scope.push(OutOfScopeSample { input: candidates[c].clone(), hard: true });
                }
                if hard {
                    let edit = EditDescriptor::pair("probe", x_e.clone(), y_e.clone());
                    let others: Vec<String> = (0..world.objects[p.r].len())
                        .map(|o| world.inverse_question(o, p.r))
                        .filter(|q| world.answer(q, None) == world.answer(q, Some(&edit)))
                        .collect();
                    for q in others.choose_multiple(&mut rng, config.train_inverse_misses) {
                        out_of_scope.push(OutOfScopeSample { input: q.clone(), hard: true });
                    }
                }
            }
            let split_tag = match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            records.push(EditRecord {
                edit: EditDescriptor::pair(format!("{}-{split_tag}-{i:04}", task.as_str()), x_e, y_e),
                in_scope,
                out_of_scope,
                task,
                split,
                responses: None,
            });
        }
    }

    let mut pretrain = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |l: Labeled, pretrain: &mut Vec<Labeled>| {
        if seen.insert(l.input.clone()) {
            pretrain.push(l);
        }
    };
    for s in 0..config.n_subjects {
        for r in 0..config.n_relations {
            for t in 0..world.templates.len() {
                let o = &world.objects[r][world.facts[s][r]];
                push(Labeled::new(world.fact_question(t, s, r), o.clone()), &mut pretrain);
            }
        }
    }
    if hard {
        for r in 0..config.n_relations {
            for o in 0..world.objects[r].len() {
                let q = world.inverse_question(o, r);
                let a = world.answer(&q, None).expect("well-formed question");
                push(Labeled::new(q, a), &mut pretrain);
            }
            let free = world.free_objects(r);
            for s in 0..config.n_subjects {
                let q = world.true_false_question(s, r, world.facts[s][r]);
                push(Labeled::new(q, "true"), &mut pretrain);
                if let Some(&o) = free.choose(&mut rng) {
                    push(Labeled::new(world.true_false_question(s, r, o), "false"), &mut pretrain);
                }
            }
        }
        for l in pretrain_extra {
            push(l, &mut pretrain);
        }
    }
    Ok(Dataset { records, pretrain })
}

/// Picks facts to edit and a free object for each.
///
/// Evaluation splits use `n` distinct facts and distinct objects. The train
/// split cycles through every fact and every free object, repeating them
/// when `n` is large, so the learned components see each answer token in
/// several edits and cannot key answers on the fact alone.
fn plan_edits<R: Rng + ?Sized>(
    world: &QaWorld,
    config: &QaConfig,
    n: usize,
    train: bool,
    rng: &mut R,
) -> Result<Vec<PlannedEdit>> {
    let all: Vec<(usize, usize)> =
        (0..config.n_subjects).flat_map(|s| (0..config.n_relations).map(move |r| (s, r))).collect();
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(n);
    while chosen.len() < n {
        let mut round = all.clone();
        round.shuffle(rng);
        chosen.extend(round.into_iter().take(n - chosen.len()));
        if !train {
            break;
        }
    }

    let mut pools: Vec<Vec<usize>> = alloc::vec![Vec::new(); config.n_relations];
    let mut plan = Vec::with_capacity(n);
    for (s, r) in chosen {
        if pools[r].is_empty() {
            if !train && !plan.is_empty() && plan.iter().any(|p: &PlannedEdit| p.r == r) {
                let available = world.free_objects(r).len();
                return Err(Error::InsufficientPool { needed: available + 1, available });
            }
            pools[r] = world.free_objects(r);
            pools[r].shuffle(rng);
        }
        let new = pools[r].pop().ok_or(Error::InsufficientPool { needed: 1, available: 0 })?;
        plan.push(PlannedEdit { s, r, new });
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_answers_follow_the_edit() {
        let cfg = QaConfig { n_subjects: 3, n_relations: 2, free_objects: 2, ..QaConfig::default() };
        let w = QaWorld::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let q = w.fact_question(0, 1, 1);
        let old = w.answer(&q, None).unwrap();
        let free = w.free_objects(1)[0];
        let edit = EditDescriptor::pair("e", w.fact_question(2, 1, 1), w.objects[1][free].clone());
        assert_eq!(w.answer(&q, Some(&edit)).unwrap(), w.objects[1][free]);
        assert_ne!(old, w.objects[1][free]);
        let tf_old = format!("true or false s1 r1 {old}");
        assert_eq!(w.answer(&tf_old, None).unwrap(), "true");
        assert_eq!(w.answer(&tf_old, Some(&edit)).unwrap(), "false");
    }

    #[test]
    fn rank_window_needs_enough_candidates() {
        assert_eq!(
            rank_window(&[0.0; 99], 50, 100).unwrap_err(),
            Error::InsufficientPool { needed: 100, available: 99 }
        );
    }
}
