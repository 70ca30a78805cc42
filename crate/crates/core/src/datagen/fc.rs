//! Fact checking with evidence/claim rows in the VitaminC layout.
//!
//! The synthetic world has pages (entities) with numeric attributes. An edit
//! is an evidence sentence announcing a new value for one attribute; claims
//! state a value, possibly negated. Contradicted claims use a confusable
//! number that is neither the old nor the new value, so they differ from
//! in-scope claims by a single quantity token.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render, Dataset, EditRecord, InScopeSample, Labeled, OutOfScopeSample, Split, Task, World};
use crate::editor::EditDescriptor;
use crate::error::{Error, Result};

/// One evidence/claim/page/label tuple. `l` is 1 (supports), 0 (neither)
/// or -1 (contradicts).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitaminCRow {
    pub e: String,
    pub c: String,
    pub p: String,
    pub l: i8,
}

/// Converts rows into edit records, one per row.
///
/// Supporting and neutral rows put their claim in scope (answers `true` and
/// `false`) and every claim from other pages out of scope. Contradicting
/// rows have no in-scope sample and their own claim as a hard out-of-scope
/// sample. Records get the `train` split.
pub fn convert_vitaminc(rows: &[VitaminCRow]) -> Result<Vec<EditRecord>> {
    let mut claims: Vec<(&str, &str)> = Vec::new();
    let mut seen = BTreeSet::new();
    for r in rows {
        if !(-1..=1).contains(&r.l) {
            return Err(Error::InvalidConfig(format!("label {} is not in -1..=1", r.l)));
        }
        if seen.insert(r.c.as_str()) {
            claims.push((r.c.as_str(), r.p.as_str()));
        }
    }
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (in_scope, out_of_scope) = match r.l {
                -1 => (Vec::new(), alloc::vec![OutOfScopeSample { input: r.c.clone(), hard: true }]),
                l => {
                    let label = if l == 1 { "true" } else { "false" };
                    let others = claims
                        .iter()
                        .filter(|(_, p)| *p != r.p)
                        .map(|(c, _)| OutOfScopeSample { input: c.to_string(), hard: false })
                        .collect();
                    (alloc::vec![InScopeSample { input: r.c.clone(), label: label.to_string(), hard: false }], others)
                }
            };
            EditRecord {
                edit: EditDescriptor::pair(format!("fc-{i:05}"), r.e.clone(), "true"),
                in_scope,
                out_of_scope,
                task: Task::Fc,
                split: Split::Train,
                responses: None,
            }
        })
        .collect();
    Ok(records)
}

const ATTRIBUTES: &[&str] =
    &["cases", "deaths", "votes", "goals", "seats", "wins", "members", "titles", "branches", "patents"];

const EVIDENCE_TEMPLATES: &[&str] = &[
    "as of {f} {e} had {n} {a}",
    "{e} reported {n} {a} in {f}",
    "by {f} the number of {a} in {e} was {n}",
    "the {a} count of {e} reached {n} on {f}",
];

const CLAIM_TEMPLATES: &[&str] = &["{e} has {n} {a}", "{e} {a} is {n}", "there are {n} {a} in {e}"];
const NEGATED_TEMPLATES: &[&str] = &["{e} does not have {n} {a}", "{e} {a} is not {n}", "there are not {n} {a} in {e}"];

#[derive(Debug, Clone, PartialEq)]
pub struct FcConfig {
    pub n_pages: usize,
    pub n_attributes: usize,
    /// Quantities are drawn from `100..100 + number_pool`.
    pub number_pool: usize,
    /// Context tokens (dates, places) mixed into evidence sentences.
    pub fillers: usize,
    pub filler_pool: usize,
    /// Rows per label and revision.
    pub claims_per_label: usize,
    /// Train revisions are independent worlds and may revise the same
    /// attribute of a page more than once.
    pub n_train_revisions: usize,
    /// Held-out revisions revise distinct (page, attribute) pairs that no
    /// train revision touches.
    pub n_val_revisions: usize,
    pub n_test_revisions: usize,
    /// Easy out-of-scope claims kept per record.
    pub max_out_of_scope: usize,
}

impl Default for FcConfig {
    fn default() -> Self {
        FcConfig {
            n_pages: 80,
            n_attributes: 6,
            number_pool: 50,
            fillers: 2,
            filler_pool: 120,
            claims_per_label: 1,
            n_train_revisions: 1500,
            n_val_revisions: 0,
            n_test_revisions: 40,
            max_out_of_scope: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Claim {
    page: usize,
    attr: usize,
    value: u32,
    negated: bool,
}

/// Pre-edit attribute values of every page.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWorld {
    pages: Vec<String>,
    attributes: Vec<&'static str>,
    values: Vec<Vec<u32>>,
    page_ids: BTreeMap<String, usize>,
    number_pool: u32,
}

impl FcWorld {
    pub fn new<R: Rng + ?Sized>(config: &FcConfig, rng: &mut R) -> Result<Self> {
        if config.n_attributes == 0 || config.n_attributes > ATTRIBUTES.len() {
            return Err(Error::InvalidConfig(format!("n_attributes must be in 1..={}", ATTRIBUTES.len())));
        }
        if config.claims_per_label == 0 {
            return Err(Error::InvalidConfig(String::from("claims_per_label must be positive")));
        }
        if config.number_pool < 4 {
            return Err(Error::InvalidConfig(String::from("number_pool must be at least 4")));
        }
        let pages: Vec<String> = (0..config.n_pages).map(|i| format!("ent{i}")).collect();
        let pool = config.number_pool as u32;
        let values = (0..config.n_pages)
            .map(|_| (0..config.n_attributes).map(|_| 100 + rng.gen_range(0..pool)).collect())
            .collect();
        Ok(FcWorld {
            page_ids: pages.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect(),
            pages,
            attributes: ATTRIBUTES[..config.n_attributes].to_vec(),
            values,
            number_pool: pool,
        })
    }

    fn claim_text<R: Rng + ?Sized>(&self, c: Claim, rng: &mut R) -> String {
        let templates = if c.negated { NEGATED_TEMPLATES } else { CLAIM_TEMPLATES };
        let t = templates[rng.gen_range(0..templates.len())];
        render(t, &[("e", &self.pages[c.page]), ("a", self.attributes[c.attr]), ("n", &c.value.to_string())])
    }

    /// Page, attribute and quantity mentioned in a sentence, found by token scan.
    fn scan(&self, text: &str) -> Option<(usize, usize, u32, bool)> {
        let mut page = None;
        let mut attr = None;
        let mut value = None;
        let mut negated = false;
        for w in text.split_whitespace() {
            let w = w.to_lowercase();
            if let Some(&p) = self.page_ids.get(&w) {
                page = Some(p);
            } else if let Some(a) = self.attributes.iter().position(|a| *a == w) {
                attr = Some(a);
            } else if w == "not" {
                negated = true;
            } else if let Ok(n) = w.parse::<u32>() {
                if (100..100 + self.number_pool).contains(&n) {
                    value = Some(n);
                }
            }
        }
        Some((page?, attr?, value?, negated))
    }
}

impl World for FcWorld {
    fn answer(&self, input: &str, edit: Option<&EditDescriptor>) -> Option<String> {
        let (page, attr, value, negated) = self.scan(input)?;
        let mut current = self.values[page][attr];
        if let Some(e) = edit {
            let (ep, ea, ev, _) = self.scan(e.input()?)?;
            if (ep, ea) == (page, attr) {
                current = ev;
            }
        }
        Some(String::from(if (current == value) != negated { "true" } else { "false" }))
    }
}

fn filler_tokens<R: Rng + ?Sized>(config: &FcConfig, rng: &mut R) -> String {
    let words: Vec<String> =
        (0..config.fillers.max(1)).map(|_| format!("ctx{}", rng.gen_range(0..config.filler_pool.max(1)))).collect();
    words.join(" ")
}

/// Rows of one split, in the VitaminC layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FcRows {
    pub split: Split,
    pub rows: Vec<VitaminCRow>,
}

/// `claims_per_label` rows of each label (supporting, neutral,
/// contradicting) per attribute revision, every row with its own evidence
/// sentence. Returns one row set per non-empty split: test, val, train.
pub fn gen_fc_rows(seed: u64, config: &FcConfig) -> Result<(FcWorld, Vec<FcRows>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = FcWorld::new(config, &mut rng)?;
    let keys: Vec<(usize, usize)> =
        (0..config.n_pages).flat_map(|p| (0..config.n_attributes).map(move |a| (p, a))).collect();
    let held = config.n_val_revisions + config.n_test_revisions;
    if held >= keys.len() && config.n_train_revisions > 0 {
        return Err(Error::InsufficientPool { needed: held + 1, available: keys.len() });
    }
    let mut order = keys.clone();
    order.shuffle(&mut rng);
    let (held_keys, train_keys) = order.split_at(held);

    let mut out = Vec::new();
    let plan: [(Split, Vec<(usize, usize)>); 3] = [
        (Split::Test, held_keys[..config.n_test_revisions].to_vec()),
        (Split::Val, held_keys[config.n_test_revisions..].to_vec()),
        (
            Split::Train,
            (0..config.n_train_revisions).map(|_| *train_keys.choose(&mut rng).expect("non-empty")).collect(),
        ),
    ];
    for (split, revisions) in plan {
        if revisions.is_empty() {
            continue;
        }
        let mut rows = Vec::with_capacity(revisions.len() * 3 * config.claims_per_label);
        for (page, attr) in revisions {
            revision_rows(&world, config, page, attr, &mut rng, &mut rows);
        }
        out.push(FcRows { split, rows });
    }
    Ok((world, out))
}

fn revision_rows<R: Rng + ?Sized>(
    world: &FcWorld,
    config: &FcConfig,
    page: usize,
    attr: usize,
    rng: &mut R,
    rows: &mut Vec<VitaminCRow>,
) {
    let pool = world.number_pool;
    let old = world.values[page][attr];
    let new = loop {
        let v = 100 + rng.gen_range(0..pool);
        if v != old {
            break v;
        }
    };
    let new_text = new.to_string();
    for l in [1i8, 0, -1] {
        for _ in 0..config.claims_per_label {
            let claim = match l {
                1 => Claim { page, attr, value: new, negated: false },
                0 => Claim { page, attr, value: new, negated: true },
                _ => {
                    let value = loop {
                        let delta = rng.gen_range(1..=9u32);
                        let v = if rng.gen_bool(0.5) { new + delta } else { new.saturating_sub(delta) };
                        let v = 100 + (v.max(100) - 100) % pool;
                        if v != old && v != new {
                            break v;
                        }
                    };
                    Claim { page, attr, value, negated: rng.gen_bool(0.5) }
                }
            };
            let t = EVIDENCE_TEMPLATES[rng.gen_range(0..EVIDENCE_TEMPLATES.len())];
            let f = filler_tokens(config, rng);
            let e = render(t, &[("e", &world.pages[page]), ("a", world.attributes[attr]), ("n", &new_text), ("f", &f)]);
            let c = world.claim_text(claim, rng);
            rows.push(VitaminCRow { e, c, p: world.pages[page].clone(), l });
        }
    }
}

/// Generates rows, converts each split as its own corpus and subsamples the
/// easy out-of-scope claims. The base corpus holds every page's pre-edit
/// claims plus the held-out claims with their pre-edit labels.
pub fn gen_fc(seed: u64, config: &FcConfig) -> Result<Dataset> {
    let (world, sets) = gen_fc_rows(seed, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfc);
    let mut records = Vec::new();
    let mut pretrain = Vec::new();
    let mut seen = BTreeSet::new();
    for page in 0..config.n_pages {
        for attr in 0..config.n_attributes {
            let v = world.values[page][attr];
            for negated in [false, true] {
                let c = world.claim_text(Claim { page, attr, value: v, negated }, &mut rng);
                let a = world.answer(&c, None).expect("generated claim");
                if seen.insert(c.clone()) {
                    pretrain.push(Labeled::new(c, a));
                }
            }
        }
    }
    for set in &sets {
        let tag = match set.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let mut converted = convert_vitaminc(&set.rows)?;
        for (i, rec) in converted.iter_mut().enumerate() {
            rec.split = set.split;
            rec.edit.id = format!("fc-{tag}-{i:05}");
            if rec.out_of_scope.len() > config.max_out_of_scope && !rec.in_scope.is_empty() {
                let mut keep: Vec<usize> = (0..rec.out_of_scope.len()).collect();
                keep.shuffle(&mut rng);
                keep.truncate(config.max_out_of_scope);
                keep.sort_unstable();
                rec.out_of_scope = keep.into_iter().map(|i| rec.out_of_scope[i].clone()).collect();
            }
        }
        records.extend(converted);
        if set.split != Split::Train {
            for row in &set.rows {
                if seen.insert(row.c.clone()) {
                    let a = world.answer(&row.c, None).expect("generated claim");
                    pretrain.push(Labeled::new(row.c.clone(), a));
                }
            }
        }
    }
    Ok(Dataset { records, pretrain })
}

impl FcWorld {
    /// Rebuilds the world `gen_fc_rows` used for `seed`.
    pub fn for_seed(seed: u64, config: &FcConfig) -> Result<Self> {
        Ok(gen_fc_rows(seed, config)?.0)
    }
}
