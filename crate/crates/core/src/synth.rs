//! Synthetic distantly supervised corpora built from a toy knowledge base.
//!
//! Every positive pair is realised by one of three patterns:
//!
//! * intra: `H activates T ADV .` in a single sentence;
//! * inter: `H reacts ADV .` directly followed by a sentence rooted at `T`;
//! * coreference-only: `H` in a neutral sentence and, at least one sentence
//!   later, `ALIAS 's T binds .` where `ALIAS` is an ungrounded coreferent
//!   of `H`.
//!
//! Distractor entities fill neutral sentences, sometimes in pairs and
//! sometimes with their own alias chains, so negatives look like positives
//! except for the trigger words. Without the coreference link a
//! coreference-only head is indistinguishable from a distractor.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DepArc, Document, GoldRelation, Mention, Span};
use crate::error::{Error, Result};
use crate::trainer::derived_rng;

pub const RELATION: &str = "interacts";
pub const ENTITY_TYPE: &str = "chemical";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbEntity {
    pub kb_id: String,
    pub name: String,
    pub aliases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyKb {
    pub entities: Vec<KbEntity>,
    /// `(head, tail, relation)` with entity indices.
    pub triples: BTreeSet<(usize, usize, String)>,
}

impl ToyKb {
    pub fn related(&self, a: usize, b: usize) -> bool {
        self.triples.range((a, b, String::new())..).next().is_some_and(|t| t.0 == a && t.1 == b)
    }

    fn related_either(&self, a: usize, b: usize) -> bool {
        self.related(a, b) || self.related(b, a)
    }
}

/// Random KB with `n_triples` distinct non-self ordered pairs.
pub fn gen_kb(n_entities: usize, n_triples: usize, seed: u64) -> Result<ToyKb> {
    let capacity = n_entities.saturating_mul(n_entities.saturating_sub(1));
    if n_triples > capacity {
        return Err(Error::config(
            "triples",
            format!("{n_triples} triples do not fit among {n_entities} entities (at most {capacity})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = (0..n_entities)
        .map(|i| KbEntity {
            kb_id: format!("KB:{i:05}"),
            name: format!("chem{i}"),
            aliases: vec![format!("alias{i}")],
        })
        .collect();
    let triples = index::sample(&mut rng, capacity, n_triples)
        .into_iter()
        .map(|k| {
            let head = k / (n_entities - 1);
            let mut tail = k % (n_entities - 1);
            if tail >= head {
                tail += 1;
            }
            (head, tail, RELATION.to_string())
        })
        .collect();
    Ok(ToyKb { entities, triples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Intra,
    Inter,
    CorefOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub n_docs: usize,
    pub pct_inter: f64,
    /// Fraction of inter-sentence positives that need the alias link.
    pub pct_coref_only: f64,
    pub positives_per_doc: usize,
    pub distractors_per_doc: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_docs: 50,
            pct_inter: 0.5,
            pct_coref_only: 0.5,
            positives_per_doc: 2,
            distractors_per_doc: 3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub doc_id: String,
    pub head: String,
    pub tail: String,
    pub kind: PlantKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted: Vec<PlantedPair>,
    pub counts: BTreeMap<PlantKind, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub docs: Vec<Document>,
    pub truth: GroundTruth,
}

impl SynthCorpus {
    pub fn to_jsonl(&self) -> String {
        self.docs.iter().map(|d| crate::corpus::to_json_line(d) + "\n").collect()
    }
}

const ADVERBS: &[&str] = &["strongly", "rapidly", "directly", "weakly", "in_vivo"];
const NEUTRAL: &[&str] = &["was", "appeared", "remained", "was_measured"];
const INTRA: &[&str] = &["activates", "inhibits", "induces"];
const INTER: &[&str] = &["reacts", "converts"];
const CROSS_TAIL: &[&str] = &["forms", "results", "emerges"];
const CORE: &[&str] = &["binds", "blocks"];
const NOUNS: &[&str] = &["samples", "levels", "cells", "doses"];
const DETS: &[&str] = &["the", "all", "some"];

/// Sentence under construction with local indices.
#[derive(Default)]
struct Sent {
    tokens: Vec<String>,
    arcs: Vec<(usize, usize, &'static str)>,
    root: usize,
    mentions: Vec<(usize, usize)>,
    alias: Option<(usize, usize)>,
}

impl Sent {
    fn new(tokens: Vec<String>, root: usize, arcs: Vec<(usize, usize, &'static str)>) -> Self {
        Sent {
            tokens,
            arcs,
            root,
            ..Default::default()
        }
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, words: &[&str]) -> String {
    words.choose(rng).expect("non-empty").to_string()
}

/// Appends one or two adverbs and a full stop, all attached to the root.
fn finish<R: Rng + ?Sized>(rng: &mut R, s: &mut Sent) {
    for _ in 0..rng.random_range(1..=2) {
        s.arcs.push((s.root, s.tokens.len(), "advmod"));
        s.tokens.push(pick(rng, ADVERBS));
    }
    s.arcs.push((s.root, s.tokens.len(), "punct"));
    s.tokens.push(".".into());
}

/// `E VERB ADV+ .`
fn neutral_single<R: Rng + ?Sized>(rng: &mut R, name: &str, ent: usize) -> Sent {
    let mut s = Sent::new(vec![name.into(), pick(rng, NEUTRAL)], 1, vec![(1, 0, "nsubj")]);
    finish(rng, &mut s);
    s.mentions.push((0, ent));
    s
}

/// `E1 VERB E2 .`
fn neutral_pair<R: Rng + ?Sized>(rng: &mut R, a: (&str, usize), b: (&str, usize)) -> Sent {
    let mut s = Sent::new(
        vec![a.0.into(), pick(rng, NEUTRAL), b.0.into(), ".".into()],
        1,
        vec![(1, 0, "nsubj"), (1, 2, "dobj"), (1, 3, "punct")],
    );
    s.mentions.push((0, a.1));
    s.mentions.push((2, b.1));
    s
}

/// `DET NOUN VERB ADV+ .`
fn filler<R: Rng + ?Sized>(rng: &mut R) -> Sent {
    let mut s = Sent::new(
        vec![pick(rng, DETS), pick(rng, NOUNS), pick(rng, NEUTRAL)],
        2,
        vec![(1, 0, "det"), (2, 1, "nsubj")],
    );
    finish(rng, &mut s);
    s
}

/// `ALIAS 's X VERB .` with `X` an entity name or a plain noun.
fn possessive(alias: &str, x: &str, verb: String, owner: usize) -> Sent {
    let mut s = Sent::new(
        vec![alias.into(), "'s".into(), x.into(), verb, ".".into()],
        3,
        vec![(3, 2, "nsubj"), (2, 0, "nmod"), (0, 1, "case"), (3, 4, "punct")],
    );
    s.alias = Some((0, owner));
    s
}

/// Consecutive sentences placed as one piece, optionally one end of an
/// alias link: `(link, true)` for the antecedent, `(link, false)` for the
/// sentence holding the alias.
struct Unit {
    sents: Vec<Sent>,
    link: Option<(usize, bool)>,
}

impl Unit {
    fn block(sents: Vec<Sent>) -> Self {
        Unit { sents, link: None }
    }

    fn linked(s: Sent, link: usize, antecedent: bool) -> Self {
        Unit {
            sents: vec![s],
            link: Some((link, antecedent)),
        }
    }
}

fn plant<R: Rng + ?Sized>(rng: &mut R, kb: &ToyKb, kind: PlantKind, h: usize, t: usize, link: usize) -> Vec<Unit> {
    let (hn, tn) = (kb.entities[h].name.as_str(), kb.entities[t].name.as_str());
    match kind {
        PlantKind::Intra => {
            let mut s = Sent::new(
                vec![hn.into(), pick(rng, INTRA), tn.into()],
                1,
                vec![(1, 0, "nsubj"), (1, 2, "dobj")],
            );
            finish(rng, &mut s);
            s.mentions = vec![(0, h), (2, t)];
            vec![Unit::block(vec![s])]
        }
        PlantKind::Inter => {
            let mut a = Sent::new(vec![hn.into(), pick(rng, INTER)], 1, vec![(1, 0, "nsubj")]);
            finish(rng, &mut a);
            a.mentions.push((0, h));
            let mut b = Sent::new(vec![tn.into(), pick(rng, CROSS_TAIL)], 0, vec![(0, 1, "acl")]);
            finish(rng, &mut b);
            b.mentions.push((0, t));
            vec![Unit::block(vec![a, b])]
        }
        PlantKind::CorefOnly => {
            let a = neutral_single(rng, hn, h);
            let mut c = possessive(&kb.entities[h].aliases[0], tn, pick(rng, CORE), h);
            c.mentions.push((2, t));
            vec![Unit::linked(a, link, true), Unit::linked(c, link, false)]
        }
    }
}

/// Distractor units for the given entities; alias links are numbered from
/// `next_link`.
fn distract<R: Rng + ?Sized>(rng: &mut R, kb: &ToyKb, ents: &[usize], mut next_link: usize) -> Vec<Unit> {
    let mut units = Vec::new();
    let mut i = 0;
    while i < ents.len() {
        let e = ents[i];
        let name = kb.entities[e].name.as_str();
        let roll: f64 = rng.random();
        if roll < 0.3 && i + 1 < ents.len() {
            let f = ents[i + 1];
            units.push(Unit::block(vec![neutral_pair(rng, (name, e), (kb.entities[f].name.as_str(), f))]));
            i += 2;
            continue;
        }
        units.push(Unit::linked(neutral_single(rng, name, e), next_link, true));
        if roll < 0.6 {
            // alias chain ending at a noun or at the next distractor
            let alias = kb.entities[e].aliases[0].as_str();
            let last = if i + 1 < ents.len() {
                let f = ents[i + 1];
                let mut s = possessive(alias, &kb.entities[f].name, pick(rng, NEUTRAL), e);
                s.mentions.push((2, f));
                i += 1;
                s
            } else {
                possessive(alias, &pick(rng, NOUNS), pick(rng, NEUTRAL), e)
            };
            units.push(Unit::linked(last, next_link, false));
            next_link += 1;
        } else {
            units.last_mut().expect("just pushed").link = None;
        }
        i += 1;
    }
    units
}

/// Shuffles units, then puts every antecedent before its alias with at
/// least one sentence in between.
fn arrange<R: Rng + ?Sized>(rng: &mut R, mut units: Vec<Unit>) -> Vec<Vec<Sent>> {
    units.shuffle(rng);
    let mut ends: BTreeMap<usize, [usize; 2]> = BTreeMap::new();
    for (i, u) in units.iter().enumerate() {
        if let Some((l, ante)) = u.link {
            ends.entry(l).or_default()[usize::from(!ante)] = i;
        }
    }
    for [a, b] in ends.values() {
        if a > b {
            units.swap(*a, *b);
        }
    }
    let mut out: Vec<Vec<Sent>> = Vec::with_capacity(units.len() + ends.len());
    let mut prev_antecedent = None;
    for u in units {
        if let (Some((l, false)), Some(p)) = (u.link, prev_antecedent) {
            if l == p {
                out.push(vec![filler(rng)]);
            }
        }
        prev_antecedent = match u.link {
            Some((l, true)) => Some(l),
            _ => None,
        };
        out.push(u.sents);
    }
    out
}

fn assemble(doc_id: String, kb: &ToyKb, blocks: Vec<Vec<Sent>>, gold: &[(usize, usize)]) -> Result<Document> {
    let mut doc = Document {
        doc_id,
        tokens: Vec::new(),
        sentences: Vec::new(),
        dep_arcs: Vec::new(),
        sentence_roots: Vec::new(),
        coref_chains: Vec::new(),
        mentions: Vec::new(),
        gold_relations: Vec::new(),
    };
    let mut first_mention: BTreeMap<usize, Span> = BTreeMap::new();
    let mut aliases: Vec<(usize, Span)> = Vec::new();
    for s in blocks.into_iter().flatten() {
        let off = doc.tokens.len();
        doc.sentences.push(Span(off, off + s.tokens.len()));
        doc.sentence_roots.push(off + s.root);
        doc.dep_arcs.extend(s.arcs.iter().map(|&(h, d, l)| DepArc {
            head: off + h,
            dependent: off + d,
            label: l.to_string(),
        }));
        for &(i, e) in &s.mentions {
            let span = Span(off + i, off + i + 1);
            first_mention.entry(e).or_insert(span);
            let kb_id = kb.entities[e].kb_id.clone();
            doc.mentions.push(Mention {
                span,
                entity_id: kb_id.clone(),
                kb_ids: BTreeSet::from([kb_id]),
                entity_type: ENTITY_TYPE.to_string(),
            });
        }
        if let Some((i, e)) = s.alias {
            aliases.push((e, Span(off + i, off + i + 1)));
        }
        doc.tokens.extend(s.tokens);
    }
    for (e, span) in aliases {
        let antecedent = first_mention[&e];
        doc.coref_chains.push(vec![antecedent, span]);
    }
    doc.gold_relations = gold
        .iter()
        .map(|&(h, t)| GoldRelation {
            head: kb.entities[h].kb_id.clone(),
            tail: kb.entities[t].kb_id.clone(),
            label: RELATION.to_string(),
        })
        .collect();
    doc.validate()?;
    Ok(doc)
}

/// Exact number of planted pairs of each kind for `total` positives.
pub fn planned_counts(total: usize, pct_inter: f64, pct_coref_only: f64) -> BTreeMap<PlantKind, usize> {
    let inter = (total as f64 * pct_inter).round() as usize;
    let coref = (inter as f64 * pct_coref_only).round() as usize;
    BTreeMap::from([
        (PlantKind::Intra, total - inter),
        (PlantKind::Inter, inter - coref),
        (PlantKind::CorefOnly, coref),
    ])
}

/// Generates `opts.n_docs` documents whose gold labels are exactly the KB
/// triples among the entities each document mentions.
pub fn gen_corpus(kb: &ToyKb, opts: &SynthOptions) -> Result<SynthCorpus> {
    for (field, p) in [("pct_inter", opts.pct_inter), ("pct_coref_only", opts.pct_coref_only)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(field, format!("{p} is outside [0, 1]")));
        }
    }
    let total = opts.n_docs * opts.positives_per_doc;
    let counts = planned_counts(total, opts.pct_inter, opts.pct_coref_only);
    if total > 0 && kb.triples.is_empty() {
        return Err(Error::config("triples", "the knowledge base has no triples to plant"));
    }
    let mut kinds: Vec<PlantKind> = counts.iter().flat_map(|(&k, &n)| std::iter::repeat_n(k, n)).collect();
    kinds.shuffle(&mut derived_rng(opts.seed, u64::MAX, 0));

    let triples: Vec<(usize, usize)> = kb
        .triples
        .iter()
        .filter(|(h, t, _)| !kb.related(*t, *h))
        .map(|(h, t, _)| (*h, *t))
        .collect();
    if total > 0 && triples.is_empty() {
        return Err(Error::config("triples", "every triple has its reverse in the knowledge base"));
    }

    let mut docs = Vec::with_capacity(opts.n_docs);
    let mut planted = Vec::new();
    for d in 0..opts.n_docs {
        let mut rng = derived_rng(opts.seed, d as u64, 1);
        let doc_id = format!("synth-{d:05}");
        let mut used: Vec<usize> = Vec::new();
        let compatible = |used: &[usize], e: usize| used.iter().all(|&u| u != e && !kb.related_either(u, e));
        let mut units = Vec::new();
        let mut gold = Vec::new();
        for &kind in &kinds[d * opts.positives_per_doc..(d + 1) * opts.positives_per_doc] {
            let (h, t) = (0..1000)
                .map(|_| *triples.choose(&mut rng).expect("non-empty"))
                .find(|&(h, t)| compatible(&used, h) && compatible(&used, t))
                .ok_or_else(|| Error::config("entities", "knowledge base too dense to plant disjoint pairs"))?;
            used.extend([h, t]);
            gold.push((h, t));
            planted.push(PlantedPair {
                doc_id: doc_id.clone(),
                head: kb.entities[h].kb_id.clone(),
                tail: kb.entities[t].kb_id.clone(),
                kind,
            });
            units.extend(plant(&mut rng, kb, kind, h, t, gold.len()));
        }
        let mut distractors = Vec::new();
        for _ in 0..opts.distractors_per_doc {
            let e = (0..1000)
                .map(|_| rng.random_range(0..kb.entities.len()))
                .find(|&e| compatible(&used, e))
                .ok_or_else(|| Error::config("entities", "knowledge base too small for distractors"))?;
            used.push(e);
            distractors.push(e);
        }
        units.extend(distract(&mut rng, kb, &distractors, gold.len() + 1));
        for _ in 0..rng.random_range(0..=2) {
            units.push(Unit::block(vec![filler(&mut rng)]));
        }
        let blocks = arrange(&mut rng, units);
        docs.push(assemble(doc_id, kb, blocks, &gold)?);
    }
    Ok(SynthCorpus {
        docs,
        truth: GroundTruth { planted, counts },
    })
}
