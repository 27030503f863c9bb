//! Documents, entity mentions, and relation candidates.
//!
//! Corpora arrive pre-parsed as JSONL (one document per line). Ingest drops
//! mentions without a KB grounding, merges mentions that share a KB ID into
//! one entity, and removes relations whose endpoints collapse to the same
//! entity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open token range `[start, end)`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(self) -> usize {
        self.0
    }

    pub fn end(self) -> usize {
        self.1
    }

    pub fn len(self) -> usize {
        self.1.saturating_sub(self.0)
    }

    pub fn is_empty(self) -> bool {
        self.1 <= self.0
    }

    pub fn contains(self, tok: usize) -> bool {
        self.0 <= tok && tok < self.1
    }

    pub fn tokens(self) -> std::ops::Range<usize> {
        self.0..self.1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepArc {
    pub head: usize,
    pub dependent: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub span: Span,
    pub entity_id: String,
    pub kb_ids: BTreeSet<String>,
    pub entity_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldRelation {
    pub head: String,
    pub tail: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub sentences: Vec<Span>,
    pub dep_arcs: Vec<DepArc>,
    /// One root token per sentence, or empty when the source had none.
    pub sentence_roots: Vec<usize>,
    pub coref_chains: Vec<Vec<Span>>,
    pub mentions: Vec<Mention>,
    pub gold_relations: Vec<GoldRelation>,
}

/// All mentions of one entity after merging.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub entity_type: String,
    pub spans: Vec<Span>,
}

impl Entity {
    /// Sorted, deduplicated token indices covered by any mention.
    pub fn token_set(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.spans.iter().flat_map(|s| s.tokens()).collect();
        set.into_iter().collect()
    }
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sentence index containing `tok`.
    pub fn sentence_of(&self, tok: usize) -> Option<usize> {
        let idx = self.sentences.partition_point(|s| s.end() <= tok);
        (idx < self.sentences.len() && self.sentences[idx].contains(tok)).then_some(idx)
    }

    /// Entities in ascending id order.
    pub fn entities(&self) -> Vec<Entity> {
        let mut by_id: BTreeMap<&str, Entity> = BTreeMap::new();
        for m in &self.mentions {
            by_id
                .entry(m.entity_id.as_str())
                .or_insert_with(|| Entity {
                    id: m.entity_id.clone(),
                    entity_type: m.entity_type.clone(),
                    spans: Vec::new(),
                })
                .spans
                .push(m.span);
        }
        by_id.into_values().collect()
    }

    /// Checks every structural invariant of a document.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Ingest {
            doc_id: self.doc_id.clone(),
            msg,
        };
        let n = self.tokens.len();
        let mut cursor = 0;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.start() != cursor || s.is_empty() {
                return Err(err(format!(
                    "sentence {i} {s:?} does not continue the partition at token {cursor}"
                )));
            }
            cursor = s.end();
        }
        if cursor != n {
            return Err(err(format!("sentences cover [0,{cursor}) but document has {n} tokens")));
        }
        for arc in &self.dep_arcs {
            let (h, d) = (arc.head, arc.dependent);
            if h >= n || d >= n {
                return Err(err(format!("dependency arc ({h}, {d}) out of bounds")));
            }
            if self.sentence_of(h) != self.sentence_of(d) {
                return Err(err(format!(
                    "dependency arc ({h}, {d}, {}) crosses a sentence boundary",
                    arc.label
                )));
            }
        }
        if !self.sentence_roots.is_empty() {
            if self.sentence_roots.len() != self.sentences.len() {
                return Err(err(format!(
                    "{} roots for {} sentences",
                    self.sentence_roots.len(),
                    self.sentences.len()
                )));
            }
            for (i, (&r, s)) in self.sentence_roots.iter().zip(&self.sentences).enumerate() {
                if !s.contains(r) {
                    return Err(err(format!("root {r} of sentence {i} lies outside {s:?}")));
                }
            }
        }
        for chain in &self.coref_chains {
            for s in chain {
                if s.is_empty() || s.end() > n {
                    return Err(err(format!("coreference span {s:?} invalid")));
                }
            }
        }
        let mut ids = BTreeSet::new();
        for m in &self.mentions {
            if m.span.is_empty() || m.span.end() > n {
                return Err(err(format!("mention span {:?} invalid", m.span)));
            }
            if m.kb_ids.is_empty() {
                return Err(err(format!("mention {:?} is not grounded", m.span)));
            }
            ids.insert(m.entity_id.as_str());
        }
        for r in &self.gold_relations {
            if !ids.contains(r.head.as_str()) || !ids.contains(r.tail.as_str()) {
                return Err(err(format!(
                    "relation ({}, {}) references an unknown entity",
                    r.head, r.tail
                )));
            }
            if r.head == r.tail {
                return Err(err(format!("self-relation on entity {}", r.head)));
            }
        }
        Ok(())
    }
}

/// Groups mentions by the transitive closure of shared KB IDs and renames
/// each group after its lexicographically smallest KB ID. Gold relations are
/// remapped onto the merged entities; self-relations are removed.
///
/// Returns the merged document and the number of removed self-relations.
pub fn merge_entities(doc: &Document) -> (Document, usize) {
    // union-find over KB ids
    let kb_list: Vec<&str> = doc
        .mentions
        .iter()
        .flat_map(|m| m.kb_ids.iter().map(String::as_str))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = kb_list.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut parent: Vec<usize> = (0..kb_list.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for m in &doc.mentions {
        let mut it = m.kb_ids.iter().map(|k| index[k.as_str()]);
        if let Some(first) = it.next() {
            for other in it {
                let (a, b) = (find(&mut parent, first), find(&mut parent, other));
                // the smaller index is the lexicographically smaller KB id
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                parent[hi] = lo;
            }
        }
    }
    let canonical = |parent: &mut Vec<usize>, kb: &str| -> String {
        let root = find(parent, index[kb]);
        kb_list[root].to_string()
    };

    let mut out = doc.clone();
    for m in &mut out.mentions {
        if let Some(first) = m.kb_ids.iter().next() {
            m.entity_id = canonical(&mut parent, first);
        }
    }
    let mut removed = 0;
    let mut relations = Vec::with_capacity(doc.gold_relations.len());
    for r in &doc.gold_relations {
        let head = index
            .get(r.head.as_str())
            .map(|_| canonical(&mut parent, &r.head))
            .unwrap_or_else(|| r.head.clone());
        let tail = index
            .get(r.tail.as_str())
            .map(|_| canonical(&mut parent, &r.tail))
            .unwrap_or_else(|| r.tail.clone());
        if head == tail {
            removed += 1;
            continue;
        }
        relations.push(GoldRelation {
            head,
            tail,
            label: r.label.clone(),
        });
    }
    out.gold_relations = relations;
    (out, removed)
}

// ---------------------------------------------------------------------------
// JSONL

#[derive(Debug, Serialize, Deserialize)]
struct RawMention {
    span: Span,
    kb_ids: Vec<String>,
    #[serde(rename = "type")]
    entity_type: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRelation {
    head_kb: String,
    tail_kb: String,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    doc_id: String,
    tokens: Vec<String>,
    sentences: Vec<Span>,
    #[serde(default)]
    roots: Vec<usize>,
    #[serde(default)]
    deps: Vec<(usize, usize, String)>,
    #[serde(default)]
    coref: Vec<Vec<Span>>,
    #[serde(default)]
    mentions: Vec<RawMention>,
    #[serde(default)]
    relations: Vec<RawRelation>,
}

/// Per-document ingest counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub documents: usize,
    /// `(doc_id, dropped ungrounded mentions)` for documents that dropped any.
    pub dropped_mentions: Vec<(String, usize)>,
    pub removed_self_relations: Vec<(String, usize)>,
}

impl IngestReport {
    pub fn total_dropped(&self) -> usize {
        self.dropped_mentions.iter().map(|(_, n)| n).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.dropped_mentions.is_empty() && self.removed_self_relations.is_empty()
    }
}

/// Parses, validates and merges one JSONL record.
pub fn parse_document(line: &str, line_no: usize, report: &mut IngestReport) -> Result<Document> {
    let de = &mut serde_json::Deserializer::from_str(line);
    let raw: RawDocument = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        line: line_no,
        field: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;

    let mut dropped = 0;
    let mut mentions = Vec::with_capacity(raw.mentions.len());
    for m in raw.mentions {
        let kb_ids: BTreeSet<String> = m.kb_ids.into_iter().filter(|k| !k.is_empty()).collect();
        let Some(first) = kb_ids.iter().next().cloned() else {
            dropped += 1;
            continue;
        };
        mentions.push(Mention {
            span: m.span,
            entity_id: first,
            kb_ids,
            entity_type: m.entity_type,
        });
    }
    let doc = Document {
        doc_id: raw.doc_id,
        tokens: raw.tokens,
        sentences: raw.sentences,
        dep_arcs: raw
            .deps
            .into_iter()
            .map(|(head, dependent, label)| DepArc {
                head,
                dependent,
                label,
            })
            .collect(),
        sentence_roots: raw.roots,
        coref_chains: raw.coref,
        mentions,
        gold_relations: raw
            .relations
            .into_iter()
            .map(|r| GoldRelation {
                head: r.head_kb,
                tail: r.tail_kb,
                label: r.label,
            })
            .collect(),
    };
    let known: BTreeSet<&str> = doc
        .mentions
        .iter()
        .flat_map(|m| m.kb_ids.iter().map(String::as_str))
        .collect();
    for r in &doc.gold_relations {
        for kb in [&r.head, &r.tail] {
            if !known.contains(kb.as_str()) {
                return Err(Error::Ingest {
                    doc_id: doc.doc_id.clone(),
                    msg: format!("relation endpoint `{kb}` matches no grounded mention"),
                });
            }
        }
    }
    let (doc, removed) = merge_entities(&doc);
    doc.validate()?;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} ungrounded mention(s)", doc.doc_id);
        report.dropped_mentions.push((doc.doc_id.clone(), dropped));
    }
    if removed > 0 {
        report.removed_self_relations.push((doc.doc_id.clone(), removed));
    }
    report.documents += 1;
    Ok(doc)
}

/// Reads a JSONL corpus, one document per non-blank line.
pub fn ingest_jsonl(path: &Path) -> Result<(Vec<Document>, IngestReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport::default();
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_document(&line, i + 1, &mut report)?);
    }
    Ok((docs, report))
}

pub fn parse_jsonl(text: &str) -> Result<(Vec<Document>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_document(line, i + 1, &mut report)?);
    }
    Ok((docs, report))
}

/// One-line JSON record for a document.
pub fn to_json_line(doc: &Document) -> String {
    let raw = RawDocument {
        doc_id: doc.doc_id.clone(),
        tokens: doc.tokens.clone(),
        sentences: doc.sentences.clone(),
        roots: doc.sentence_roots.clone(),
        deps: doc
            .dep_arcs
            .iter()
            .map(|a| (a.head, a.dependent, a.label.clone()))
            .collect(),
        coref: doc.coref_chains.clone(),
        mentions: doc
            .mentions
            .iter()
            .map(|m| RawMention {
                span: m.span,
                kb_ids: m.kb_ids.iter().cloned().collect(),
                entity_type: m.entity_type.clone(),
            })
            .collect(),
        relations: doc
            .gold_relations
            .iter()
            .map(|r| RawRelation {
                head_kb: r.head.clone(),
                tail_kb: r.tail.clone(),
                label: r.label.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&raw).expect("document serializes")
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for d in docs {
        writeln!(f, "{}", to_json_line(d)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Relation vocabulary and candidate pairs

pub const NO_RELATION: &str = "no_relation";

/// Relation categories; index 0 is always "no relation".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    labels: Vec<String>,
}

impl RelationVocab {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut all = vec![NO_RELATION.to_string()];
        for l in labels {
            let l = l.as_ref();
            if l != NO_RELATION && !all.iter().any(|x| x == l) {
                all.push(l.to_string());
            }
        }
        RelationVocab { labels: all }
    }

    /// Sorted distinct gold labels of a corpus.
    pub fn from_documents(docs: &[Document]) -> Self {
        let set: BTreeSet<&str> = docs
            .iter()
            .flat_map(|d| d.gold_relations.iter().map(|r| r.label.as_str()))
            .collect();
        Self::new(&set.into_iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairTask {
    /// Unordered pairs; a relation in either direction labels the pair.
    Undirected,
    /// Both orders of every pair.
    Bidirectional,
}

impl std::str::FromStr for PairTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "undirected" => Ok(PairTask::Undirected),
            "bidirectional" => Ok(PairTask::Bidirectional),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

/// Candidate filter applied after pair enumeration.
pub trait PairFilter: Sync {
    fn keep(&self, doc: &Document, head: &Entity, tail: &Entity) -> bool;
}

/// Keeps every candidate.
#[derive(Clone, Copy, Debug, Default)]
pub struct KeepAll;

impl PairFilter for KeepAll {
    fn keep(&self, _: &Document, _: &Entity, _: &Entity) -> bool {
        true
    }
}

/// Keeps only pairs whose head and tail entity types match.
#[derive(Clone, Debug)]
pub struct TypeConstraint {
    pub head_type: String,
    pub tail_type: String,
}

impl PairFilter for TypeConstraint {
    fn keep(&self, _: &Document, head: &Entity, tail: &Entity) -> bool {
        head.entity_type == self.head_type && tail.entity_type == self.tail_type
    }
}

/// One entity-pair classification instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairInstance {
    pub doc_id: String,
    pub head_entity_id: String,
    pub tail_entity_id: String,
    pub label: usize,
    pub head_spans: Vec<Span>,
    pub tail_spans: Vec<Span>,
    pub head_tokens: Vec<usize>,
    pub tail_tokens: Vec<usize>,
}

/// Enumerates entity pairs of a merged document.
///
/// Fails with a label error when a gold relation uses a label absent from
/// `relations`.
pub fn generate_pairs(
    doc: &Document,
    task: PairTask,
    relations: &RelationVocab,
    filter: &dyn PairFilter,
) -> Result<Vec<PairInstance>> {
    let entities = doc.entities();
    let mut gold: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in &doc.gold_relations {
        let idx = relations.index(&r.label).ok_or_else(|| {
            Error::Label(format!("`{}` in document {} is not in the relation vocabulary", r.label, doc.doc_id))
        })?;
        gold.entry((r.head.as_str(), r.tail.as_str())).or_insert(idx);
    }
    let mut out = Vec::new();
    for (i, h) in entities.iter().enumerate() {
        for (j, t) in entities.iter().enumerate() {
            let label = match task {
                PairTask::Bidirectional if i != j => gold.get(&(h.id.as_str(), t.id.as_str())).copied(),
                PairTask::Undirected if i < j => gold
                    .get(&(h.id.as_str(), t.id.as_str()))
                    .or_else(|| gold.get(&(t.id.as_str(), h.id.as_str())))
                    .copied(),
                _ => continue,
            };
            if !filter.keep(doc, h, t) {
                continue;
            }
            out.push(PairInstance {
                doc_id: doc.doc_id.clone(),
                head_entity_id: h.id.clone(),
                tail_entity_id: t.id.clone(),
                label: label.unwrap_or(0),
                head_spans: h.spans.clone(),
                tail_spans: t.spans.clone(),
                head_tokens: h.token_set(),
                tail_tokens: t.token_set(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture_line() -> &'static str {
        r#"{"doc_id":"d1","tokens":["A","B","C","D","E","F"],"sentences":[[0,3],[3,6]],"roots":[1,4],"deps":[[1,0,"nsubj"],[1,2,"dobj"],[4,3,"nsubj"],[4,5,"dobj"]],"coref":[[[0,1],[3,4]]],"mentions":[{"span":[0,1],"kb_ids":["K1"],"type":"chem"},{"span":[2,3],"kb_ids":["K2"],"type":"chem"},{"span":[5,6],"kb_ids":["K3","K1"],"type":"chem"},{"span":[4,5],"kb_ids":[],"type":"chem"}],"relations":[{"head_kb":"K1","tail_kb":"K2","label":"reacts"}]}"#
    }

    #[test]
    fn ingest_well_formed_record() {
        let mut rep = IngestReport::default();
        let doc = parse_document(fixture_line(), 1, &mut rep).unwrap();
        assert_eq!(doc.len(), 6);
        assert_eq!(doc.sentences.len(), 2);
        // the kb_ids=[] mention is dropped and counted
        assert_eq!(doc.mentions.len(), 3);
        assert_eq!(rep.dropped_mentions, vec![("d1".to_string(), 1)]);
        // K3 shares K1 with the first mention
        assert_eq!(doc.mentions[2].entity_id, "K1");
        assert_eq!(doc.entities().len(), 2);
    }

    #[test]
    fn crossing_arc_names_document() {
        let line = fixture_line().replace("[4,5,\"dobj\"]", "[2,5,\"dobj\"]");
        let mut rep = IngestReport::default();
        match parse_document(&line, 1, &mut rep) {
            Err(Error::Ingest { doc_id, msg }) => {
                assert_eq!(doc_id, "d1");
                assert!(msg.contains("crosses"), "{msg}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn schema_violation_reports_line_and_field() {
        let line = fixture_line().replace("\"tokens\":[\"A\"", "\"tokens\":[7");
        let mut rep = IngestReport::default();
        match parse_document(&line, 4, &mut rep) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 4);
                assert!(field.starts_with("tokens"), "{field}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn self_relation_removed_after_merge() {
        let line = fixture_line().replace(
            r#"{"head_kb":"K1","tail_kb":"K2","label":"reacts"}"#,
            r#"{"head_kb":"K1","tail_kb":"K3","label":"reacts"}"#,
        );
        let mut rep = IngestReport::default();
        let doc = parse_document(&line, 1, &mut rep).unwrap();
        assert!(doc.gold_relations.is_empty());
        assert_eq!(rep.removed_self_relations, vec![("d1".to_string(), 1)]);
    }

    fn mention(kbs: &[&str], start: usize) -> Mention {
        let kb_ids: BTreeSet<String> = kbs.iter().map(|s| s.to_string()).collect();
        Mention {
            span: Span(start, start + 1),
            entity_id: kb_ids.iter().next().unwrap().clone(),
            kb_ids,
            entity_type: "chem".into(),
        }
    }

    fn doc_with(mentions: Vec<Mention>) -> Document {
        let n = mentions.len().max(1) * 2;
        Document {
            doc_id: "m".into(),
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            sentences: vec![Span(0, n)],
            dep_arcs: vec![],
            sentence_roots: vec![0],
            coref_chains: vec![],
            mentions,
            gold_relations: vec![],
        }
    }

    #[test]
    fn merge_transitive_and_disjoint() {
        let d = doc_with(vec![mention(&["A"], 0), mention(&["A", "B"], 1), mention(&["B"], 2)]);
        let (m, _) = merge_entities(&d);
        assert_eq!(m.entities().len(), 1);
        assert!(m.mentions.iter().all(|x| x.entity_id == "A"));

        let d = doc_with(vec![mention(&["A"], 0), mention(&["B"], 1)]);
        assert_eq!(merge_entities(&d).0.entities().len(), 2);

        assert!(merge_entities(&doc_with(vec![])).0.entities().is_empty());
    }

    #[test]
    fn pair_counts() {
        let d = doc_with(vec![mention(&["A"], 0), mention(&["B"], 1), mention(&["C"], 2)]);
        let rv = RelationVocab::new(&["r"]);
        assert_eq!(generate_pairs(&d, PairTask::Bidirectional, &rv, &KeepAll).unwrap().len(), 6);
        assert_eq!(generate_pairs(&d, PairTask::Undirected, &rv, &KeepAll).unwrap().len(), 3);
    }

    #[test]
    fn one_gold_among_six() {
        let mut d = doc_with(vec![mention(&["A"], 0), mention(&["B"], 1), mention(&["C"], 2)]);
        d.gold_relations.push(GoldRelation {
            head: "B".into(),
            tail: "C".into(),
            label: "r".into(),
        });
        let rv = RelationVocab::new(&["r"]);
        let pairs = generate_pairs(&d, PairTask::Bidirectional, &rv, &KeepAll).unwrap();
        let pos: Vec<_> = pairs.iter().filter(|p| p.label != 0).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!((pos[0].head_entity_id.as_str(), pos[0].tail_entity_id.as_str()), ("B", "C"));
        assert_eq!(pairs.len() - pos.len(), 5);

        let und = generate_pairs(&d, PairTask::Undirected, &rv, &KeepAll).unwrap();
        assert_eq!(und.iter().filter(|p| p.label != 0).count(), 1);
    }

    #[test]
    fn unknown_label_is_label_error() {
        let mut d = doc_with(vec![mention(&["A"], 0), mention(&["B"], 1)]);
        d.gold_relations.push(GoldRelation {
            head: "A".into(),
            tail: "B".into(),
            label: "zzz".into(),
        });
        let rv = RelationVocab::new(&["r"]);
        assert!(matches!(
            generate_pairs(&d, PairTask::Bidirectional, &rv, &KeepAll),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn type_constraint_filters() {
        let mut ms = vec![mention(&["A"], 0), mention(&["B"], 1)];
        ms[1].entity_type = "disease".into();
        let d = doc_with(ms);
        let rv = RelationVocab::new(&["r"]);
        let tc = TypeConstraint {
            head_type: "chem".into(),
            tail_type: "disease".into(),
        };
        let pairs = generate_pairs(&d, PairTask::Bidirectional, &rv, &tc).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].head_entity_id, "A");
    }

    #[test]
    fn sentence_lookup() {
        let mut rep = IngestReport::default();
        let doc = parse_document(fixture_line(), 1, &mut rep).unwrap();
        assert_eq!(doc.sentence_of(0), Some(0));
        assert_eq!(doc.sentence_of(2), Some(0));
        assert_eq!(doc.sentence_of(3), Some(1));
        assert_eq!(doc.sentence_of(6), None);
    }
}
