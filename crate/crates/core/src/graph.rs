//! Document-level labelled multigraph and the edge-type vocabulary.
//!
//! Nodes are token indices. Edges are stored once in a canonical direction
//! and traversed in both directions with distinct parameter slots; self-node
//! edges have their own direction class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::Document;
use crate::error::{Error, Result};

/// The five edge categories without payload; used for enabling and ablating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryClass {
    SyntacticDependency,
    Coreference,
    AdjacentSentence,
    AdjacentWord,
    SelfNode,
}

impl CategoryClass {
    pub const ALL: [CategoryClass; 5] = [
        CategoryClass::AdjacentWord,
        CategoryClass::SyntacticDependency,
        CategoryClass::Coreference,
        CategoryClass::SelfNode,
        CategoryClass::AdjacentSentence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CategoryClass::SyntacticDependency => "syntactic",
            CategoryClass::Coreference => "coreference",
            CategoryClass::AdjacentSentence => "adjacent_sentence",
            CategoryClass::AdjacentWord => "adjacent_word",
            CategoryClass::SelfNode => "self_node",
        }
    }

    pub fn all() -> BTreeSet<CategoryClass> {
        Self::ALL.into_iter().collect()
    }
}

impl fmt::Display for CategoryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CategoryClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "syntactic" | "syntactic_dependency" => CategoryClass::SyntacticDependency,
            "coreference" | "coref" => CategoryClass::Coreference,
            "adjacent_sentence" | "adjsent" => CategoryClass::AdjacentSentence,
            "adjacent_word" | "adjword" => CategoryClass::AdjacentWord,
            "self_node" | "self" => CategoryClass::SelfNode,
            other => return Err(Error::config("edge_category", format!("unknown category `{other}`"))),
        })
    }
}

/// Parses a comma-separated category list; `all` selects every category.
pub fn parse_categories(s: &str) -> Result<BTreeSet<CategoryClass>> {
    if s.trim() == "all" {
        return Ok(CategoryClass::all());
    }
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Edge type: a category, with the dependency label for syntactic edges.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeCategory {
    SyntacticDependency(String),
    Coreference,
    AdjacentSentence,
    AdjacentWord,
    SelfNode,
}

impl EdgeCategory {
    pub fn class(&self) -> CategoryClass {
        match self {
            EdgeCategory::SyntacticDependency(_) => CategoryClass::SyntacticDependency,
            EdgeCategory::Coreference => CategoryClass::Coreference,
            EdgeCategory::AdjacentSentence => CategoryClass::AdjacentSentence,
            EdgeCategory::AdjacentWord => CategoryClass::AdjacentWord,
            EdgeCategory::SelfNode => CategoryClass::SelfNode,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            EdgeCategory::SyntacticDependency(l) => l,
            _ => "",
        }
    }

    /// Ranking tie-break key: category name, then label.
    fn sort_key(&self) -> (&'static str, &str) {
        (self.class().name(), self.label())
    }
}

impl fmt::Display for EdgeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeCategory::SyntacticDependency(l) => write!(f, "syntactic:{l}"),
            other => f.write_str(other.class().name()),
        }
    }
}

impl FromStr for EdgeCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(label) = s.strip_prefix("syntactic:") {
            return Ok(EdgeCategory::SyntacticDependency(label.to_string()));
        }
        Ok(match s.parse::<CategoryClass>()? {
            CategoryClass::Coreference => EdgeCategory::Coreference,
            CategoryClass::AdjacentSentence => EdgeCategory::AdjacentSentence,
            CategoryClass::AdjacentWord => EdgeCategory::AdjacentWord,
            CategoryClass::SelfNode => EdgeCategory::SelfNode,
            CategoryClass::SyntacticDependency => {
                return Err(Error::config("edge_category", "syntactic edge type needs a label"))
            }
        })
    }
}

impl Serialize for EdgeCategory {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EdgeCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub etype: EdgeCategory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Message travels along the stored edge, src → dst.
    Forward,
    /// Message travels against the stored edge, dst → src.
    Reverse,
    #[serde(rename = "self")]
    SelfLoop,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Reverse => "rev",
            Direction::SelfLoop => "self",
        }
    }
}

/// Options controlling which edges `build_graph` emits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphOptions {
    pub enabled: BTreeSet<CategoryClass>,
    /// Link every pair of chain members instead of consecutive ones.
    pub coref_clique: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            enabled: CategoryClass::all(),
            coref_clique: false,
        }
    }
}

impl GraphOptions {
    pub fn without(&self, class: CategoryClass) -> Self {
        let mut o = self.clone();
        o.enabled.remove(&class);
        o
    }

    pub fn only(classes: &[CategoryClass]) -> Self {
        GraphOptions {
            enabled: classes.iter().copied().collect(),
            coref_clique: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentGraph {
    pub n: usize,
    pub edges: Vec<Edge>,
    /// Per node: edges whose `dst` is the node (received along the edge).
    pub forward: Vec<Vec<usize>>,
    /// Per node: edges whose `src` is the node (received against the edge).
    pub reverse: Vec<Vec<usize>>,
    /// Per node: its self-node edges.
    pub self_loops: Vec<Vec<usize>>,
}

impl DocumentGraph {
    fn from_edges(n: usize, edges: Vec<Edge>) -> Self {
        let mut forward = vec![Vec::new(); n];
        let mut reverse = vec![Vec::new(); n];
        let mut self_loops = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            if e.etype == EdgeCategory::SelfNode {
                self_loops[e.src].push(i);
            } else {
                forward[e.dst].push(i);
                reverse[e.src].push(i);
            }
        }
        DocumentGraph {
            n,
            edges,
            forward,
            reverse,
            self_loops,
        }
    }

    pub fn count(&self, class: CategoryClass) -> usize {
        self.edges.iter().filter(|e| e.etype.class() == class).count()
    }

    pub fn counts(&self) -> BTreeMap<CategoryClass, usize> {
        let mut m: BTreeMap<CategoryClass, usize> = CategoryClass::ALL.iter().map(|&c| (c, 0)).collect();
        for e in &self.edges {
            *m.entry(e.etype.class()).or_default() += 1;
        }
        m
    }

    /// Every message a node receives: `(receiver, sender, edge index, direction)`.
    pub fn messages(&self) -> impl Iterator<Item = (usize, usize, usize, Direction)> + '_ {
        (0..self.n).flat_map(move |i| {
            let f = self.forward[i].iter().map(move |&e| (i, self.edges[e].src, e, Direction::Forward));
            let r = self.reverse[i].iter().map(move |&e| (i, self.edges[e].dst, e, Direction::Reverse));
            let s = self.self_loops[i].iter().map(move |&e| (i, i, e, Direction::SelfLoop));
            f.chain(r).chain(s)
        })
    }
}

/// Builds the document graph with the enabled edge categories.
pub fn build_graph(doc: &Document, opts: &GraphOptions) -> Result<DocumentGraph> {
    let err = |msg: &str| Error::Graph {
        doc_id: doc.doc_id.clone(),
        msg: msg.to_string(),
    };
    if opts.enabled.is_empty() {
        return Err(err("no edge category enabled"));
    }
    let on = |c| opts.enabled.contains(&c);
    let n = doc.len();
    let mut edges = Vec::new();

    if on(CategoryClass::SyntacticDependency) {
        for arc in &doc.dep_arcs {
            edges.push(Edge {
                src: arc.head,
                dst: arc.dependent,
                etype: EdgeCategory::SyntacticDependency(arc.label.clone()),
            });
        }
    }
    if on(CategoryClass::AdjacentWord) {
        for s in &doc.sentences {
            for i in s.start()..s.end().saturating_sub(1) {
                edges.push(Edge {
                    src: i,
                    dst: i + 1,
                    etype: EdgeCategory::AdjacentWord,
                });
            }
        }
    }
    if on(CategoryClass::SelfNode) {
        for i in 0..n {
            edges.push(Edge {
                src: i,
                dst: i,
                etype: EdgeCategory::SelfNode,
            });
        }
    }
    if on(CategoryClass::AdjacentSentence) && doc.sentences.len() > 1 {
        if doc.sentence_roots.len() != doc.sentences.len() {
            return Err(err("adjacent-sentence edges need one root per sentence"));
        }
        for w in doc.sentence_roots.windows(2) {
            edges.push(Edge {
                src: w[0],
                dst: w[1],
                etype: EdgeCategory::AdjacentSentence,
            });
        }
    }
    if on(CategoryClass::Coreference) {
        for chain in &doc.coref_chains {
            let anchors: Vec<usize> = chain.iter().map(|s| s.start()).collect();
            if opts.coref_clique {
                for i in 0..anchors.len() {
                    for j in i + 1..anchors.len() {
                        edges.push(Edge {
                            src: anchors[i],
                            dst: anchors[j],
                            etype: EdgeCategory::Coreference,
                        });
                    }
                }
            } else {
                for w in anchors.windows(2) {
                    edges.push(Edge {
                        src: w[0],
                        dst: w[1],
                        etype: EdgeCategory::Coreference,
                    });
                }
            }
        }
    }
    Ok(DocumentGraph::from_edges(n, edges))
}

/// Parameter slot: an edge-type bucket traversed in one direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub bucket: usize,
    pub direction: Direction,
}

/// Ranked edge types with top-N bucketing; everything else shares RARE.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTypeVocabulary {
    /// `(type, training frequency)` by descending frequency.
    pub ranked: Vec<(EdgeCategory, u64)>,
    pub top_n: usize,
    /// When set, only syntactic labels compete for the N buckets and the
    /// structural categories always get their own.
    pub syntactic_only: bool,
    own: Vec<EdgeCategory>,
}

impl EdgeTypeVocabulary {
    /// Ranks edge types of the training graphs by frequency (ties broken by
    /// category name, then label) and keeps the top `n` as own buckets.
    pub fn fit<'g>(graphs: impl IntoIterator<Item = &'g DocumentGraph>, n: usize, syntactic_only: bool) -> Self {
        let mut freq: BTreeMap<EdgeCategory, u64> = BTreeMap::new();
        for g in graphs {
            for e in &g.edges {
                *freq.entry(e.etype.clone()).or_default() += 1;
            }
        }
        Self::from_frequencies(freq, n, syntactic_only)
    }

    pub fn from_frequencies(freq: impl IntoIterator<Item = (EdgeCategory, u64)>, n: usize, syntactic_only: bool) -> Self {
        let mut ranked: Vec<(EdgeCategory, u64)> = freq.into_iter().collect();
        ranked.sort_by(|(a, fa), (b, fb)| fb.cmp(fa).then_with(|| a.sort_key().cmp(&b.sort_key())));
        let own = if syntactic_only {
            let mut own: Vec<EdgeCategory> = ranked
                .iter()
                .filter(|(c, _)| c.class() != CategoryClass::SyntacticDependency)
                .map(|(c, _)| c.clone())
                .collect();
            own.extend(
                ranked
                    .iter()
                    .filter(|(c, _)| c.class() == CategoryClass::SyntacticDependency)
                    .take(n)
                    .map(|(c, _)| c.clone()),
            );
            own
        } else {
            ranked.iter().take(n).map(|(c, _)| c.clone()).collect()
        };
        EdgeTypeVocabulary {
            ranked,
            top_n: n,
            syntactic_only,
            own,
        }
    }

    /// Types with their own bucket, in bucket order.
    pub fn own_types(&self) -> &[EdgeCategory] {
        &self.own
    }

    /// Types sharing the RARE bucket.
    pub fn rare_types(&self) -> Vec<&EdgeCategory> {
        self.ranked
            .iter()
            .map(|(c, _)| c)
            .filter(|c| !self.own.contains(c))
            .collect()
    }

    pub fn has_rare(&self) -> bool {
        self.own.len() < self.ranked.len()
    }

    /// Buckets in use by training types: own buckets plus RARE if any type is rare.
    pub fn num_buckets(&self) -> usize {
        self.own.len() + usize::from(self.has_rare())
    }

    pub fn rare_bucket(&self) -> usize {
        self.own.len()
    }

    pub fn bucket(&self, etype: &EdgeCategory) -> usize {
        self.own
            .iter()
            .position(|c| c == etype)
            .unwrap_or_else(|| self.rare_bucket())
    }

    pub fn bucket_name(&self, bucket: usize) -> String {
        self.own
            .get(bucket)
            .map_or_else(|| "rare".to_string(), |c| c.to_string())
    }

    /// Every parameterised slot. Own buckets get the directions their
    /// category can produce; RARE always gets all three so that types unseen
    /// in training still have parameters.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        for (b, c) in self.own.iter().enumerate() {
            if *c == EdgeCategory::SelfNode {
                out.push(Slot {
                    bucket: b,
                    direction: Direction::SelfLoop,
                });
            } else {
                for direction in [Direction::Forward, Direction::Reverse] {
                    out.push(Slot { bucket: b, direction });
                }
            }
        }
        for direction in [Direction::Forward, Direction::Reverse, Direction::SelfLoop] {
            out.push(Slot {
                bucket: self.rare_bucket(),
                direction,
            });
        }
        out
    }

    pub fn slot_name(&self, slot: Slot) -> String {
        format!("{}/{}", self.bucket_name(slot.bucket), slot.direction.tag())
    }

    /// Slots used by one edge category class (own buckets only when the
    /// class is not in RARE).
    pub fn class_slots(&self, class: CategoryClass) -> Vec<Slot> {
        self.slots()
            .into_iter()
            .filter(|s| self.own.get(s.bucket).is_some_and(|c| c.class() == class))
            .collect()
    }
}

/// Parameter slot for an edge type traversed in a direction.
pub fn bucket_of(vocab: &EdgeTypeVocabulary, etype: &EdgeCategory, direction: Direction) -> Slot {
    Slot {
        bucket: vocab.bucket(etype),
        direction,
    }
}

/// Per-document edge statistics for corpus auditing.
#[derive(Clone, Debug, Serialize)]
pub struct GraphStats {
    pub doc_id: String,
    pub tokens: usize,
    pub counts: BTreeMap<CategoryClass, usize>,
}

pub fn graph_stats(doc: &Document, graph: &DocumentGraph) -> GraphStats {
    GraphStats {
        doc_id: doc.doc_id.clone(),
        tokens: graph.n,
        counts: graph.counts(),
    }
}
