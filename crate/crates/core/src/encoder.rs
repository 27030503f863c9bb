//! Input embedding layer and stacked labelled-edge GCNN blocks.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Activation;
use crate::corpus::{Document, PairInstance, Span};
use crate::error::{Error, Result};
use crate::graph::{bucket_of, DocumentGraph, EdgeTypeVocabulary, Slot};
use crate::tensor::{Tape, Tensor, Var};

pub const UNK: &str = "<unk>";

/// Token vocabulary; index 0 is the unknown-word row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = WordVocab {
            tokens: vec![UNK.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(UNK.to_string(), 0);
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Vocabulary of every token in `docs`, in first-seen order.
    pub fn build<'d>(docs: impl IntoIterator<Item = &'d Document>) -> Self {
        Self::from_tokens(docs.into_iter().flat_map(|d| d.tokens.iter().cloned()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn ids(&self, doc: &Document) -> Vec<usize> {
        doc.tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Overwrites rows of `table` (|V|×d) with vectors from a whitespace text
/// file (`token v1 … vd` per line). Returns how many rows were replaced.
pub fn load_pretrained(path: &Path, vocab: &WordVocab, table: &mut Tensor) -> Result<usize> {
    let d = table.cols();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hits = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let vals: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                field: tok.to_string(),
                msg: e.to_string(),
            })?;
        if vals.len() != d {
            return Err(Error::Parse {
                line: i + 1,
                field: tok.to_string(),
                msg: format!("expected {d} values, got {}", vals.len()),
            });
        }
        if let Some(&row) = vocab.index.get(tok) {
            table.data_mut()[row * d..(row + 1) * d].copy_from_slice(&vals);
            hits += 1;
        }
    }
    Ok(hits)
}

/// Signed offset from `tok` to the nearest token of the nearest span.
/// Ties between a left and a right candidate resolve to the negative offset.
pub fn relative_offset(tok: usize, spans: &[Span]) -> Option<i64> {
    let mut best: Option<i64> = None;
    for s in spans.iter().filter(|s| !s.is_empty()) {
        let off = if tok < s.start() {
            tok as i64 - s.start() as i64
        } else if tok >= s.end() {
            tok as i64 - (s.end() as i64 - 1)
        } else {
            0
        };
        best = Some(match best {
            None => off,
            Some(b) if off.abs() < b.abs() || (off.abs() == b.abs() && off < b) => off,
            Some(b) => b,
        });
    }
    best
}

/// Row indices into a `(2P+1)`-row position table.
pub fn position_ids(n: usize, spans: &[Span], clamp: usize) -> Result<Vec<usize>> {
    let p = clamp as i64;
    (0..n)
        .map(|i| {
            relative_offset(i, spans)
                .map(|off| (off.clamp(-p, p) + p) as usize)
                .ok_or_else(|| Error::Precondition("empty mention set".into()))
        })
        .collect()
}

/// Tape handles of the embedding tables.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables {
    pub word: Var,
    pub pos_head: Var,
    pub pos_tail: Var,
}

/// Builds `x_i = [w_i; d¹_i; d²_i]` for every token of `doc`.
pub fn encode_inputs(
    tape: &mut Tape<'_>,
    tables: &EmbeddingTables,
    word_ids: &[usize],
    pair: &PairInstance,
    clamp: usize,
) -> Result<Var> {
    if pair.head_spans.is_empty() || pair.tail_spans.is_empty() {
        return Err(Error::Precondition(format!(
            "pair ({}, {}) has an empty mention set",
            pair.head_entity_id, pair.tail_entity_id
        )));
    }
    let n = word_ids.len();
    let w = tape.gather_rows(tables.word, word_ids)?;
    let dh = tape.gather_rows(tables.pos_head, &position_ids(n, &pair.head_spans, clamp)?)?;
    let dt = tape.gather_rows(tables.pos_tail, &position_ids(n, &pair.tail_spans, clamp)?)?;
    tape.concat_cols(&[w, dh, dt])
}

/// Parameters of one slot in one block.
#[derive(Clone, Copy, Debug)]
pub struct SlotParams {
    /// `d_g × d_g`, applied as `x · W`.
    pub w: Var,
    pub b: Var,
    /// `d_g × 1`
    pub gate_w: Var,
    /// `1`
    pub gate_b: Var,
}

#[derive(Clone, Debug, Default)]
pub struct GcnnBlock {
    pub slots: BTreeMap<Slot, SlotParams>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GcnnOptions {
    pub activation: Activation,
    pub gating: bool,
    pub residual: bool,
    pub dropout: f64,
}

impl Default for GcnnOptions {
    fn default() -> Self {
        GcnnOptions {
            activation: Activation::Relu,
            gating: true,
            residual: true,
            dropout: 0.0,
        }
    }
}

/// Messages of one parameter slot: `dst[e]` receives `x[src[e]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotMessages {
    pub slot: Slot,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

/// Groups every message of `graph` by parameter slot, in slot order.
pub fn plan_messages(graph: &DocumentGraph, vocab: &EdgeTypeVocabulary) -> Vec<SlotMessages> {
    let mut groups: BTreeMap<Slot, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (recv, send, e, dir) in graph.messages() {
        let slot = bucket_of(vocab, &graph.edges[e].etype, dir);
        let g = groups.entry(slot).or_default();
        g.0.push(send);
        g.1.push(recv);
    }
    groups
        .into_iter()
        .map(|(slot, (src, dst))| SlotMessages { slot, src, dst })
        .collect()
}

/// Rows each block must produce so that `targets` are exact in the output.
/// Entry `k` is the mask of rows needed from block `k`'s output.
fn receptive_masks(plan: &[SlotMessages], n: usize, blocks: usize, targets: &[usize]) -> Vec<Vec<bool>> {
    let mut masks = vec![vec![false; n]; blocks];
    let mut need = vec![false; n];
    targets.iter().for_each(|&t| need[t] = true);
    for k in (0..blocks).rev() {
        masks[k] = need.clone();
        let mut prev = need.clone();
        for m in plan {
            for (&s, &d) in m.src.iter().zip(&m.dst) {
                if need[d] {
                    prev[s] = true;
                }
            }
        }
        need = prev;
    }
    masks
}

/// Runs the GCNN blocks over all nodes.
#[allow(clippy::too_many_arguments)]
pub fn gcnn_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    graph: &DocumentGraph,
    vocab: &EdgeTypeVocabulary,
    blocks: &[GcnnBlock],
    opts: &GcnnOptions,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let plan = plan_messages(graph, vocab);
    gcnn_forward_planned(tape, x, &plan, graph.n, blocks, opts, train, rng, None)
}

/// GCNN over a precomputed message plan. With `targets`, only rows in the
/// targets' receptive field are computed; other output rows are not
/// meaningful.
#[allow(clippy::too_many_arguments)]
pub fn gcnn_forward_planned<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    mut x: Var,
    plan: &[SlotMessages],
    n: usize,
    blocks: &[GcnnBlock],
    opts: &GcnnOptions,
    train: bool,
    rng: &mut R,
    targets: Option<&[usize]>,
) -> Result<Var> {
    let masks = targets.map(|t| receptive_masks(plan, n, blocks.len(), t));
    for (k, block) in blocks.iter().enumerate() {
        let d = tape.value(x).cols();
        let mut h: Option<Var> = None;
        for group in plan {
            let (src, dst): (Vec<usize>, Vec<usize>) = match &masks {
                Some(m) => group
                    .src
                    .iter()
                    .zip(&group.dst)
                    .filter(|(_, &dd)| m[k][dd])
                    .map(|(&s, &dd)| (s, dd))
                    .unzip(),
                None => (group.src.clone(), group.dst.clone()),
            };
            if src.is_empty() {
                continue;
            }
            let p = block.slots.get(&group.slot).ok_or_else(|| {
                Error::Invariant(format!("block {k} has no parameters for slot {:?}", group.slot))
            })?;
            let xs = tape.gather_rows(x, &src)?;
            let lin = tape.matmul(xs, p.w)?;
            let mut msg = tape.add_row(lin, p.b)?;
            if opts.gating {
                let g = tape.matmul(xs, p.gate_w)?;
                let g = tape.add_row(g, p.gate_b)?;
                let g = tape.sigmoid(g)?;
                msg = tape.mul_col(msg, g)?;
            }
            let agg = tape.scatter_add_rows(msg, &dst, n)?;
            h = Some(match h {
                Some(acc) => tape.add(acc, agg)?,
                None => agg,
            });
        }
        let h = match h {
            Some(h) => h,
            None => tape.constant(Tensor::zeros(&[n, d])),
        };
        let act = match opts.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::Identity => h,
        };
        let out = if opts.residual { tape.add(act, x)? } else { act };
        x = tape.dropout(out, opts.dropout, train, rng)?;
    }
    Ok(x)
}
