//! The full relation-extraction model: parameters plus the per-pair forward.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{entity_pair_scores, mean_pool, project_side, ProjectionHeads};
use crate::config::{MentionPooling, TrainConfig};
use crate::corpus::{Document, PairInstance, RelationVocab};
use crate::encoder::{encode_inputs, gcnn_forward_planned, plan_messages, EmbeddingTables, GcnnBlock, GcnnOptions, SlotMessages, SlotParams, WordVocab};
use crate::error::{Error, Result};
use crate::graph::{build_graph, CategoryClass, DocumentGraph, EdgeTypeVocabulary, GraphOptions, Slot};
use crate::tensor::{Tape, Tensor, Var};

pub type ParamId = usize;

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        let id = self.tensors.len();
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameter ids of one GCNN slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotIds {
    pub w: ParamId,
    pub b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    word: ParamId,
    pos_head: ParamId,
    pos_tail: ParamId,
    input_proj: Option<(ParamId, ParamId)>,
    blocks: Vec<BTreeMap<Slot, SlotIds>>,
    head_w0: ParamId,
    head_w1: ParamId,
    tail_w0: ParamId,
    tail_w1: ParamId,
    biaffine: ParamId,
}

/// `(name, shape, init)` of every parameter, in registration order.
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

fn param_specs(cfg: &TrainConfig, words: usize, edges: &EdgeTypeVocabulary, relations: usize) -> Vec<(String, Vec<usize>, Init)> {
    let dg = cfg.gcnn_dimension;
    let dm = cfg.mil_dimension;
    let positions = 2 * cfg.position_clamp + 1;
    let mut specs = vec![
        ("embed.word".to_string(), vec![words, cfg.word_dimension], Init::Embedding),
        ("embed.pos_head".to_string(), vec![positions, cfg.position_dimension], Init::Embedding),
        ("embed.pos_tail".to_string(), vec![positions, cfg.position_dimension], Init::Embedding),
    ];
    if cfg.input_dimension() != dg {
        specs.push(("input_proj.w".into(), vec![cfg.input_dimension(), dg], Init::Xavier));
        specs.push(("input_proj.b".into(), vec![dg], Init::Zeros));
    }
    for k in 0..cfg.gcnn_blocks {
        for slot in edges.slots() {
            let base = format!("gcnn.{k}.{}", edges.slot_name(slot));
            specs.push((format!("{base}.w"), vec![dg, dg], Init::Xavier));
            specs.push((format!("{base}.b"), vec![dg], Init::Zeros));
            specs.push((format!("{base}.gate_w"), vec![dg, 1], Init::Xavier));
            specs.push((format!("{base}.gate_b"), vec![1], Init::Ones));
        }
    }
    for side in ["head", "tail"] {
        specs.push((format!("mil.{side}.w0"), vec![dg, dm], Init::Xavier));
        specs.push((format!("mil.{side}.w1"), vec![dm, dm], Init::Xavier));
    }
    specs.push(("mil.biaffine".into(), vec![dm, relations, dm], Init::Xavier));
    specs
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], init: &Init, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let bound = match init {
        Init::Zeros => return t,
        Init::Ones => {
            t.fill(1.0);
            return t;
        }
        Init::Embedding => (3.0 / shape[1] as f64).sqrt(),
        Init::Xavier => {
            let (fan_in, fan_out) = match shape {
                [a, b] => (*a, *b),
                [a, _, c] => (*a, *c),
                _ => (shape[0], shape[0]),
            };
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        }
    };
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// A document with its graph and message plan cached for one model.
#[derive(Clone, Debug)]
pub struct PreparedDoc {
    pub doc: Document,
    pub graph: DocumentGraph,
    pub plan: Vec<SlotMessages>,
    pub word_ids: Vec<usize>,
}

/// Per-parameter gradients; `None` where a parameter did not participate.
pub type ParamGrads = Vec<Option<Tensor>>;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub words: WordVocab,
    pub edges: EdgeTypeVocabulary,
    pub relations: RelationVocab,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Freshly initialised model; all randomness comes from `seed`.
    pub fn new(config: TrainConfig, words: WordVocab, edges: EdgeTypeVocabulary, relations: RelationVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if relations.len() < 2 {
            return Err(Error::config("relation_labels", "need at least one relation besides \"no relation\""));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, shape, init) in param_specs(&config, words.len(), &edges, relations.len()) {
            let t = init_tensor(&shape, &init, &mut rng);
            params.add(name, t);
        }
        Self::from_parts(config, words, edges, relations, params)
    }

    /// Reassembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: TrainConfig, words: WordVocab, edges: EdgeTypeVocabulary, relations: RelationVocab, params: ParamStore) -> Result<Self> {
        let specs = param_specs(&config, words.len(), &edges, relations.len());
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", specs.len(), params.len())));
        }
        for (name, shape, _) in &specs {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let blocks = (0..config.gcnn_blocks)
            .map(|k| {
                edges
                    .slots()
                    .into_iter()
                    .map(|slot| {
                        let base = format!("gcnn.{k}.{}", edges.slot_name(slot));
                        (
                            slot,
                            SlotIds {
                                w: id(&format!("{base}.w")),
                                b: id(&format!("{base}.b")),
                                gate_w: id(&format!("{base}.gate_w")),
                                gate_b: id(&format!("{base}.gate_b")),
                            },
                        )
                    })
                    .collect()
            })
            .collect();
        let layout = Layout {
            word: id("embed.word"),
            pos_head: id("embed.pos_head"),
            pos_tail: id("embed.pos_tail"),
            input_proj: params.id("input_proj.w").map(|w| (w, id("input_proj.b"))),
            blocks,
            head_w0: id("mil.head.w0"),
            head_w1: id("mil.head.w1"),
            tail_w0: id("mil.tail.w0"),
            tail_w1: id("mil.tail.w1"),
            biaffine: id("mil.biaffine"),
        };
        Ok(Model {
            config,
            words,
            edges,
            relations,
            params,
            layout,
        })
    }

    pub fn word_embedding_id(&self) -> ParamId {
        self.layout.word
    }

    /// Parameter ids of every GCNN slot belonging to `class` (own buckets only).
    pub fn class_slot_params(&self, class: CategoryClass) -> Vec<SlotIds> {
        let slots: BTreeSet<Slot> = self.edges.class_slots(class).into_iter().collect();
        self.layout
            .blocks
            .iter()
            .flat_map(|b| b.iter().filter(|(s, _)| slots.contains(s)).map(|(_, ids)| *ids))
            .collect()
    }

    pub fn slot_count(&self) -> usize {
        self.edges.slots().len()
    }

    pub fn prepare(&self, doc: &Document, opts: &GraphOptions) -> Result<PreparedDoc> {
        let graph = build_graph(doc, opts)?;
        let plan = plan_messages(&graph, &self.edges);
        Ok(PreparedDoc {
            doc: doc.clone(),
            word_ids: self.words.ids(doc),
            graph,
            plan,
        })
    }

    pub fn prepare_all(&self, docs: &[Document], opts: &GraphOptions) -> Result<Vec<PreparedDoc>> {
        docs.iter().map(|d| self.prepare(d, opts)).collect()
    }

    /// Records the forward pass of one pair; returns the score vector.
    #[allow(clippy::too_many_arguments)]
    fn forward<'a, R: Rng + ?Sized>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        vars: &mut [Option<Var>],
        prep: &PreparedDoc,
        pair: &PairInstance,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut bind = |tape: &mut Tape<'a>, id: ParamId| -> Var { *vars[id].get_or_insert_with(|| tape.param(params.get(id))) };

        let tables = EmbeddingTables {
            word: bind(tape, self.layout.word),
            pos_head: bind(tape, self.layout.pos_head),
            pos_tail: bind(tape, self.layout.pos_tail),
        };
        let x = encode_inputs(tape, &tables, &prep.word_ids, pair, cfg.position_clamp)?;
        let mut x = tape.dropout(x, cfg.dropout_input, train, rng)?;
        if let Some((w, b)) = self.layout.input_proj {
            let (w, b) = (bind(tape, w), bind(tape, b));
            let proj = tape.matmul(x, w)?;
            x = tape.add_row(proj, b)?;
        }

        // only nodes the edges actually reach need parameters on the tape
        let used: BTreeSet<Slot> = prep.plan.iter().map(|m| m.slot).collect();
        let blocks: Vec<GcnnBlock> = self
            .layout
            .blocks
            .iter()
            .map(|b| GcnnBlock {
                slots: b
                    .iter()
                    .filter(|(s, _)| used.contains(s))
                    .map(|(s, ids)| {
                        (
                            *s,
                            SlotParams {
                                w: bind(tape, ids.w),
                                b: bind(tape, ids.b),
                                gate_w: bind(tape, ids.gate_w),
                                gate_b: bind(tape, ids.gate_b),
                            },
                        )
                    })
                    .collect(),
            })
            .collect();
        let gopts = GcnnOptions {
            activation: cfg.gcnn_activation,
            gating: cfg.edge_gating,
            residual: cfg.residual,
            dropout: cfg.dropout_gcnn,
        };
        let targets: Vec<usize> = pair
            .head_tokens
            .iter()
            .chain(&pair.tail_tokens)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let xk = gcnn_forward_planned(tape, x, &prep.plan, prep.graph.n, &blocks, &gopts, train, rng, Some(&targets))?;

        let heads = ProjectionHeads {
            head_w0: bind(tape, self.layout.head_w0),
            head_w1: bind(tape, self.layout.head_w1),
            tail_w0: bind(tape, self.layout.tail_w0),
            tail_w1: bind(tape, self.layout.tail_w1),
        };
        let hx = tape.gather_rows(xk, &pair.head_tokens)?;
        let tx = tape.gather_rows(xk, &pair.tail_tokens)?;
        let mut xh = project_side(tape, hx, heads.head_w0, heads.head_w1, cfg.dropout_mil, train, rng)?;
        let mut xt = project_side(tape, tx, heads.tail_w0, heads.tail_w1, cfg.dropout_mil, train, rng)?;
        if cfg.mention_pooling == MentionPooling::Mention {
            xh = mean_pool(tape, xh, &mention_groups(&pair.head_tokens, &pair.head_spans))?;
            xt = mean_pool(tape, xt, &mention_groups(&pair.tail_tokens, &pair.tail_spans))?;
        }
        let r = bind(tape, self.layout.biaffine);
        entity_pair_scores(tape, xh, xt, r)
    }

    /// Relation scores for a pair in evaluation mode.
    pub fn scores_with(&self, params: &ParamStore, prep: &PreparedDoc, pair: &PairInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut vars = vec![None; params.len()];
        // evaluation draws no random numbers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = self.forward(params, &mut tape, &mut vars, prep, pair, false, &mut rng)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn scores(&self, prep: &PreparedDoc, pair: &PairInstance) -> Result<Vec<f64>> {
        self.scores_with(&self.params, prep, pair)
    }

    /// Loss of one pair in evaluation mode.
    pub fn loss(&self, prep: &PreparedDoc, pair: &PairInstance) -> Result<f64> {
        let mut tape = Tape::new();
        let mut vars = vec![None; self.params.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = self.forward(&self.params, &mut tape, &mut vars, prep, pair, false, &mut rng)?;
        let loss = tape.softmax_cross_entropy(s, pair.label)?;
        Ok(tape.value(loss).item())
    }

    /// Loss of one pair (training mode unless `train` is false) and the
    /// gradient of every parameter.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        prep: &PreparedDoc,
        pair: &PairInstance,
        train: bool,
        rng: &mut R,
    ) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let mut vars = vec![None; self.params.len()];
        let s = self.forward(&self.params, &mut tape, &mut vars, prep, pair, train, rng)?;
        let loss = tape.softmax_cross_entropy(s, pair.label)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let out = vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect();
        Ok((value, out))
    }
}

/// Row groups (positions within `tokens`) for each mention span.
fn mention_groups(tokens: &[usize], spans: &[crate::corpus::Span]) -> Vec<Vec<usize>> {
    spans
        .iter()
        .map(|s| {
            s.tokens()
                .filter_map(|t| tokens.binary_search(&t).ok())
                .collect()
        })
        .collect()
}
