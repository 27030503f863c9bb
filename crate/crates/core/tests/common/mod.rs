#![allow(dead_code)]

use docre::config::TrainConfig;
use docre::corpus::{parse_document, parse_jsonl, Document, IngestReport};
use docre::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two sentences of three tokens with every edge category present:
/// 4 arcs, roots B and E, one coreference chain {A, D}.
pub const SIX_TOKEN_DOC: &str = r#"{"doc_id":"six","tokens":["A","B","C","D","E","F"],"sentences":[[0,3],[3,6]],"roots":[1,4],"deps":[[1,0,"nsubj"],[1,2,"dobj"],[4,3,"nsubj"],[4,5,"dobj"]],"coref":[[[0,1],[3,4]]],"mentions":[{"span":[0,1],"kb_ids":["K1"],"type":"chemical"},{"span":[5,6],"kb_ids":["K2"],"type":"chemical"},{"span":[2,3],"kb_ids":["K3"],"type":"disease"}],"relations":[{"head_kb":"K1","tail_kb":"K2","label":"r"}]}"#;

pub fn six_token_doc() -> Document {
    parse_document(SIX_TOKEN_DOC, 1, &mut IngestReport::default()).unwrap()
}

/// Three documents with ten bidirectional candidate pairs in total and
/// two relation labels. Entity A of `ten-1` is mentioned in both sentences.
pub const TEN_PAIR_CORPUS: &str = concat!(
    r#"{"doc_id":"ten-1","tokens":["A","x","B",".","y","C","z","A"],"sentences":[[0,4],[4,8]],"mentions":[{"span":[0,1],"kb_ids":["A"],"type":"t"},{"span":[2,3],"kb_ids":["B"],"type":"t"},{"span":[5,6],"kb_ids":["C"],"type":"t"},{"span":[7,8],"kb_ids":["A"],"type":"t"}],"relations":[{"head_kb":"A","tail_kb":"B","label":"r1"},{"head_kb":"C","tail_kb":"A","label":"r2"},{"head_kb":"B","tail_kb":"C","label":"r1"}]}"#,
    "\n",
    r#"{"doc_id":"ten-2","tokens":["D","x",".","E","y","."],"sentences":[[0,3],[3,6]],"mentions":[{"span":[0,1],"kb_ids":["D"],"type":"t"},{"span":[3,4],"kb_ids":["E"],"type":"t"}],"relations":[{"head_kb":"D","tail_kb":"E","label":"r1"}]}"#,
    "\n",
    r#"{"doc_id":"ten-3","tokens":["F","x","G","."],"sentences":[[0,4]],"mentions":[{"span":[0,1],"kb_ids":["F"],"type":"t"},{"span":[2,3],"kb_ids":["G"],"type":"t"}],"relations":[{"head_kb":"F","tail_kb":"G","label":"r2"}]}"#,
    "\n",
);

pub fn ten_pair_corpus() -> Vec<Document> {
    parse_jsonl(TEN_PAIR_CORPUS).unwrap().0
}

/// Hand-assigned predictions for the ten-pair corpus, by (doc, head, tail).
/// Labels: 0 = no relation, 1 = r1, 2 = r2.
pub const TEN_PAIR_PREDICTIONS: &[(&str, &str, &str, usize)] = &[
    ("ten-1", "A", "B", 1), // gold r1: TP, intra
    ("ten-1", "B", "A", 0), // gold 0: -, intra
    ("ten-1", "A", "C", 2), // gold 0: FP, intra (A also in sentence 1)
    ("ten-1", "C", "A", 2), // gold r2: TP, intra
    ("ten-1", "B", "C", 2), // gold r1: FP + FN, inter
    ("ten-1", "C", "B", 0), // gold 0: -, inter
    ("ten-2", "D", "E", 0), // gold r1: FN, inter
    ("ten-2", "E", "D", 1), // gold 0: FP, inter
    ("ten-3", "F", "G", 2), // gold r2: TP, intra
    ("ten-3", "G", "F", 0), // gold 0: -, intra
];

/// Small dimensions so every parameter can be finite-differenced; the
/// input width 4 + 2·2 = 8 differs from the GCNN width, so the input
/// projection is exercised too.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        word_dimension: 4,
        position_dimension: 2,
        gcnn_dimension: 6,
        mil_dimension: 5,
        position_clamp: 4,
        batch_size: 8,
        ..Default::default()
    }
}

/// Config for quick end-to-end training runs.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        word_dimension: 16,
        position_dimension: 4,
        gcnn_dimension: 24,
        mil_dimension: 16,
        position_clamp: 16,
        max_epochs: 4,
        patience: 2,
        learning_rate: 5e-3,
        ..Default::default()
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-scale..scale);
    }
    t
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks tape gradients of `sum(f(inputs) ∘ C)` for a random fixed `C`
/// against central differences. Returns the largest relative error.
pub fn max_grad_error<F>(inputs: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor], want_grads: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let weights = tape.constant(random_tensor(&mut rng, &shape, 1.0));
        let weighted = tape.mul(out, weights).unwrap();
        let loss = tape.sum(weighted).unwrap();
        let value = tape.value(loss).item();
        let grads = if want_grads {
            let g = tape.backward(loss).unwrap();
            vars.iter().map(|v| g.wrt(&tape, *v)).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, grads) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * step);
            worst = worst.max(rel_err(grads[i].data()[j], numeric));
        }
    }
    worst
}

/// Finite-difference check of every parameter scalar of a freshly
/// initialised model against the summed loss of all candidate pairs of
/// `doc`. Returns (largest relative error, number of scalars checked).
pub fn model_gradient_check(cfg: &TrainConfig, doc: &Document, train: bool, step: f64) -> (f64, usize) {
    use docre::corpus::{generate_pairs, KeepAll, RelationVocab};
    use docre::encoder::WordVocab;
    use docre::graph::{build_graph, EdgeTypeVocabulary};
    use docre::model::Model;

    let opts = cfg.graph_options();
    let graph = build_graph(doc, &opts).unwrap();
    let edges = EdgeTypeVocabulary::fit([&graph], cfg.top_n, cfg.topn_syntactic_only);
    let relations = RelationVocab::from_documents(std::slice::from_ref(doc));
    let mut model = Model::new(cfg.clone(), WordVocab::build([doc]), edges, relations, 11).unwrap();
    let prep = model.prepare(doc, &opts).unwrap();
    let pairs = generate_pairs(doc, cfg.task, &model.relations, &KeepAll).unwrap();

    let total = |m: &Model, grads: bool| -> (f64, Vec<Option<Tensor>>) {
        let mut sum = 0.0;
        let mut acc: Vec<Option<Tensor>> = vec![None; m.params.len()];
        for (i, p) in pairs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let (l, g) = m.loss_and_grads(&prep, p, train, &mut rng).unwrap();
            sum += l;
            if grads {
                for (a, g) in acc.iter_mut().zip(g) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
        }
        (sum, acc)
    };
    let (_, grads) = total(&model, true);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (id, grad) in grads.iter().enumerate() {
        for j in 0..model.params.get(id).numel() {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + step;
            let up = total(&model, false).0;
            model.params.get_mut(id).data_mut()[j] = orig - step;
            let down = total(&model, false).0;
            model.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[j]);
            let e = rel_err(analytic, numeric);
            if e > worst {
                worst = e;
            }
            checked += 1;
        }
    }
    (worst, checked)
}

/// Synthetic corpus over a fixed 200-entity knowledge base.
pub fn synth_docs(n_docs: usize, seed: u64) -> Vec<Document> {
    use docre::synth::{gen_corpus, gen_kb, SynthOptions};
    let kb = gen_kb(200, 100, 7).unwrap();
    let opts = SynthOptions {
        n_docs,
        seed,
        ..Default::default()
    };
    gen_corpus(&kb, &opts).unwrap().docs
}
