mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use common::*;
use docre::classifier::{argmax, entity_pair_scores};
use docre::config::Activation;
use docre::corpus::{
    generate_pairs, merge_entities, parse_document, to_json_line, DepArc, Document, IngestReport, KeepAll, Mention,
    PairTask, RelationVocab, Span,
};
use docre::encoder::{gcnn_forward_planned, plan_messages, GcnnBlock, GcnnOptions, SlotParams};
use docre::eval::{report_from_predictions, Prediction, Sentential};
use docre::graph::{build_graph, CategoryClass, DocumentGraph, EdgeTypeVocabulary, GraphOptions};
use docre::model::ParamStore;
use docre::tensor::{Tape, Tensor};
use docre::trainer::{clip_global_norm, Ema};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LABELS: [&str; 4] = ["nsubj", "dobj", "amod", "case"];

/// Random valid document: 1-4 sentences with roots, in-sentence arcs,
/// coreference chains and mentions grounded to a small KB-id pool.
fn random_doc(seed: u64) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::new();
    let mut n = 0;
    for _ in 0..rng.random_range(1..=4) {
        let len = rng.random_range(1..=6);
        sentences.push(Span(n, n + len));
        n += len;
    }
    let roots = sentences.iter().map(|s| rng.random_range(s.start()..s.end())).collect();
    let mut dep_arcs = Vec::new();
    for s in &sentences {
        for _ in 0..rng.random_range(0..=s.len()) {
            dep_arcs.push(DepArc {
                head: rng.random_range(s.start()..s.end()),
                dependent: rng.random_range(s.start()..s.end()),
                label: LABELS[rng.random_range(0..LABELS.len())].into(),
            });
        }
    }
    let coref_chains = (0..rng.random_range(0..=2))
        .map(|_| {
            (0..rng.random_range(2..=3))
                .map(|_| {
                    let a = rng.random_range(0..n);
                    Span(a, a + 1)
                })
                .collect()
        })
        .collect();
    let mentions = (0..rng.random_range(2..=6))
        .map(|_| {
            let a = rng.random_range(0..n);
            let kb_ids = (0..rng.random_range(1..=2)).map(|_| format!("K{}", rng.random_range(0..6))).collect();
            Mention {
                span: Span(a, a + 1),
                entity_id: String::new(),
                kb_ids,
                entity_type: "t".into(),
            }
        })
        .collect();
    let doc = Document {
        doc_id: format!("d{seed}"),
        tokens: (0..n).map(|i| format!("w{}", i % 5)).collect(),
        sentences,
        dep_arcs,
        sentence_roots: roots,
        coref_chains,
        mentions,
        gold_relations: Vec::new(),
    };
    merge_entities(&doc).0
}

/// Mention indices grouped by entity, via an independent union-find over
/// mentions sharing any KB id.
fn union_find_partition(mentions: &[Mention]) -> BTreeSet<BTreeSet<usize>> {
    let mut parent: Vec<usize> = (0..mentions.len()).collect();
    fn root(p: &mut [usize], x: usize) -> usize {
        if p[x] == x {
            x
        } else {
            let r = root(p, p[x]);
            p[x] = r;
            r
        }
    }
    for i in 0..mentions.len() {
        for j in 0..i {
            if !mentions[i].kb_ids.is_disjoint(&mentions[j].kb_ids) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for i in 0..mentions.len() {
        groups.entry(root(&mut parent, i)).or_default().insert(i);
    }
    groups.into_values().collect()
}

fn entity_partition(mentions: &[Mention], order: &[usize]) -> BTreeSet<BTreeSet<usize>> {
    let mut groups: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for (pos, m) in mentions.iter().enumerate() {
        groups.entry(m.entity_id.as_str()).or_default().insert(order[pos]);
    }
    groups.into_values().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_matches_union_find_in_any_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let doc = random_doc(seed);
        let identity: Vec<usize> = (0..doc.mentions.len()).collect();
        prop_assert_eq!(entity_partition(&doc.mentions, &identity), union_find_partition(&doc.mentions));

        let mut order = identity.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let mut permuted = doc.clone();
        permuted.mentions = order.iter().map(|&i| doc.mentions[i].clone()).collect();
        let merged = merge_entities(&permuted).0;
        prop_assert_eq!(entity_partition(&merged.mentions, &order), entity_partition(&doc.mentions, &identity));
        let ids = |d: &Document| d.mentions.iter().map(|m| m.entity_id.clone()).collect::<BTreeSet<_>>();
        prop_assert_eq!(ids(&merged), ids(&doc));
    }

    #[test]
    fn merge_is_idempotent(seed in any::<u64>()) {
        let doc = random_doc(seed);
        prop_assert_eq!(merge_entities(&doc).0, doc);
    }

    #[test]
    fn bidirectional_pair_count(seed in any::<u64>()) {
        let doc = random_doc(seed);
        let e = doc.entities().len();
        let rel = RelationVocab::new::<&str>(&[]);
        prop_assert_eq!(generate_pairs(&doc, PairTask::Bidirectional, &rel, &KeepAll).unwrap().len(), e * (e - 1));
        prop_assert_eq!(generate_pairs(&doc, PairTask::Undirected, &rel, &KeepAll).unwrap().len(), e * (e - 1) / 2);
    }

    #[test]
    fn ingest_round_trip(seed in any::<u64>()) {
        let doc = random_doc(seed);
        let mut report = IngestReport::default();
        let back = parse_document(&to_json_line(&doc), 1, &mut report).unwrap();
        prop_assert!(report.is_clean());
        prop_assert_eq!(back, doc);
    }

    #[test]
    fn edge_counts_closed_form(seed in any::<u64>()) {
        let doc = random_doc(seed);
        let g = build_graph(&doc, &GraphOptions::default()).unwrap();
        let c = g.counts();
        prop_assert_eq!(c[&CategoryClass::SelfNode], doc.len());
        prop_assert_eq!(c[&CategoryClass::AdjacentWord], doc.sentences.iter().map(|s| s.len() - 1).sum::<usize>());
        prop_assert_eq!(c[&CategoryClass::AdjacentSentence], doc.sentences.len() - 1);
        prop_assert_eq!(c[&CategoryClass::SyntacticDependency], doc.dep_arcs.len());
        prop_assert_eq!(c[&CategoryClass::Coreference], doc.coref_chains.iter().map(|ch| ch.len() - 1).sum::<usize>());
        let listed: usize = (0..g.n).map(|i| g.forward[i].len() + g.self_loops[i].len()).sum();
        prop_assert_eq!(listed, g.edges.len());
    }

    #[test]
    fn subset_graph_is_restriction(seed in any::<u64>(), mask in 1u8..32) {
        let doc = random_doc(seed);
        let keep: Vec<CategoryClass> = CategoryClass::ALL.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, c)| *c).collect();
        let sub = build_graph(&doc, &GraphOptions::only(&keep)).unwrap();
        let full = build_graph(&doc, &GraphOptions::default()).unwrap();
        let restricted: Vec<_> = full.edges.into_iter().filter(|e| keep.contains(&e.etype.class())).collect();
        prop_assert_eq!(sub.edges, restricted);
    }

    #[test]
    fn vocabulary_ignores_document_order(seed in any::<u64>(), n in 0usize..8) {
        let graphs: Vec<DocumentGraph> = (0..5).map(|i| build_graph(&random_doc(seed ^ i), &GraphOptions::default()).unwrap()).collect();
        let mut shuffled = graphs.clone();
        shuffled.reverse();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(EdgeTypeVocabulary::fit(&graphs, n, false), EdgeTypeVocabulary::fit(&shuffled, n, false));
    }

    #[test]
    fn logsumexp_bounds(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let t = Tensor::vector(xs.clone());
        let mut tape = Tape::new();
        let v = tape.param(&t);
        let l = tape.logsumexp(v, 0).unwrap();
        let lse = tape.value(l).item();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lse >= max && lse <= max + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn pair_scores_ignore_mention_order(seed in any::<u64>(), a in 1usize..5, b in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_tensor(&mut rng, &[a, 4], 1.0);
        let t = random_tensor(&mut rng, &[b, 4], 1.0);
        let r = random_tensor(&mut rng, &[4, 3, 4], 1.0);
        let permute = |x: &Tensor, rng: &mut ChaCha8Rng| {
            let mut rows: Vec<usize> = (0..x.rows()).collect();
            rows.shuffle(rng);
            Tensor::new(x.shape().to_vec(), rows.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap()
        };
        let (h2, t2) = (permute(&h, &mut rng), permute(&t, &mut rng));
        let score = |h: &Tensor, t: &Tensor| {
            let mut tape = Tape::new();
            let (hv, tv, rv) = (tape.param(h), tape.param(t), tape.param(&r));
            let s = entity_pair_scores(&mut tape, hv, tv, rv).unwrap();
            tape.value(s).data().to_vec()
        };
        let (s1, s2) = (score(&h, &t), score(&h2, &t2));
        for (x, y) in s1.iter().zip(&s2) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        // duplicating a head mention adds between 0 and ln 2 to each score
        let mut dup = h.data().to_vec();
        dup.extend_from_slice(h.row(0));
        let s3 = score(&Tensor::new(vec![a + 1, 4], dup).unwrap(), &t);
        for (x, y) in s1.iter().zip(&s3) {
            prop_assert!(*y >= *x && *y <= *x + std::f64::consts::LN_2 + 1e-12);
        }
    }

    #[test]
    fn argmax_shift_invariant(xs in prop::collection::vec(-64i32..64, 1..10), c in -100i32..100) {
        let s: Vec<f64> = xs.iter().map(|&x| x as f64 / 8.0).collect();
        let shifted: Vec<f64> = s.iter().map(|x| x + c as f64).collect();
        let best = argmax(&s);
        prop_assert_eq!(argmax(&shifted), best);
        prop_assert!(s.iter().enumerate().all(|(i, &v)| v < s[best] || (v == s[best] && i >= best)));
    }

    #[test]
    fn clipped_norm_within_bound(vals in prop::collection::vec(-100.0f64..100.0, 2..30), c in 0.1f64..50.0) {
        let half = vals.len() / 2;
        let mut grads = vec![Some(Tensor::vector(vals[..half].to_vec())), None, Some(Tensor::vector(vals[half..].to_vec()))];
        let before = grads.clone();
        let norm = clip_global_norm(&mut grads, c);
        let after: f64 = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        prop_assert!((norm - vals.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() <= 1e-9 * norm.max(1.0));
        prop_assert!(after <= c * (1.0 + 1e-12));
        if norm <= c {
            prop_assert_eq!(grads, before);
        }
    }

    #[test]
    fn ema_closed_form(s0 in -5.0f64..5.0, p in -5.0f64..5.0, decay in 0.5f64..0.999, steps in 1u32..40) {
        let mut start = ParamStore::default();
        start.add("w", Tensor::vector(vec![s0]));
        let mut target = ParamStore::default();
        target.add("w", Tensor::vector(vec![p]));
        let mut ema = Ema::new(&start, decay, false);
        for _ in 0..steps {
            ema.update(&target);
        }
        let want = p + (s0 - p) * decay.powi(steps as i32);
        prop_assert!((ema.shadow.tensors()[0].data()[0] - want).abs() <= 1e-12);
    }

    #[test]
    fn report_ignores_order_and_partitions(labels in prop::collection::vec((0usize..3, 0usize..3, any::<bool>()), 0..40), seed in any::<u64>()) {
        let preds: Vec<Prediction> = labels
            .iter()
            .enumerate()
            .map(|(i, &(gold, predicted, intra))| Prediction {
                doc_id: "d".into(),
                head: format!("h{i}"),
                tail: "t".into(),
                gold,
                predicted,
                slice: if intra { Sentential::Intra } else { Sentential::Inter },
            })
            .collect();
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = report_from_predictions(&preds, "x");
        prop_assert_eq!(&r, &report_from_predictions(&shuffled, "x"));
        let (o, a, b) = (r.overall.counts, r.intra.counts, r.inter.counts);
        prop_assert_eq!((o.tp, o.fp, o.fn_), (a.tp + b.tp, a.fp + b.fp, a.fn_ + b.fn_));
    }
}

/// Undirected hop distances from `src` over all edges of `g`.
fn hops(g: &DocumentGraph, src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.n];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for e in &g.edges {
            for (a, b) in [(e.src, e.dst), (e.dst, e.src)] {
                if a == u && dist[b] == usize::MAX {
                    dist[b] = dist[u] + 1;
                    queue.push_back(b);
                }
            }
        }
    }
    dist
}

fn random_blocks<'a>(tape: &mut Tape<'a>, params: &'a [Tensor], vocab: &EdgeTypeVocabulary, k: usize) -> Vec<GcnnBlock> {
    let slots = vocab.slots();
    let mut it = params.chunks(4);
    (0..k)
        .map(|_| {
            let mut blk = GcnnBlock::default();
            for &slot in &slots {
                let p = it.next().expect("enough parameters");
                blk.slots.insert(
                    slot,
                    SlotParams {
                        w: tape.param(&p[0]),
                        b: tape.param(&p[1]),
                        gate_w: tape.param(&p[2]),
                        gate_b: tape.param(&p[3]),
                    },
                );
            }
            blk
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gcnn_is_local_and_pruning_is_exact(seed in any::<u64>(), k in 1usize..4) {
        let doc = random_doc(seed);
        let g = build_graph(&doc, &GraphOptions::default()).unwrap();
        let vocab = EdgeTypeVocabulary::fit([&g], 3, false);
        let plan = plan_messages(&g, &vocab);
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = (0..k * vocab.slots().len())
            .flat_map(|_| {
                [[d, d].as_slice(), &[d], &[d, 1], &[1]]
                    .map(|s| random_tensor(&mut rng, s, 0.8))
            })
            .collect();
        let x0 = random_tensor(&mut rng, &[g.n, d], 1.0);
        let target = rng.random_range(0..g.n);
        let opts = GcnnOptions { activation: Activation::Relu, gating: true, residual: true, dropout: 0.0 };

        let run = |x: &Tensor, targets: Option<&[usize]>| {
            let mut tape = Tape::new();
            let blocks = random_blocks(&mut tape, &params, &vocab, k);
            let xv = tape.param(x);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = gcnn_forward_planned(&mut tape, xv, &plan, g.n, &blocks, &opts, false, &mut r, targets).unwrap();
            tape.value(out).row(target).to_vec()
        };
        let full = run(&x0, None);
        let pruned = run(&x0, Some(&[target]));
        for (a, b) in full.iter().zip(&pruned) {
            prop_assert!((a - b).abs() <= 1e-12);
        }

        let dist = hops(&g, target);
        let far: Vec<usize> = (0..g.n).filter(|&j| dist[j] > k).collect();
        if !far.is_empty() {
            let mut x1 = x0.clone();
            for &j in &far {
                for c in 0..d {
                    x1.data_mut()[j * d + c] += 10.0;
                }
            }
            prop_assert_eq!(run(&x1, None), full);
        }
    }
}
