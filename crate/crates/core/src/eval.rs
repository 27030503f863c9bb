//! Precision/recall/F1, intra/inter-sentence breakdown, ablations and the
//! top-N sweep.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::argmax;
use crate::config::{AblationMode, TrainConfig};
use crate::corpus::{generate_pairs, Document, PairFilter, PairInstance, PairTask, RelationVocab};
use crate::error::{Error, Result};
use crate::graph::{CategoryClass, GraphOptions};
use crate::model::{Model, ParamStore, PreparedDoc};
use crate::trainer::{train, TrainOutcome};

/// True/false positive and false negative tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    /// Tally of one prediction; category 0 is "no relation".
    pub fn of(gold: usize, predicted: usize) -> Self {
        let mut c = Counts::default();
        if predicted != 0 && predicted == gold {
            c.tp = 1;
        } else {
            if predicted != 0 {
                c.fp = 1;
            }
            if gold != 0 {
                c.fn_ = 1;
            }
        }
        c
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)`, computed as `2tp/(2tp+fp+fn)` to keep a single rounding.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for SliceMetrics {
    fn from(counts: Counts) -> Self {
        SliceMetrics {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: SliceMetrics,
    pub intra: SliceMetrics,
    pub inter: SliceMetrics,
    pub pairs: usize,
    pub fingerprint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentential {
    Intra,
    Inter,
}

/// Intra when some head mention and some tail mention share a sentence.
pub fn split_intra_inter(pair: &PairInstance, doc: &Document) -> Sentential {
    let sentences = |spans: &[crate::corpus::Span]| -> BTreeSet<usize> {
        spans.iter().filter_map(|s| doc.sentence_of(s.start())).collect()
    };
    let h = sentences(&pair.head_spans);
    if sentences(&pair.tail_spans).iter().any(|s| h.contains(s)) {
        Sentential::Intra
    } else {
        Sentential::Inter
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub head: String,
    pub tail: String,
    pub gold: usize,
    pub predicted: usize,
    pub slice: Sentential,
}

pub fn report_from_predictions(preds: &[Prediction], fingerprint: &str) -> EvalReport {
    let (mut all, mut intra, mut inter) = (Counts::default(), Counts::default(), Counts::default());
    for p in preds {
        let c = Counts::of(p.gold, p.predicted);
        all.add(c);
        match p.slice {
            Sentential::Intra => intra.add(c),
            Sentential::Inter => inter.add(c),
        }
    }
    EvalReport {
        overall: all.into(),
        intra: intra.into(),
        inter: inter.into(),
        pairs: preds.len(),
        fingerprint: fingerprint.to_string(),
    }
}

/// All candidate pairs of the prepared documents, in document order.
pub fn candidate_pairs(model: &Model, preps: &[PreparedDoc]) -> Result<Vec<(usize, PairInstance)>> {
    let filter = model.config.pair_filter()?;
    let mut out = Vec::new();
    for (d, prep) in preps.iter().enumerate() {
        for g in &prep.doc.gold_relations {
            if model.relations.index(&g.label).is_none() {
                return Err(Error::Eval(format!(
                    "relation `{}` in document {} is unknown to the model",
                    g.label, prep.doc.doc_id
                )));
            }
        }
        let pairs = generate_pairs(&prep.doc, model.config.task, &model.relations, filter.as_ref())?;
        out.extend(pairs.into_iter().map(|p| (d, p)));
    }
    Ok(out)
}

/// Predicts every candidate pair with the given parameters.
pub fn predict(model: &Model, params: &ParamStore, preps: &[PreparedDoc]) -> Result<Vec<Prediction>> {
    let pairs = candidate_pairs(model, preps)?;
    pairs
        .par_iter()
        .map(|(d, pair)| {
            let prep = &preps[*d];
            let scores = model.scores_with(params, prep, pair)?;
            Ok(Prediction {
                doc_id: pair.doc_id.clone(),
                head: pair.head_entity_id.clone(),
                tail: pair.tail_entity_id.clone(),
                gold: pair.label,
                predicted: argmax(&scores),
                slice: split_intra_inter(pair, &prep.doc),
            })
        })
        .collect()
}

/// Evaluates an arbitrary predictor over the candidate pairs of `docs`.
pub fn evaluate_by<F>(
    docs: &[Document],
    relations: &RelationVocab,
    task: PairTask,
    filter: &dyn PairFilter,
    fingerprint: &str,
    predict: F,
) -> Result<EvalReport>
where
    F: Fn(&Document, &PairInstance) -> Result<usize>,
{
    let mut preds = Vec::new();
    for doc in docs {
        for pair in generate_pairs(doc, task, relations, filter)? {
            let predicted = predict(doc, &pair)?;
            if predicted >= relations.len() {
                return Err(Error::Eval(format!("prediction {predicted} outside the relation vocabulary")));
            }
            preds.push(Prediction {
                doc_id: pair.doc_id.clone(),
                head: pair.head_entity_id.clone(),
                tail: pair.tail_entity_id.clone(),
                gold: pair.label,
                predicted,
                slice: split_intra_inter(&pair, doc),
            });
        }
    }
    Ok(report_from_predictions(&preds, fingerprint))
}

pub fn evaluate_prepared(model: &Model, params: &ParamStore, preps: &[PreparedDoc]) -> Result<EvalReport> {
    let preds = predict(model, params, preps)?;
    Ok(report_from_predictions(&preds, &model.config.fingerprint()))
}

/// Evaluates `model` on `docs` with graphs built from `opts`.
pub fn evaluate_with_graph(model: &Model, docs: &[Document], opts: &GraphOptions) -> Result<EvalReport> {
    let preps = model.prepare_all(docs, opts)?;
    evaluate_prepared(model, &model.params, &preps)
}

pub fn evaluate(model: &Model, docs: &[Document]) -> Result<EvalReport> {
    evaluate_with_graph(model, docs, &model.config.graph_options())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub category: CategoryClass,
    pub report: EvalReport,
    pub delta_overall: f64,
    pub delta_intra: f64,
    pub delta_inter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub full: EvalReport,
    pub rows: Vec<AblationRow>,
}

/// Inputs shared by every training run of an experiment.
#[derive(Clone, Copy, Debug)]
pub struct Experiment<'a> {
    pub train: &'a [Document],
    pub dev: &'a [Document],
    pub embeddings: Option<&'a Path>,
}

impl Experiment<'_> {
    pub fn run(&self, config: &TrainConfig) -> Result<TrainOutcome> {
        train(config, self.train, self.dev, self.embeddings)
    }
}

/// Dev-set effect of removing each category in `categories` from the graph.
///
/// `full` is the already trained full model; it is trained here when absent.
pub fn ablate(
    config: &TrainConfig,
    exp: &Experiment<'_>,
    categories: &[CategoryClass],
    full: Option<&Model>,
) -> Result<AblationReport> {
    for c in categories {
        if config.edge_categories.iter().all(|e| e == c) {
            return Err(Error::config("edge_categories", format!("removing {c} leaves an empty graph")));
        }
    }
    let trained;
    let full = match full {
        Some(m) => m,
        None => {
            trained = exp.run(config)?;
            &trained.model
        }
    };
    let base = evaluate(full, exp.dev)?;
    let mut rows = Vec::new();
    for &c in categories {
        let mut cfg = config.clone();
        cfg.edge_categories.remove(&c);
        let report = match config.ablation_mode {
            AblationMode::Retrain => {
                let out = exp.run(&cfg)?;
                evaluate(&out.model, exp.dev)?
            }
            AblationMode::Evaluate => {
                let mut r = evaluate_with_graph(full, exp.dev, &cfg.graph_options())?;
                r.fingerprint = cfg.fingerprint();
                r
            }
        };
        log::info!("ablation {c}: F1 {:.4} (full {:.4})", report.overall.f1, base.overall.f1);
        rows.push(AblationRow {
            category: c,
            delta_overall: report.overall.f1 - base.overall.f1,
            delta_intra: report.intra.f1 - base.intra.f1,
            delta_inter: report.inter.f1 - base.inter.f1,
            report,
        });
    }
    Ok(AblationReport {
        mode: config.ablation_mode,
        full: base,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub top_n: usize,
    pub slots: usize,
    pub best_epoch: usize,
    pub report: EvalReport,
}

/// One training run per N, rows sorted by N.
pub fn sweep_topn(config: &TrainConfig, exp: &Experiment<'_>, values: &[usize]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("top_n", "no values to sweep"));
    }
    let mut ns = values.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let mut rows = Vec::new();
    for n in ns {
        let mut cfg = config.clone();
        cfg.top_n = n;
        let out = exp.run(&cfg)?;
        let report = evaluate(&out.model, exp.dev)?;
        rows.push(SweepRow {
            top_n: n,
            slots: out.model.slot_count(),
            best_epoch: out.best_epoch,
            report,
        });
    }
    Ok(rows)
}

/// Aligned text table with one row per named report.
pub fn report_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>9}  {:>9}\n",
        "Model", "P", "R", "F1", "Intra-F1", "Inter-F1"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>9.2}  {:>9.2}",
            name,
            100.0 * r.overall.precision,
            100.0 * r.overall.recall,
            100.0 * r.overall.f1,
            100.0 * r.intra.f1,
            100.0 * r.inter.f1,
        );
    }
    out
}

pub fn ablation_table(report: &AblationReport) -> String {
    let mut rows = vec![("Full".to_string(), &report.full)];
    rows.extend(report.rows.iter().map(|r| (format!("- {}", r.category), &r.report)));
    report_table(&rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>5}  {:>6}  {:>7}  {:>9}  {:>9}\n", "top-N", "slots", "F1", "Intra-F1", "Inter-F1");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5}  {:>6}  {:>7.2}  {:>9.2}  {:>9.2}",
            r.top_n,
            r.slots,
            100.0 * r.report.overall.f1,
            100.0 * r.report.intra.f1,
            100.0 * r.report.inter.f1,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_from_counts() {
        let c = Counts { tp: 2, fp: 1, fn_: 2 };
        assert_eq!(c.precision(), 2.0 / 3.0);
        assert_eq!(c.recall(), 0.5);
        assert!((c.f1() - 4.0 / 7.0).abs() < 1e-15);
        let none = Counts { tp: 0, fp: 0, fn_: 3 };
        assert_eq!((none.precision(), none.recall(), none.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wrong_category_is_both_fp_and_fn() {
        assert_eq!(Counts::of(1, 2), Counts { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(Counts::of(0, 0), Counts::default());
        assert_eq!(Counts::of(2, 2), Counts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(Counts::of(0, 1), Counts { tp: 0, fp: 1, fn_: 0 });
        assert_eq!(Counts::of(1, 0), Counts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn table_has_a_row_per_report() {
        let r = report_from_predictions(&[], "x");
        let t = report_table(&[("a".into(), &r), ("b".into(), &r)]);
        assert_eq!(t.lines().count(), 3);
    }
}
