//! Adam with an exponential moving average of the weights, per-epoch
//! learning-rate decay, global-norm clipping and early stopping on dev F1.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Batching, TrainConfig};
use crate::corpus::{Document, RelationVocab};
use crate::encoder::{load_pretrained, WordVocab};
use crate::error::{Error, Result};
use crate::eval::{candidate_pairs, evaluate_prepared, EvalReport};
use crate::graph::{build_graph, EdgeTypeVocabulary};
use crate::model::{Model, ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Scales all gradients by `c / g` when their joint L2 norm `g` exceeds `c`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], c: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > c {
        let s = c / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1,
            beta2,
            epsilon,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Missing gradients count as zero.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref().map(Tensor::data);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Shadow copy of the parameters tracking their exponential moving average.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub warmup: bool,
    pub shadow: ParamStore,
    updates: u64,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f64, warmup: bool) -> Self {
        Ema {
            decay,
            warmup,
            shadow: params.clone(),
            updates: 0,
        }
    }

    /// Decay used for the next update.
    pub fn current_decay(&self) -> f64 {
        if self.warmup {
            let t = self.updates as f64;
            self.decay.min((1.0 + t) / (10.0 + t))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, params: &ParamStore) {
        let d = self.current_decay();
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        self.updates += 1;
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch's score; returns true if it is the new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub dev: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model holding the best epoch's EMA weights.
    pub model: Model,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub log: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Metrics log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
            .collect()
    }
}

/// Independent random stream for `(seed, a, b)`.
pub fn derived_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut x = seed;
    for v in [a, b] {
        x = splitmix(x ^ splitmix(v));
    }
    ChaCha8Rng::seed_from_u64(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds vocabularies from the training split and a freshly initialised model.
pub fn init_model(config: &TrainConfig, train: &[Document], embeddings: Option<&Path>) -> Result<Model> {
    let relations = if config.relation_labels.is_empty() {
        RelationVocab::from_documents(train)
    } else {
        RelationVocab::new(&config.relation_labels)
    };
    let words = WordVocab::build(train);
    let opts = config.graph_options();
    let graphs = train.iter().map(|d| build_graph(d, &opts)).collect::<Result<Vec<_>>>()?;
    let edges = EdgeTypeVocabulary::fit(&graphs, config.top_n, config.topn_syntactic_only);
    let mut model = Model::new(config.clone(), words, edges, relations, config.seed)?;
    if let Some(path) = embeddings {
        let id = model.word_embedding_id();
        let hits = load_pretrained(path, &model.words.clone(), model.params.get_mut(id))?;
        log::info!("loaded {hits} pretrained word vectors");
    }
    Ok(model)
}

/// Trains on `train`, selecting the epoch by F1 on `dev`.
pub fn train(config: &TrainConfig, train: &[Document], dev: &[Document], embeddings: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Precondition("training and development splits must be non-empty".into()));
    }
    let merged: Vec<Document>;
    let train = if config.merge_train_dev {
        merged = train.iter().chain(dev).cloned().collect();
        &merged[..]
    } else {
        train
    };
    let mut model = init_model(config, train, embeddings)?;
    let opts = config.graph_options();
    let train_preps = model.prepare_all(train, &opts)?;
    let dev_preps = model.prepare_all(dev, &opts)?;
    let pairs = candidate_pairs(&model, &train_preps)?;
    if pairs.is_empty() {
        return Err(Error::Precondition("training split has no candidate pairs".into()));
    }

    let mut adam = Adam::new(model.params.tensors(), config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut ema = Ema::new(&model.params, config.ema_decay, config.ema_warmup);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = ema.shadow.clone();
    let mut log = Vec::new();
    let mut lr = config.learning_rate;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(config, &pairs, epoch);
        let (mut loss_sum, mut max_norm) = (0.0, 0.0f64);
        for (b, batch) in batches.iter().enumerate() {
            let results: Vec<Result<(f64, ParamGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let (d, pair) = &pairs[i];
                    let mut rng = derived_rng(config.seed, epoch as u64, i as u64);
                    model.loss_and_grads(&train_preps[*d], pair, true, &mut rng)
                })
                .collect();
            let diverged = |msg: String| Error::Divergence { epoch, batch: b, msg };
            let mut grads: ParamGrads = vec![None; model.params.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r.map_err(|e| diverged(e.to_string()))?;
                batch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(g) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(diverged(format!("loss {batch_loss}")));
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.scale_assign(scale);
            }
            let norm = clip_global_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm {norm}")));
            }
            max_norm = max_norm.max(norm);
            loss_sum += batch_loss;
            adam.update(model.params.tensors_mut(), &grads, lr);
            ema.update(&model.params);
        }

        let dev_report = evaluate_prepared(&model, &ema.shadow, &dev_preps)?;
        let f1 = dev_report.overall.f1;
        log::info!(
            "epoch {epoch}: loss {:.5} lr {lr:.3e} dev F1 {f1:.4}",
            loss_sum / pairs.len() as f64
        );
        log.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / pairs.len() as f64,
            learning_rate: lr,
            max_grad_norm: max_norm,
            dev: dev_report,
        });
        if stopper.observe(epoch, f1) {
            best_params = ema.shadow.clone();
        }
        lr *= config.lr_decay;
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_dev_f1) = stopper.best().expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_dev_f1,
        log,
        stopped_early,
    })
}

/// Pair indices grouped into the batches of one epoch.
fn make_batches<P>(config: &TrainConfig, pairs: &[(usize, P)], epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = derived_rng(config.seed, epoch as u64, u64::MAX);
    match config.batching {
        Batching::Global => {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
        }
        Batching::Document => {
            let mut docs: Vec<Vec<usize>> = Vec::new();
            for (i, (d, _)) in pairs.iter().enumerate() {
                if docs.last().is_none_or(|g| pairs[g[0]].0 != *d) {
                    docs.push(Vec::new());
                }
                docs.last_mut().expect("just pushed").push(i);
            }
            docs.shuffle(&mut rng);
            let mut batches = Vec::new();
            let mut cur = Vec::new();
            for g in docs {
                if !cur.is_empty() && cur.len() + g.len() > config.batch_size {
                    batches.push(std::mem::take(&mut cur));
                }
                cur.extend(g);
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
            batches
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: Vec<SeedRun>,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub failures: usize,
}

impl SeedSummary {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let ok: Vec<&EvalReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
        let stat = |f: fn(&EvalReport) -> f64| MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        SeedSummary {
            precision: stat(|r| r.overall.precision),
            recall: stat(|r| r.overall.recall),
            f1: stat(|r| r.overall.f1),
            failures: runs.len() - ok.len(),
            runs,
        }
    }

    pub fn table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = format!("{:>6}  {:>5}  {:>7}  {:>7}  {:>7}\n", "seed", "epoch", "P", "R", "F1");
        for r in &self.runs {
            match (&r.report, &r.error) {
                (Some(rep), _) => {
                    let _ = writeln!(
                        out,
                        "{:>6}  {:>5}  {:>7.2}  {:>7.2}  {:>7.2}",
                        r.seed,
                        r.best_epoch.unwrap_or(0),
                        100.0 * rep.overall.precision,
                        100.0 * rep.overall.recall,
                        100.0 * rep.overall.f1
                    );
                }
                (None, e) => {
                    let _ = writeln!(out, "{:>6}  FAILED: {}", r.seed, e.as_deref().unwrap_or("unknown"));
                }
            }
        }
        if let (Some(p), Some(r), Some(f)) = (self.precision, self.recall, self.f1) {
            let _ = writeln!(
                out,
                "{:>6}  {:>5}  {:>7}  {:>7}  {:>7}",
                "mean",
                "",
                format!("{:.2}", 100.0 * p.mean),
                format!("{:.2}", 100.0 * r.mean),
                format!("{:.2}", 100.0 * f.mean)
            );
            let _ = writeln!(
                out,
                "{:>6}  {:>5}  {:>7}  {:>7}  {:>7}",
                "std",
                "",
                format!("{:.2}", 100.0 * p.std),
                format!("{:.2}", 100.0 * r.std),
                format!("{:.2}", 100.0 * f.std)
            );
        }
        out
    }
}

/// Trains once per configured seed and evaluates each best model on `test`.
/// A failing seed is recorded rather than aborting the others.
pub fn run_seeds(config: &TrainConfig, train_docs: &[Document], dev: &[Document], test: &[Document], embeddings: Option<&Path>) -> Result<SeedSummary> {
    if config.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let runs = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            let result = train(&cfg, train_docs, dev, embeddings).and_then(|out| {
                let r = crate::eval::evaluate(&out.model, test)?;
                Ok((out.best_epoch, r))
            });
            match result {
                Ok((epoch, report)) => SeedRun {
                    seed,
                    best_epoch: Some(epoch),
                    report: Some(report),
                    error: None,
                },
                Err(e) => {
                    log::warn!("seed {seed} failed: {e}");
                    SeedRun {
                        seed,
                        best_epoch: None,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(SeedSummary::from_runs(runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut g = vec![Some(Tensor::vector(vec![30.0, 40.0])), None];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert_eq!(g[0].as_ref().unwrap().data(), &[6.0, 8.0]);
        let mut g = vec![Some(Tensor::vector(vec![3.0, 4.0]))];
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.update(&mut p, &[Some(Tensor::vector(vec![0.5]))], 0.1);
        adam.update(&mut p, &[Some(Tensor::vector(vec![-0.2]))], 0.1);

        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in [(1, 0.5f64), (2, -0.2)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].data()[0] - w).abs() < 1e-15);
        assert!((w - 0.865_439_418).abs() < 1e-9);
    }

    #[test]
    fn zero_gradients_leave_parameters_and_ema_fixed() {
        let mut store = ParamStore::default();
        store.add("w", Tensor::vector(vec![0.3, -0.7]));
        let mut adam = Adam::new(store.tensors(), 0.9, 0.999, 1e-8);
        let mut ema = Ema::new(&store, 0.999, true);
        for _ in 0..5 {
            adam.update(store.tensors_mut(), &[Some(Tensor::vector(vec![0.0, 0.0]))], 0.01);
            ema.update(&store);
        }
        assert_eq!(store.get(0).data(), &[0.3, -0.7]);
        assert_eq!(ema.shadow.get(0).data(), &[0.3, -0.7]);
    }

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopping::new(5);
        let mut stopped = None;
        for (i, f) in [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6].into_iter().enumerate() {
            s.observe(i + 1, f);
            if s.should_stop() {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(7));
        assert_eq!(s.best(), Some((2, 0.6)));
    }

    #[test]
    fn mean_of_two_seeds() {
        let m = MeanStd::of(&[0.5, 0.7]).unwrap();
        assert!((m.mean - 0.6).abs() < 1e-15);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn derived_streams_differ() {
        use rand::Rng;
        let a: u64 = derived_rng(1, 2, 3).random();
        let b: u64 = derived_rng(1, 3, 2).random();
        let c: u64 = derived_rng(1, 2, 3).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
