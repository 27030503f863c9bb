//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{AblationMode, TrainConfig};
use crate::corpus::{ingest_jsonl, Document};
use crate::error::{Error, Result};
use crate::eval::{ablate, ablation_table, evaluate, report_table, sweep_table, sweep_topn, Experiment};
use crate::graph::{build_graph, graph_stats, parse_categories, EdgeTypeVocabulary};
use crate::synth::{gen_corpus, gen_kb, SynthOptions};
use crate::trainer::{run_seeds, train};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "docre", version, about = "Document-level relation extraction with edge-typed graph convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory receiving every output of the run.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Whitespace-separated pretrained word vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its best checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Remove one edge category at a time and compare with the full graph.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Categories to remove (`all` or a comma-separated list).
        #[arg(long, default_value = "all")]
        categories: String,
        /// `retrain` or `evaluate`; defaults to the configured mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train once per top-N value.
    SweepTopn {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,6")]
        values: Vec<usize>,
    },
    /// Build document graphs and report edge statistics.
    BuildGraph {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic corpus and its planted ground truth.
    GenSynth {
        #[arg(long, default_value_t = 200)]
        entities: usize,
        /// Defaults to half the number of entities.
        #[arg(long)]
        triples: Option<usize>,
        #[arg(long, default_value_t = 50)]
        docs: usize,
        #[arg(long, default_value_t = 0.5)]
        pct_inter: f64,
        #[arg(long, default_value_t = 0.5)]
        pct_coref_only: f64,
        #[arg(long, default_value_t = 2)]
        positives_per_doc: usize,
        #[arg(long, default_value_t = 3)]
        distractors_per_doc: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// KB seed; defaults to `seed`.
        #[arg(long)]
        kb_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with every configured seed and aggregate test metrics.
    RunSeeds {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

/// Runs the command line and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) if e.is_config() => {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn required<'p>(p: &'p Option<PathBuf>, field: &str) -> Result<&'p Path> {
    let p = p.as_deref().ok_or_else(|| Error::config(field, "required path is missing"))?;
    if !p.exists() {
        return Err(Error::config(field, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        if !path.exists() {
            return Err(Error::config("config", format!("{} does not exist", path.display())));
        }
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config("set", format!("`{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let (docs, report) = ingest_jsonl(path)?;
    if !report.is_clean() {
        log::warn!(
            "{}: {} dropped mention(s), {} document(s) with self relations removed",
            path.display(),
            report.total_dropped(),
            report.removed_self_relations.len()
        );
    }
    Ok(docs)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write(dir, name, serde_json::to_string_pretty(value)? + "\n")
}

struct Loaded {
    cfg: TrainConfig,
    train: Vec<Document>,
    dev: Vec<Document>,
}

fn load_experiment(data: &DataArgs, args: &ConfigArgs) -> Result<Loaded> {
    let train_path = required(&data.train, "train")?;
    let dev_path = required(&data.dev, "dev")?;
    if let Some(p) = &data.embeddings {
        required(&Some(p.clone()), "embeddings")?;
    }
    let cfg = load_config(args)?;
    write(&args.out_dir, "config.txt", cfg.to_text())?;
    Ok(Loaded {
        cfg,
        train: load_corpus(train_path)?,
        dev: load_corpus(dev_path)?,
    })
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { data, cfg } => {
            let l = load_experiment(&data, &cfg)?;
            let out = train(&l.cfg, &l.train, &l.dev, data.embeddings.as_deref())?;
            checkpoint::save(&out.model, &cfg.out_dir.join("checkpoint"), out.best_epoch, out.best_dev_f1)?;
            write(&cfg.out_dir, "metrics.jsonl", out.log_jsonl())?;
            let best = &out.log[out.best_epoch - 1].dev;
            write_json(&cfg.out_dir, "dev_report.json", best)?;
            println!("best epoch {} dev F1 {:.4}", out.best_epoch, out.best_dev_f1);
            print!("{}", report_table(&[("dev".into(), best)]));
        }
        Command::Eval { checkpoint: ckpt, data, out_dir } => {
            let dir = required(&ckpt, "checkpoint")?;
            let data = required(&data, "data")?;
            let (model, _) = checkpoint::load(dir)?;
            let docs = load_corpus(data)?;
            let report = evaluate(&model, &docs)?;
            write(&out_dir, "config.txt", model.config.to_text())?;
            write_json(&out_dir, "eval_report.json", &report)?;
            let table = report_table(&[("eval".into(), &report)]);
            write(&out_dir, "eval_report.txt", &table)?;
            println!("F1 {}", report.overall.f1);
            print!("{table}");
        }
        Command::Ablate { data, cfg, categories, mode } => {
            let mut l = load_experiment(&data, &cfg)?;
            if let Some(m) = mode {
                l.cfg.set("ablation_mode", &m)?;
                write(&cfg.out_dir, "config.txt", l.cfg.to_text())?;
            }
            let cats: Vec<_> = parse_categories(&categories)?.into_iter().collect();
            let exp = Experiment {
                train: &l.train,
                dev: &l.dev,
                embeddings: data.embeddings.as_deref(),
            };
            let report = ablate(&l.cfg, &exp, &cats, None)?;
            write_json(&cfg.out_dir, "ablation.json", &report)?;
            let table = ablation_table(&report);
            write(&cfg.out_dir, "ablation.txt", &table)?;
            if report.mode == AblationMode::Evaluate {
                println!("(evaluation-only ablation)");
            }
            print!("{table}");
        }
        Command::SweepTopn { data, cfg, values } => {
            let l = load_experiment(&data, &cfg)?;
            let exp = Experiment {
                train: &l.train,
                dev: &l.dev,
                embeddings: data.embeddings.as_deref(),
            };
            let rows = sweep_topn(&l.cfg, &exp, &values)?;
            write_json(&cfg.out_dir, "sweep.json", &rows)?;
            let table = sweep_table(&rows);
            write(&cfg.out_dir, "sweep.txt", &table)?;
            print!("{table}");
        }
        Command::BuildGraph { data, cfg } => {
            let path = required(&data, "data")?;
            let c = load_config(&cfg)?;
            write(&cfg.out_dir, "config.txt", c.to_text())?;
            let docs = load_corpus(path)?;
            let opts = c.graph_options();
            let mut graphs = Vec::with_capacity(docs.len());
            let mut lines = String::new();
            for d in &docs {
                let g = build_graph(d, &opts)?;
                lines += &(serde_json::to_string(&graph_stats(d, &g))? + "\n");
                graphs.push(g);
            }
            write(&cfg.out_dir, "graph_stats.jsonl", lines)?;
            let vocab = EdgeTypeVocabulary::fit(&graphs, c.top_n, c.topn_syntactic_only);
            write_json(&cfg.out_dir, "edge_types.json", &vocab)?;
            println!(
                "{} documents, {} edges, {} parameter slots at top-{}",
                docs.len(),
                graphs.iter().map(|g| g.edges.len()).sum::<usize>(),
                vocab.slots().len(),
                c.top_n
            );
        }
        Command::GenSynth {
            entities,
            triples,
            docs,
            pct_inter,
            pct_coref_only,
            positives_per_doc,
            distractors_per_doc,
            seed,
            kb_seed,
            out,
        } => {
            let out = out.ok_or_else(|| Error::config("out", "required path is missing"))?;
            let kb = gen_kb(entities, triples.unwrap_or((entities / 2).max(1)), kb_seed.unwrap_or(seed))?;
            let opts = SynthOptions {
                n_docs: docs,
                pct_inter,
                pct_coref_only,
                positives_per_doc,
                distractors_per_doc,
                seed,
            };
            let corpus = gen_corpus(&kb, &opts)?;
            fs::write(&out, corpus.to_jsonl()).map_err(|e| Error::io(&out, e))?;
            let mut sidecar = out.clone().into_os_string();
            sidecar.push(".truth.json");
            let sidecar = PathBuf::from(sidecar);
            let text = serde_json::to_string_pretty(&serde_json::json!({
                "entities": entities,
                "triples": kb.triples.len(),
                "docs": docs,
                "pct_inter": pct_inter,
                "pct_coref_only": pct_coref_only,
                "positives_per_doc": positives_per_doc,
                "distractors_per_doc": distractors_per_doc,
                "seed": seed,
                "kb_seed": kb_seed.unwrap_or(seed),
                "truth": corpus.truth,
            }))?;
            fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))?;
            println!("wrote {} documents to {}", corpus.docs.len(), out.display());
        }
        Command::RunSeeds { data, cfg, test, seeds } => {
            let mut l = load_experiment(&data, &cfg)?;
            if !seeds.is_empty() {
                l.cfg.seeds = seeds;
                write(&cfg.out_dir, "config.txt", l.cfg.to_text())?;
            }
            let test_docs = match &test {
                Some(_) => load_corpus(required(&test, "test")?)?,
                None => l.dev.clone(),
            };
            let summary = run_seeds(&l.cfg, &l.train, &l.dev, &test_docs, data.embeddings.as_deref())?;
            write_json(&cfg.out_dir, "seeds.json", &summary)?;
            let table = summary.table();
            write(&cfg.out_dir, "seeds.txt", &table)?;
            print!("{table}");
            if summary.failures == summary.runs.len() {
                return Err(Error::Invariant("every seed failed".into()));
            }
        }
    }
    Ok(())
}
