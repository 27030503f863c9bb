//! Training configuration and its flat `key = value` file format.
//!
//! Keys mirror the hyperparameter table names in snake case. Later sources
//! override earlier ones: defaults, then a config file, then `DOCRE_*`
//! environment variables, then command-line flags.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{KeepAll, PairFilter, PairTask, TypeConstraint};
use crate::error::{Error, Result};
use crate::graph::{parse_categories, CategoryClass, GraphOptions};

pub const ENV_PREFIX: &str = "DOCRE_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// How entity mention sets enter the bi-affine aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionPooling {
    /// Every token of every mention is an instance.
    Token,
    /// Each mention is one instance, the average of its tokens.
    Mention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    /// Pairs shuffled across the whole corpus.
    Global,
    /// Documents shuffled; a document's pairs stay contiguous.
    Document,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Retrain,
    Evaluate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub grad_clip: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub word_dimension: usize,
    pub position_dimension: usize,
    pub gcnn_dimension: usize,
    pub gcnn_blocks: usize,
    pub mil_dimension: usize,
    pub dropout_input: f64,
    pub dropout_gcnn: f64,
    pub dropout_mil: f64,
    pub residual: bool,
    pub top_n: usize,
    pub topn_syntactic_only: bool,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(decay, (1+t)/(10+t))`.
    pub ema_warmup: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub position_clamp: usize,
    pub edge_gating: bool,
    pub gcnn_activation: Activation,
    pub edge_categories: BTreeSet<CategoryClass>,
    pub coref_clique: bool,
    pub mention_pooling: MentionPooling,
    pub task: PairTask,
    /// `HEAD_TYPE:TAIL_TYPE` restricting candidate pairs; empty for none.
    pub pair_types: String,
    /// Relation labels (without "no relation"); empty to read them off the
    /// training corpus.
    pub relation_labels: Vec<String>,
    pub merge_train_dev: bool,
    pub batching: Batching,
    pub ablation_mode: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-4,
            lr_decay: 0.75,
            grad_clip: 10.0,
            patience: 5,
            max_epochs: 50,
            word_dimension: 100,
            position_dimension: 20,
            gcnn_dimension: 140,
            gcnn_blocks: 2,
            mil_dimension: 140,
            dropout_input: 0.1,
            dropout_gcnn: 0.05,
            dropout_mil: 0.05,
            residual: true,
            top_n: 4,
            topn_syntactic_only: false,
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            ema_decay: 0.999,
            ema_warmup: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            position_clamp: 64,
            edge_gating: true,
            gcnn_activation: Activation::Relu,
            edge_categories: CategoryClass::all(),
            coref_clique: false,
            mention_pooling: MentionPooling::Token,
            task: PairTask::Bidirectional,
            pair_types: String::new(),
            relation_labels: Vec::new(),
            merge_train_dev: false,
            batching: Batching::Global,
            ablation_mode: AblationMode::Retrain,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "learning_rate",
        "lr_decay",
        "grad_clip",
        "patience",
        "max_epochs",
        "word_dimension",
        "position_dimension",
        "gcnn_dimension",
        "gcnn_blocks",
        "mil_dimension",
        "dropout_input",
        "dropout_gcnn",
        "dropout_mil",
        "residual",
        "top_n",
        "topn_syntactic_only",
        "seed",
        "seeds",
        "ema_decay",
        "ema_warmup",
        "adam_beta1",
        "adam_beta2",
        "adam_epsilon",
        "position_clamp",
        "edge_gating",
        "gcnn_activation",
        "edge_categories",
        "coref_clique",
        "mention_pooling",
        "task",
        "pair_types",
        "relation_labels",
        "merge_train_dev",
        "batching",
        "ablation_mode",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "word_dimension" => self.word_dimension = parse_num(key, v)?,
            "position_dimension" => self.position_dimension = parse_num(key, v)?,
            "gcnn_dimension" => self.gcnn_dimension = parse_num(key, v)?,
            "gcnn_blocks" => self.gcnn_blocks = parse_num(key, v)?,
            "mil_dimension" => self.mil_dimension = parse_num(key, v)?,
            "dropout_input" => self.dropout_input = parse_num(key, v)?,
            "dropout_gcnn" => self.dropout_gcnn = parse_num(key, v)?,
            "dropout_mil" => self.dropout_mil = parse_num(key, v)?,
            "residual" => self.residual = parse_bool(key, v)?,
            "top_n" => self.top_n = parse_num(key, v)?,
            "topn_syntactic_only" => self.topn_syntactic_only = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "seeds" => {
                self.seeds = parse_list(v)
                    .iter()
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "ema_decay" => self.ema_decay = parse_num(key, v)?,
            "ema_warmup" => self.ema_warmup = parse_bool(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_epsilon" => self.adam_epsilon = parse_num(key, v)?,
            "position_clamp" => self.position_clamp = parse_num(key, v)?,
            "edge_gating" => self.edge_gating = parse_bool(key, v)?,
            "gcnn_activation" => {
                self.gcnn_activation = match v {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => return Err(Error::config(key, format!("unknown activation `{v}`"))),
                }
            }
            "edge_categories" => {
                self.edge_categories = parse_categories(v).map_err(|e| Error::config(key, e.to_string()))?
            }
            "coref_clique" => self.coref_clique = parse_bool(key, v)?,
            "mention_pooling" => {
                self.mention_pooling = match v {
                    "token" => MentionPooling::Token,
                    "mention" => MentionPooling::Mention,
                    _ => return Err(Error::config(key, format!("unknown pooling `{v}`"))),
                }
            }
            "task" => self.task = v.parse()?,
            "pair_types" => self.pair_types = v.to_string(),
            "relation_labels" => self.relation_labels = parse_list(v),
            "merge_train_dev" => self.merge_train_dev = parse_bool(key, v)?,
            "batching" => {
                self.batching = match v {
                    "global" => Batching::Global,
                    "document" => Batching::Document,
                    _ => return Err(Error::config(key, format!("unknown batching `{v}`"))),
                }
            }
            "ablation_mode" => {
                self.ablation_mode = match v {
                    "retrain" => AblationMode::Retrain,
                    "evaluate" => AblationMode::Evaluate,
                    _ => return Err(Error::config(key, format!("unknown ablation mode `{v}`"))),
                }
            }
            other => return Err(Error::config(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Textual value of one key, inverse of [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let join = |v: &[String]| v.join(",");
        Some(match key {
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "lr_decay" => format!("{:?}", self.lr_decay),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "patience" => self.patience.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "word_dimension" => self.word_dimension.to_string(),
            "position_dimension" => self.position_dimension.to_string(),
            "gcnn_dimension" => self.gcnn_dimension.to_string(),
            "gcnn_blocks" => self.gcnn_blocks.to_string(),
            "mil_dimension" => self.mil_dimension.to_string(),
            "dropout_input" => format!("{:?}", self.dropout_input),
            "dropout_gcnn" => format!("{:?}", self.dropout_gcnn),
            "dropout_mil" => format!("{:?}", self.dropout_mil),
            "residual" => self.residual.to_string(),
            "top_n" => self.top_n.to_string(),
            "topn_syntactic_only" => self.topn_syntactic_only.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => join(&self.seeds.iter().map(u64::to_string).collect::<Vec<_>>()),
            "ema_decay" => format!("{:?}", self.ema_decay),
            "ema_warmup" => self.ema_warmup.to_string(),
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_epsilon" => format!("{:?}", self.adam_epsilon),
            "position_clamp" => self.position_clamp.to_string(),
            "edge_gating" => self.edge_gating.to_string(),
            "gcnn_activation" => match self.gcnn_activation {
                Activation::Relu => "relu".into(),
                Activation::Identity => "identity".into(),
            },
            "edge_categories" => join(
                &self
                    .edge_categories
                    .iter()
                    .map(|c| c.name().to_string())
                    .collect::<Vec<_>>(),
            ),
            "coref_clique" => self.coref_clique.to_string(),
            "mention_pooling" => match self.mention_pooling {
                MentionPooling::Token => "token".into(),
                MentionPooling::Mention => "mention".into(),
            },
            "task" => match self.task {
                PairTask::Undirected => "undirected".into(),
                PairTask::Bidirectional => "bidirectional".into(),
            },
            "pair_types" => self.pair_types.clone(),
            "relation_labels" => join(&self.relation_labels),
            "merge_train_dev" => self.merge_train_dev.to_string(),
            "batching" => match self.batching {
                Batching::Global => "global".into(),
                Batching::Document => "document".into(),
            },
            "ablation_mode" => match self.ablation_mode {
                AblationMode::Retrain => "retrain".into(),
                AblationMode::Evaluate => "evaluate".into(),
            },
            _ => return None,
        })
    }

    /// Parses the flat format on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), "expected `key = value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `DOCRE_<KEY>` variables from an environment listing.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if Self::KEYS.contains(&key.as_str()) {
                    self.set(&key, &v)?;
                }
            }
        }
        Ok(())
    }

    /// Serializes every key in the flat format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in [
            ("dropout_input", self.dropout_input),
            ("dropout_gcnn", self.dropout_gcnn),
            ("dropout_mil", self.dropout_mil),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(k, format!("rate {p} outside [0, 1)")));
            }
        }
        for (k, d) in [
            ("batch_size", self.batch_size),
            ("word_dimension", self.word_dimension),
            ("position_dimension", self.position_dimension),
            ("gcnn_dimension", self.gcnn_dimension),
            ("mil_dimension", self.mil_dimension),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ] {
            if d == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1]"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta", "betas must lie in [0, 1)"));
        }
        if self.edge_categories.is_empty() {
            return Err(Error::config("edge_categories", "at least one category is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if !self.pair_types.is_empty() && !self.pair_types.contains(':') {
            return Err(Error::config("pair_types", "expected HEAD_TYPE:TAIL_TYPE"));
        }
        Ok(())
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            enabled: self.edge_categories.clone(),
            coref_clique: self.coref_clique,
        }
    }

    /// Candidate filter implied by `pair_types`.
    pub fn pair_filter(&self) -> Result<Box<dyn PairFilter>> {
        if self.pair_types.is_empty() {
            return Ok(Box::new(KeepAll));
        }
        let (h, t) = self
            .pair_types
            .split_once(':')
            .ok_or_else(|| Error::config("pair_types", "expected HEAD_TYPE:TAIL_TYPE"))?;
        Ok(Box::new(TypeConstraint {
            head_type: h.trim().to_string(),
            tail_type: t.trim().to_string(),
        }))
    }

    /// Input width `d_w + 2·d_p`.
    pub fn input_dimension(&self) -> usize {
        self.word_dimension + 2 * self.position_dimension
    }

    /// Short stable hash of the full configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.learning_rate, 5e-4);
        assert_eq!(c.lr_decay, 0.75);
        assert_eq!(c.grad_clip, 10.0);
        assert_eq!(c.patience, 5);
        assert_eq!((c.word_dimension, c.position_dimension, c.gcnn_dimension), (100, 20, 140));
        assert_eq!((c.gcnn_blocks, c.mil_dimension), (2, 140));
        assert_eq!((c.dropout_input, c.dropout_gcnn, c.dropout_mil), (0.1, 0.05, 0.05));
        assert!(c.residual);
        assert_eq!(c.top_n, 4);
        assert_eq!(c.seeds.len(), 5);
        assert_eq!(c.input_dimension(), 140);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig {
            learning_rate: 5e-3,
            ..Default::default()
        };
        c.edge_categories.remove(&CategoryClass::Coreference);
        c.relation_labels = vec!["reacts".into()];
        c.pair_types = "chem:disease".into();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn comments_env_and_errors() {
        let mut c = TrainConfig::from_text("# table values\nbatch_size = 8 # small\n").unwrap();
        assert_eq!(c.batch_size, 8);
        c.apply_env(vec![
            ("DOCRE_TOP_N".to_string(), "2".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ])
        .unwrap();
        assert_eq!(c.top_n, 2);
        assert!(matches!(TrainConfig::from_text("nope = 1"), Err(Error::Config { .. })));
        assert!(TrainConfig::from_text("residual = maybe").is_err());
        let bad = TrainConfig {
            dropout_gcnn: 1.0,
            ..Default::default()
        };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dropout_gcnn"),
            other => panic!("{other:?}"),
        }
    }
}
