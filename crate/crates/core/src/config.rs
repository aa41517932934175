//! Experiment configuration: a line-oriented `key = value` file with `#`
//! comments, overridable key by key from the command line.
//!
//! Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `data_dir` | directory holding `{lang}-{split}.conllu` files | `data` |
//! | `syntax` | `gold` or `auto` (`{lang}-{split}.auto.conllu`) | `gold` |
//! | `features` | comma list of `word,lemma,pos` | `word,pos` |
//! | `context_vectors` | precomputed vector file; enables the context block | unset |
//! | `tree` | `treelstm`, `gcn` or `none` | `none` |
//! | `ho_checkpoint` | pretrained GNN checkpoint; enables the high-order block | unset |
//! | `encoder` | `pgn` or `basic` | `pgn` |
//! | `sources` | comma list of training languages | unset |
//! | `target` | evaluation language | unset |
//! | `lr`, `batch_size`, `epochs` | optimizer schedule | 0.001, 30, 80 or 300 |
//! | `alpha_p`, `alpha_a` | beam ratios | 0.4, 0.7 |
//! | `word_dim`, `lemma_dim`, `pos_dim` | embedding sizes | 300, 300, 100 |
//! | `tree_hidden`, `gcn_layers` | tree encoder sizes | 300, 2 |
//! | `lstm_hidden`, `lstm_layers`, `lang_dim` | encoder sizes | 650, 2, 8 |
//! | `repr_dim` | predicate/argument projection size | 300 |
//! | `dropout` | dropout on inputs and encoder outputs | 0.3 |
//! | `unary_weight` | weight of the unary beam-scorer loss | 1.0 |
//! | `min_count` | word/lemma frequency cutoff | 1 |
//! | `freeze_embeddings` | keep embedding tables at their initial values | false |
//! | `gold_beam_inject` | add gold positions to training beams | false |
//! | `seed` | run seed; `SRL_SEED` overrides the built-in default | 1 |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDims, FeatureFlags};
use crate::pgn::EncoderMode;
use crate::tree::TreeEncoderChoice;

pub const BILINGUAL_EPOCHS: usize = 80;
pub const MULTI_SOURCE_EPOCHS: usize = 300;

/// Architecture settings, stored next to every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub features: FeatureFlags,
    pub dims: FeatureDims,
    pub tree: TreeEncoderChoice,
    pub tree_hidden: usize,
    pub gcn_layers: usize,
    pub encoder: EncoderMode,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub lang_dim: usize,
    pub repr_dim: usize,
    pub dropout: f64,
    pub alpha_p: f64,
    pub alpha_a: f64,
    pub unary_weight: f64,
    pub freeze_embeddings: bool,
    pub gold_beam_inject: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureFlags {
                word: true,
                pos: true,
                ..FeatureFlags::default()
            },
            dims: FeatureDims::default(),
            tree: TreeEncoderChoice::None,
            tree_hidden: 300,
            gcn_layers: 2,
            encoder: EncoderMode::Pgn,
            lstm_hidden: 650,
            lstm_layers: 2,
            lang_dim: 8,
            repr_dim: 300,
            dropout: 0.3,
            alpha_p: 0.4,
            alpha_a: 0.7,
            unary_weight: 1.0,
            freeze_embeddings: false,
            gold_beam_inject: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Syntax {
    #[default]
    Gold,
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data_dir: PathBuf,
    pub syntax: Syntax,
    pub context_vectors: Option<PathBuf>,
    pub ho_checkpoint: Option<PathBuf>,
    pub sources: Vec<String>,
    pub target: Option<String>,
    pub lr: f64,
    pub batch_size: usize,
    /// Unset means 80 with one source and 300 with several.
    pub epochs: Option<usize>,
    pub min_count: usize,
    pub seed: u64,
}

/// `SRL_SEED` when set and numeric, otherwise 1.
pub fn default_seed() -> u64 {
    std::env::var("SRL_SEED")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(1)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data_dir: PathBuf::from("data"),
            syntax: Syntax::Gold,
            context_vectors: None,
            ho_checkpoint: None,
            sources: Vec::new(),
            target: None,
            lr: 0.001,
            batch_size: 30,
            epochs: None,
            min_count: 1,
            seed: default_seed(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_str_lines(&text)
    }

    pub fn from_str_lines(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "syntax" => {
                self.syntax = match value {
                    "gold" => Syntax::Gold,
                    "auto" => Syntax::Auto,
                    _ => return Err(Error::Config(format!("bad value `{value}` for `syntax`"))),
                }
            }
            "features" => {
                let f = FeatureFlags::parse_list(value)?;
                if f.context || f.tree || f.ho {
                    return Err(Error::Config(
                        "`features` lists word, lemma and pos; use context_vectors, tree and ho_checkpoint for the others"
                            .into(),
                    ));
                }
                m.features.word = f.word;
                m.features.lemma = f.lemma;
                m.features.pos = f.pos;
            }
            "context_vectors" => {
                self.context_vectors = (!value.is_empty()).then(|| PathBuf::from(value));
                m.features.context = self.context_vectors.is_some();
            }
            "tree" => {
                m.tree = value.parse()?;
                m.features.tree = m.tree != TreeEncoderChoice::None;
            }
            "ho_checkpoint" => {
                self.ho_checkpoint = (!value.is_empty()).then(|| PathBuf::from(value));
                m.features.ho = self.ho_checkpoint.is_some();
            }
            "encoder" => m.encoder = value.parse()?,
            "sources" => self.sources = list(value),
            "target" => self.target = (!value.is_empty()).then(|| value.to_string()),
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = Some(parse(key, value)?),
            "alpha_p" => m.alpha_p = parse(key, value)?,
            "alpha_a" => m.alpha_a = parse(key, value)?,
            "word_dim" => m.dims.word = parse(key, value)?,
            "lemma_dim" => m.dims.lemma = parse(key, value)?,
            "pos_dim" => m.dims.pos = parse(key, value)?,
            "tree_hidden" => m.tree_hidden = parse(key, value)?,
            "gcn_layers" => m.gcn_layers = parse(key, value)?,
            "lstm_hidden" => m.lstm_hidden = parse(key, value)?,
            "lstm_layers" => m.lstm_layers = parse(key, value)?,
            "lang_dim" => m.lang_dim = parse(key, value)?,
            "repr_dim" => m.repr_dim = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "unary_weight" => m.unary_weight = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "freeze_embeddings" => m.freeze_embeddings = parse_bool(key, value)?,
            "gold_beam_inject" => m.gold_beam_inject = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.sources.len() > 1 {
            MULTI_SOURCE_EPOCHS
        } else {
            BILINGUAL_EPOCHS
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        match m.encoder {
            EncoderMode::Pgn if self.sources.is_empty() => {
                return Err(Error::Config("pgn encoder needs at least one source language".into()))
            }
            EncoderMode::Basic if self.sources.len() != 1 => {
                return Err(Error::Config("basic encoder needs exactly one source language".into()))
            }
            _ => {}
        }
        for (name, a) in [("alpha_p", m.alpha_p), ("alpha_a", m.alpha_a)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !m.features.any() {
            return Err(Error::Feature("no input features".into()));
        }
        if m.features.tree && !m.features.any_base() {
            return Err(Error::Config("the tree encoder needs word, lemma, context or pos inputs".into()));
        }
        if m.tree == TreeEncoderChoice::Gcn && m.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be at least 1".into()));
        }
        Ok(())
    }

    /// Path of a split file for `lang` under the configured syntax source.
    pub fn corpus_path(&self, lang: &str, split: &str) -> PathBuf {
        let name = match self.syntax {
            Syntax::Gold => format!("{lang}-{split}.conllu"),
            Syntax::Auto => format!("{lang}-{split}.auto.conllu"),
        };
        self.data_dir.join(name)
    }

    /// Settings as `key = value` lines that `from_str_lines` reads back.
    pub fn to_lines(&self) -> String {
        let m = &self.model;
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        let mut feats = Vec::new();
        for (on, name) in [(m.features.word, "word"), (m.features.lemma, "lemma"), (m.features.pos, "pos")] {
            if on {
                feats.push(name);
            }
        }
        kv.insert("data_dir", self.data_dir.display().to_string());
        kv.insert(
            "syntax",
            match self.syntax {
                Syntax::Gold => "gold".into(),
                Syntax::Auto => "auto".into(),
            },
        );
        kv.insert("features", feats.join(","));
        if let Some(p) = &self.context_vectors {
            kv.insert("context_vectors", p.display().to_string());
        }
        kv.insert("tree", m.tree.to_string());
        if let Some(p) = &self.ho_checkpoint {
            kv.insert("ho_checkpoint", p.display().to_string());
        }
        kv.insert("encoder", m.encoder.to_string());
        kv.insert("sources", self.sources.join(","));
        if let Some(t) = &self.target {
            kv.insert("target", t.clone());
        }
        kv.insert("lr", self.lr.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        if let Some(e) = self.epochs {
            kv.insert("epochs", e.to_string());
        }
        kv.insert("alpha_p", m.alpha_p.to_string());
        kv.insert("alpha_a", m.alpha_a.to_string());
        kv.insert("word_dim", m.dims.word.to_string());
        kv.insert("lemma_dim", m.dims.lemma.to_string());
        kv.insert("pos_dim", m.dims.pos.to_string());
        kv.insert("tree_hidden", m.tree_hidden.to_string());
        kv.insert("gcn_layers", m.gcn_layers.to_string());
        kv.insert("lstm_hidden", m.lstm_hidden.to_string());
        kv.insert("lstm_layers", m.lstm_layers.to_string());
        kv.insert("lang_dim", m.lang_dim.to_string());
        kv.insert("repr_dim", m.repr_dim.to_string());
        kv.insert("dropout", m.dropout.to_string());
        kv.insert("unary_weight", m.unary_weight.to_string());
        kv.insert("min_count", self.min_count.to_string());
        kv.insert("freeze_embeddings", m.freeze_embeddings.to_string());
        kv.insert("gold_beam_inject", m.gold_beam_inject.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
