//! Vocabularies, embedding tables, precomputed contextual vectors and the
//! per-token input concatenation.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xsrl_tensor::{Axis, ParamId, Params, Tape, Tensor, Var};

use crate::conllu::{Corpus, Sentence};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_SYMBOL: &str = "<pad>";
pub const UNK_SYMBOL: &str = "<unk>";

/// Symbol table with `PAD = 0` and `UNK = 1`; unseen symbols map to UNK.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    symbols: Vec<String>,
    min_count: usize,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            symbols: r.symbols,
            index,
            min_count: r.min_count,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            symbols: v.symbols,
            min_count: v.min_count,
        }
    }
}

impl Vocabulary {
    /// Keeps symbols seen at least `min_count` times, in iteration order.
    pub fn from_counts<'a>(counts: impl IntoIterator<Item = (&'a str, usize)>, min_count: usize) -> Self {
        let mut symbols = vec![PAD_SYMBOL.to_string(), UNK_SYMBOL.to_string()];
        symbols.extend(
            counts
                .into_iter()
                .filter(|&(_, c)| c >= min_count)
                .map(|(s, _)| s.to_string()),
        );
        VocabRepr { symbols, min_count }.into()
    }

    /// A closed inventory: every listed symbol is kept.
    pub fn closed<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Self {
        let uniq: BTreeSet<&str> = symbols.into_iter().collect();
        Self::from_counts(uniq.into_iter().map(|s| (s, 1)), 1)
    }

    pub fn get(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }
}

/// Ordered label inventory without reserved entries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        Self {
            labels: set.into_iter().collect(),
        }
    }

    /// Keeps the given order; duplicates are dropped.
    pub fn ordered<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        let mut out: Vec<String> = Vec::new();
        for l in labels {
            let l = l.into();
            if !out.contains(&l) {
                out.push(l);
            }
        }
        Self { labels: out }
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub word: Vocabulary,
    pub lemma: Vocabulary,
    pub upos: Vocabulary,
    pub deprel: Vocabulary,
    /// Role labels; the null label is not part of this set.
    pub roles: LabelSet,
    pub languages: LabelSet,
}

/// Words and lemmas below `min_count` fall back to UNK; tag inventories,
/// roles and languages are closed.
pub fn build_vocabularies(corpus: &Corpus, min_count: usize) -> Result<Vocabularies> {
    if corpus.is_empty() {
        return Err(Error::Feature("cannot build vocabularies from an empty corpus".into()));
    }
    let tokens = || corpus.sentences.iter().flat_map(|s| &s.tokens);
    Ok(Vocabularies {
        word: Vocabulary::from_counts(
            corpus.word_counts.iter().map(|(w, &c)| (w.as_str(), c)),
            min_count,
        ),
        lemma: Vocabulary::from_counts(
            corpus.lemma_counts.iter().map(|(w, &c)| (w.as_str(), c)),
            min_count,
        ),
        upos: Vocabulary::closed(tokens().map(|t| t.upos.as_str())),
        deprel: Vocabulary::closed(tokens().map(|t| t.deprel.as_str())),
        roles: LabelSet::new(corpus.labels.iter().cloned()),
        languages: LabelSet::new(corpus.languages().map(str::to_string)),
    })
}

/// A trainable `rows × dim` lookup table.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Rows are uniform in `[-sqrt(3/dim), sqrt(3/dim)]`.
    pub fn new<R: Rng>(params: &mut Params, name: &str, rows: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Feature(format!("embedding `{name}` needs a positive dimension")));
        }
        let bound = (3.0 / dim as f64).sqrt();
        let param = params.add(name, Tensor::uniform(&[rows, dim], bound, rng))?;
        Ok(Self { param, rows, dim })
    }

    pub fn lookup(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.param);
        Ok(tape.embedding(table, ids)?)
    }
}

/// Frozen per-token vectors keyed by `(sentence_id, token_index)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextVectorStore {
    pub dim: usize,
    vectors: HashMap<(String, usize), Vec<f64>>,
}

impl ContextVectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, sentence_id: &str, token: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::ContextVectors(format!(
                "({sentence_id},{token}) has {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        let key = (sentence_id.to_string(), token);
        if self.vectors.contains_key(&key) {
            return Err(Error::ContextVectors(format!(
                "duplicate key ({sentence_id},{token})"
            )));
        }
        self.vectors.insert(key, v);
        Ok(())
    }

    pub fn get(&self, sentence_id: &str, token: usize) -> Option<&[f64]> {
        self.vectors
            .get(&(sentence_id.to_string(), token))
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Reads `#dim=D` then `sentence_id<TAB>token_index<TAB>floats` records.
pub fn load_context_vectors<R: BufRead>(reader: R) -> Result<ContextVectorStore> {
    let mut lines = reader.lines().enumerate();
    let dim = loop {
        let Some((_, line)) = lines.next() else {
            return Err(Error::ContextVectors("missing `#dim=D` header".into()));
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dim = line
            .trim()
            .strip_prefix("#dim=")
            .ok_or_else(|| Error::ContextVectors("missing `#dim=D` header".into()))?;
        break dim
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::ContextVectors(format!("bad dimension `{dim}`")))?;
    };
    let mut store = ContextVectorStore::new(dim);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.splitn(3, '\t');
        let (Some(sid), Some(tok), Some(vals)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::ContextVectors(format!("line {}: expected 3 tab-separated fields", i + 1)));
        };
        let tok: usize = tok
            .parse()
            .map_err(|_| Error::ContextVectors(format!("line {}: bad token index `{tok}`", i + 1)))?;
        let v = vals
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::ContextVectors(format!("({sid},{tok}): non-numeric value")))?;
        store.insert(sid, tok, v)?;
    }
    Ok(store)
}

/// Which blocks enter the token input. Block order is fixed:
/// word, lemma, context, pos, tree, high-order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub word: bool,
    pub lemma: bool,
    pub context: bool,
    pub pos: bool,
    pub tree: bool,
    pub ho: bool,
}

impl FeatureFlags {
    /// Parses a comma-separated list such as `word,pos,tree`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut f = FeatureFlags::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "word" => f.word = true,
                "lemma" => f.lemma = true,
                "context" => f.context = true,
                "pos" => f.pos = true,
                "tree" => f.tree = true,
                "ho" => f.ho = true,
                other => return Err(Error::Feature(format!("unknown feature `{other}`"))),
            }
        }
        Ok(f)
    }

    pub fn any_base(&self) -> bool {
        self.word || self.lemma || self.context || self.pos
    }

    pub fn any(&self) -> bool {
        self.any_base() || self.tree || self.ho
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub word: usize,
    pub lemma: usize,
    pub pos: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            word: 300,
            lemma: 300,
            pos: 100,
        }
    }
}

/// Embedding tables and frozen stores for the enabled feature blocks.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub flags: FeatureFlags,
    pub word: Option<EmbeddingTable>,
    pub lemma: Option<EmbeddingTable>,
    pub pos: Option<EmbeddingTable>,
    pub context: Option<ContextVectorStore>,
}

impl FeatureBank {
    pub fn new<R: Rng>(
        params: &mut Params,
        vocabs: &Vocabularies,
        flags: FeatureFlags,
        dims: FeatureDims,
        context: Option<ContextVectorStore>,
        rng: &mut R,
    ) -> Result<Self> {
        if flags.context && context.is_none() {
            return Err(Error::Feature("context feature enabled without a vector store".into()));
        }
        let word = flags
            .word
            .then(|| EmbeddingTable::new(params, "emb.word", vocabs.word.len(), dims.word, rng))
            .transpose()?;
        let lemma = flags
            .lemma
            .then(|| EmbeddingTable::new(params, "emb.lemma", vocabs.lemma.len(), dims.lemma, rng))
            .transpose()?;
        let pos = flags
            .pos
            .then(|| EmbeddingTable::new(params, "emb.pos", vocabs.upos.len(), dims.pos, rng))
            .transpose()?;
        Ok(Self {
            flags,
            word,
            lemma,
            pos,
            context: if flags.context { context } else { None },
        })
    }

    pub fn tables(&self) -> impl Iterator<Item = &EmbeddingTable> {
        [&self.word, &self.lemma, &self.pos].into_iter().flatten()
    }

    /// Width of the word/lemma/context/pos prefix.
    pub fn base_dim(&self) -> usize {
        self.word.map_or(0, |t| t.dim)
            + self.lemma.map_or(0, |t| t.dim)
            + self.context.as_ref().map_or(0, |c| c.dim)
            + self.pos.map_or(0, |t| t.dim)
    }

    /// Concatenation of the enabled word, lemma, context and pos blocks.
    pub fn base_input(&self, tape: &mut Tape<'_>, sentence: &Sentence, vocabs: &Vocabularies) -> Result<Option<Var>> {
        let mut blocks = Vec::new();
        if let Some(t) = &self.word {
            let ids: Vec<usize> = sentence.tokens.iter().map(|t| vocabs.word.get(&t.form)).collect();
            blocks.push(t.lookup(tape, &ids)?);
        }
        if let Some(t) = &self.lemma {
            let ids: Vec<usize> = sentence.tokens.iter().map(|t| vocabs.lemma.get(&t.lemma)).collect();
            blocks.push(t.lookup(tape, &ids)?);
        }
        if let Some(store) = &self.context {
            let mut values = Vec::with_capacity(sentence.len() * store.dim);
            for tok in &sentence.tokens {
                let v = store.get(&sentence.sentence_id, tok.index).ok_or_else(|| {
                    Error::Feature(format!(
                        "missing context vector for token {} of sentence {}",
                        tok.index, sentence.sentence_id
                    ))
                })?;
                values.extend_from_slice(v);
            }
            blocks.push(tape.constant_matrix(sentence.len(), store.dim, values)?);
        }
        if let Some(t) = &self.pos {
            let ids: Vec<usize> = sentence.tokens.iter().map(|t| vocabs.upos.get(&t.upos)).collect();
            blocks.push(t.lookup(tape, &ids)?);
        }
        if blocks.is_empty() {
            return Ok(None);
        }
        Ok(Some(tape.concat(&blocks, Axis::Cols)?))
    }

    /// Builds `x_i` for every token: the base blocks followed by the tree and
    /// high-order blocks when enabled.
    pub fn assemble_input(
        &self,
        tape: &mut Tape<'_>,
        sentence: &Sentence,
        vocabs: &Vocabularies,
        tree: Option<Var>,
        ho: Option<Var>,
    ) -> Result<Var> {
        if !self.flags.any() {
            return Err(Error::Feature("no input features".into()));
        }
        let mut blocks = Vec::new();
        if let Some(base) = self.base_input(tape, sentence, vocabs)? {
            blocks.push(base);
        }
        for (enabled, block, what) in [(self.flags.tree, tree, "tree"), (self.flags.ho, ho, "high-order")] {
            if !enabled {
                continue;
            }
            let v = block.ok_or_else(|| Error::Feature(format!("{what} feature missing for token 1")))?;
            let (rows, _) = tape.dims(v);
            if rows < sentence.len() {
                return Err(Error::Feature(format!(
                    "{what} feature missing for token {}",
                    rows + 1
                )));
            }
            blocks.push(v);
        }
        Ok(tape.concat(&blocks, Axis::Cols)?)
    }
}
