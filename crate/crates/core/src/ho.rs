//! High-order syntax features: a joint graph of words, POS nodes, relation
//! nodes and a virtual root, a mean-aggregation GNN pretrained with masked
//! node prediction and edge prediction, and frozen per-word extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xsrl_tensor::{Adam, AdamConfig, ParamId, Params, Tape, Tensor, Var};

use crate::conllu::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::features::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Word,
    Upos,
    Deprel,
    Root,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointNode {
    pub kind: NodeKind,
    pub label: String,
}

/// Nodes are ordered words (by position), POS nodes, relation nodes (both
/// by label), then the root. Edges are undirected `(u, v)` with `u < v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointGraph {
    pub nodes: Vec<JointNode>,
    pub n_words: usize,
    pub edges: Vec<(usize, usize)>,
}

impl JointGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.len()];
        for &(u, v) in &self.edges {
            nb[u].push(v);
            nb[v].push(u);
        }
        nb
    }

    /// Unordered node pairs that are not joined by an edge.
    pub fn absent_pairs(&self) -> Vec<(usize, usize)> {
        let present: BTreeSet<(usize, usize)> = self.edges.iter().copied().collect();
        let n = self.len();
        (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|p| !present.contains(p))
            .collect()
    }
}

pub fn build_joint_graph(s: &Sentence) -> JointGraph {
    let n = s.len();
    let mut nodes: Vec<JointNode> = s
        .tokens
        .iter()
        .map(|t| JointNode {
            kind: NodeKind::Word,
            label: t.form.clone(),
        })
        .collect();
    let tags: BTreeSet<&str> = s.tokens.iter().map(|t| t.upos.as_str()).collect();
    let rels: BTreeSet<&str> = s.tokens.iter().map(|t| t.deprel.as_str()).collect();
    let mut upos_node = BTreeMap::new();
    for tag in tags {
        upos_node.insert(tag, nodes.len());
        nodes.push(JointNode {
            kind: NodeKind::Upos,
            label: tag.to_string(),
        });
    }
    let mut rel_node = BTreeMap::new();
    for rel in rels {
        rel_node.insert(rel, nodes.len());
        nodes.push(JointNode {
            kind: NodeKind::Deprel,
            label: rel.to_string(),
        });
    }
    let root = nodes.len();
    nodes.push(JointNode {
        kind: NodeKind::Root,
        label: String::new(),
    });

    let mut edges = BTreeSet::new();
    let mut link = |a: usize, b: usize| {
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    };
    for (i, t) in s.tokens.iter().enumerate() {
        link(i, upos_node[t.upos.as_str()]);
        let r = rel_node[t.deprel.as_str()];
        link(r, i);
        link(if t.head == 0 { root } else { t.head - 1 }, r);
        if i + 1 < n {
            link(i, i + 1);
        }
    }
    JointGraph {
        nodes,
        n_words: n,
        edges: edges.into_iter().collect(),
    }
}

/// Number of nodes to mask: `⌊rate·|V|⌋`, at least one.
pub fn mask_count(rate: f64, nodes: usize) -> usize {
    ((rate * nodes as f64).floor() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoVocab {
    pub word: Vocabulary,
    pub upos: Vocabulary,
    pub deprel: Vocabulary,
}

impl HoVocab {
    pub fn build(corpus: &Corpus) -> Self {
        let tokens = || corpus.sentences.iter().flat_map(|s| &s.tokens);
        Self {
            word: Vocabulary::from_counts(corpus.word_counts.iter().map(|(w, &c)| (w.as_str(), c)), 1),
            upos: Vocabulary::closed(tokens().map(|t| t.upos.as_str())),
            deprel: Vocabulary::closed(tokens().map(|t| t.deprel.as_str())),
        }
    }

    /// Class id of a node within its kind.
    pub fn class(&self, node: &JointNode) -> usize {
        match node.kind {
            NodeKind::Word => self.word.get(&node.label),
            NodeKind::Upos => self.upos.get(&node.label),
            NodeKind::Deprel => self.deprel.get(&node.label),
            NodeKind::Root => 0,
        }
    }

    /// Row of a node in the shared input table: word rows, POS rows,
    /// relation rows, then the root and mask symbols.
    pub fn input_row(&self, node: &JointNode) -> usize {
        let (w, u) = (self.word.len(), self.upos.len());
        match node.kind {
            NodeKind::Word => self.word.get(&node.label),
            NodeKind::Upos => w + self.upos.get(&node.label),
            NodeKind::Deprel => w + u + self.deprel.get(&node.label),
            NodeKind::Root => self.root_row(),
        }
    }

    pub fn root_row(&self) -> usize {
        self.word.len() + self.upos.len() + self.deprel.len()
    }

    pub fn mask_row(&self) -> usize {
        self.root_row() + 1
    }

    pub fn input_rows(&self) -> usize {
        self.root_row() + 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub hidden: usize,
    pub layers: usize,
    pub mask_rate: f64,
    pub neg_ratio: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            hidden: 350,
            layers: 5,
            mask_rate: 0.15,
            neg_ratio: 1,
            lr: 0.001,
            steps: 2000,
            batch_size: 8,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask rate {} outside (0,1)", self.mask_rate)));
        }
        if self.neg_ratio < 1 || self.hidden == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::Config("gnn sizes and negative ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GnnLayer {
    pub w_self: ParamId,
    pub w_nbr: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Gnn {
    pub config: GnnConfig,
    pub vocab: HoVocab,
    pub input: ParamId,
    pub layers: Vec<GnnLayer>,
    /// Classifier `(W, b)` per node kind: word, POS, relation.
    pub heads: [(ParamId, ParamId); 3],
    pub edge: ParamId,
}

/// Several joint graphs laid out block-diagonally.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub graphs: Vec<JointGraph>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl GraphBatch {
    pub fn new(graphs: Vec<JointGraph>) -> Self {
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut total = 0;
        for g in &graphs {
            offsets.push(total);
            total += g.len();
        }
        Self {
            graphs,
            offsets,
            total,
        }
    }

    /// Row-normalized adjacency; isolated nodes get an all-zero row.
    pub fn mean_adjacency(&self) -> Vec<f64> {
        let n = self.total;
        let mut m = vec![0.0; n * n];
        for (g, &off) in self.graphs.iter().zip(&self.offsets) {
            for (u, nb) in g.neighbors().into_iter().enumerate() {
                let w = 1.0 / nb.len().max(1) as f64;
                for v in nb {
                    m[(off + u) * n + off + v] = w;
                }
            }
        }
        m
    }

    fn node(&self, global: usize) -> &JointNode {
        let gi = self.offsets.partition_point(|&o| o <= global) - 1;
        &self.graphs[gi].nodes[global - self.offsets[gi]]
    }
}

/// Per-kind classification output of the masked-node objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskStats {
    pub correct: usize,
    pub total: usize,
}

impl Gnn {
    pub fn new<R: Rng>(params: &mut Params, config: GnnConfig, vocab: HoVocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let bound = (3.0 / d as f64).sqrt();
        let input = params.add("ho.emb", Tensor::uniform(&[vocab.input_rows(), d], bound, rng))?;
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            layers.push(GnnLayer {
                w_self: params.add(format!("ho.l{k}.self"), Tensor::glorot(d, d, rng))?,
                w_nbr: params.add(format!("ho.l{k}.nbr"), Tensor::glorot(d, d, rng))?,
                b: params.add(format!("ho.l{k}.b"), Tensor::zeros(&[1, d]))?,
            });
        }
        let mut head = |name: &str, classes: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                params.add(format!("ho.cls.{name}.w"), Tensor::glorot(d, classes, rng))?,
                params.add(format!("ho.cls.{name}.b"), Tensor::zeros(&[1, classes]))?,
            ))
        };
        let heads = [
            head("word", vocab.word.len())?,
            head("upos", vocab.upos.len())?,
            head("deprel", vocab.deprel.len())?,
        ];
        let edge = params.add("ho.edge.B", Tensor::glorot(d, d, rng))?;
        Ok(Self {
            config,
            vocab,
            input,
            layers,
            heads,
            edge,
        })
    }

    /// Final-layer node states; nodes flagged in `masked` read the mask
    /// symbol instead of their own input row.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &GraphBatch, masked: &[bool]) -> Result<Var> {
        let mut ids = Vec::with_capacity(batch.total);
        for (g, _) in batch.graphs.iter().zip(&batch.offsets) {
            ids.extend(g.nodes.iter().map(|n| self.vocab.input_row(n)));
        }
        for (id, &m) in ids.iter_mut().zip(masked) {
            if m {
                *id = self.vocab.mask_row();
            }
        }
        let table = tape.param(self.input);
        let mut h = tape.embedding(table, &ids)?;
        let adj = tape.constant_matrix(batch.total, batch.total, batch.mean_adjacency())?;
        for layer in &self.layers {
            let ws = tape.param(layer.w_self);
            let wn = tape.param(layer.w_nbr);
            let b = tape.param(layer.b);
            let own = tape.matmul(h, ws)?;
            let mean = tape.matmul(adj, h)?;
            let nbr = tape.matmul(mean, wn)?;
            let z = tape.sum_set(&[own, nbr])?;
            let z = tape.add(z, b)?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Picks nodes to mask in every graph: `mask_count(rate, |V|)` of them,
    /// drawn without replacement from the non-root nodes.
    pub fn sample_mask<R: Rng>(&self, batch: &GraphBatch, rng: &mut R) -> Vec<bool> {
        let mut masked = vec![false; batch.total];
        for (g, &off) in batch.graphs.iter().zip(&batch.offsets) {
            let maskable = g.len() - 1;
            let k = mask_count(self.config.mask_rate, g.len()).min(maskable);
            for i in sample(rng, maskable, k) {
                masked[off + i] = true;
            }
        }
        masked
    }

    /// Mean cross-entropy over masked nodes, each predicted by the
    /// classifier of its kind.
    pub fn masked_node_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &GraphBatch,
        h: Var,
        masked: &[bool],
    ) -> Result<(Var, MaskStats)> {
        let mut by_kind: [Vec<(usize, usize)>; 3] = Default::default();
        for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
            let node = batch.node(i);
            let k = match node.kind {
                NodeKind::Word => 0,
                NodeKind::Upos => 1,
                NodeKind::Deprel => 2,
                NodeKind::Root => continue,
            };
            by_kind[k].push((i, self.vocab.class(node)));
        }
        let total: usize = by_kind.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::Invalid("no maskable nodes".into()));
        }
        let mut parts = Vec::new();
        let mut stats = MaskStats {
            correct: 0,
            total,
        };
        for (nodes, &(w, b)) in by_kind.iter().zip(&self.heads) {
            if nodes.is_empty() {
                continue;
            }
            let rows: Vec<usize> = nodes.iter().map(|n| n.0).collect();
            let targets: Vec<usize> = nodes.iter().map(|n| n.1).collect();
            let x = tape.embedding(h, &rows)?;
            let w = tape.param(w);
            let b = tape.param(b);
            let logits = tape.matmul(x, w)?;
            let logits = tape.add(logits, b)?;
            let (_, c) = tape.dims(logits);
            for (r, &t) in targets.iter().enumerate() {
                if argmax(&tape.value(logits)[r * c..(r + 1) * c]) == t {
                    stats.correct += 1;
                }
            }
            parts.push(tape.cross_entropy(logits, &targets)?);
        }
        let sum = tape.sum_set(&parts)?;
        Ok((tape.affine(sum, 1.0 / total as f64, 0.0), stats))
    }

    /// Positive edges and sampled absent pairs (global indices) with labels.
    pub fn sample_edges<R: Rng>(&self, batch: &GraphBatch, rng: &mut R) -> (Vec<(usize, usize)>, Vec<f64>) {
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for (g, &off) in batch.graphs.iter().zip(&batch.offsets) {
            pairs.extend(g.edges.iter().map(|&(u, v)| (off + u, off + v)));
            labels.extend(std::iter::repeat_n(1.0, g.edges.len()));
            let absent = g.absent_pairs();
            if absent.is_empty() {
                log::warn!("complete joint graph: edge loss uses positives only");
                continue;
            }
            let k = (g.edges.len() * self.config.neg_ratio).min(absent.len());
            for i in sample(rng, absent.len(), k) {
                let (u, v) = absent[i];
                pairs.push((off + u, off + v));
                labels.push(0.0);
            }
        }
        (pairs, labels)
    }

    /// Bilinear scores `h_uᵀ B h_v` for the given pairs, as an `m × 1` column.
    pub fn edge_scores(&self, tape: &mut Tape<'_>, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let b = tape.param(self.edge);
        let hb = tape.matmul(h, b)?;
        let ht = tape.transpose(h);
        let s = tape.matmul(hb, ht)?;
        Ok(tape.pick(s, pairs)?)
    }

    /// Mean binary cross-entropy over positive edges and sampled negatives.
    pub fn edge_prediction_loss(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        pairs: &[(usize, usize)],
        labels: &[f64],
    ) -> Result<(Var, Var)> {
        let scores = self.edge_scores(tape, h, pairs)?;
        let loss = tape.bce_with_logits(scores, labels)?;
        Ok((tape.affine(loss, 1.0 / pairs.len() as f64, 0.0), scores))
    }

    /// Frozen word-node states for one sentence (`n × hidden`).
    pub fn extract(&self, params: &Params, sentence: &Sentence) -> Result<Tensor> {
        let graph = build_joint_graph(sentence);
        let n = graph.n_words;
        let batch = GraphBatch::new(vec![graph]);
        let mut tape = Tape::new(params);
        let h = self.forward(&mut tape, &batch, &vec![false; batch.total])?;
        let words = tape.slice_rows(h, 0, n)?;
        Ok(tape.to_tensor(words))
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Area under the ROC curve by rank comparison; ties count one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positive {
        let below = neg.partition_point(|&x| x < p);
        let not_above = neg.partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    wins / (positive.len() * negative.len()) as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HoEval {
    pub mask_accuracy: f64,
    /// Share of the most frequent `(kind, label)` among evaluated masked nodes.
    pub majority_rate: f64,
    pub auc: f64,
}

/// A pretrained GNN with its parameters.
#[derive(Clone, Debug)]
pub struct HoModel {
    pub gnn: Gnn,
    pub params: Params,
    pub losses: Vec<f64>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct HoMeta {
    config: GnnConfig,
    vocab: HoVocab,
}

impl HoModel {
    /// Trains node and edge objectives jointly on `corpus` for
    /// `config.steps` mini-batches.
    pub fn pretrain(corpus: &Corpus, config: GnnConfig, seed: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Invalid("empty pretraining corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let gnn = Gnn::new(&mut params, config.clone(), HoVocab::build(corpus), &mut rng)?;
        let graphs: Vec<JointGraph> = corpus.sentences.iter().map(build_joint_graph).collect();
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        let mut cursor = order.len();
        let mut adam = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        let mut losses = Vec::with_capacity(config.steps);
        for step in 0..config.steps {
            let mut picked = Vec::with_capacity(config.batch_size);
            while picked.len() < config.batch_size.min(graphs.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picked.push(graphs[order[cursor]].clone());
                cursor += 1;
            }
            let batch = GraphBatch::new(picked);
            let masked = gnn.sample_mask(&batch, &mut rng);
            let (pairs, labels) = gnn.sample_edges(&batch, &mut rng);
            let (loss, grads) = {
                let mut tape = Tape::new(&params);
                let h = gnn.forward(&mut tape, &batch, &masked)?;
                let (node_loss, _) = gnn.masked_node_loss(&mut tape, &batch, h, &masked)?;
                let (edge_loss, _) = gnn.edge_prediction_loss(&mut tape, h, &pairs, &labels)?;
                let total = tape.sum_set(&[node_loss, edge_loss])?;
                (tape.scalar(total), tape.backward(total)?)
            };
            params.zero_grad();
            params.accumulate(&grads);
            adam.step(&mut params)?;
            if step % 100 == 0 {
                log::debug!("ho step {step}: loss {loss:.4}");
            }
            losses.push(loss);
        }
        Ok(Self { gnn, params, losses })
    }

    /// Masked-node accuracy and edge AUC on held-out sentences.
    pub fn evaluate(&self, sentences: &[Sentence], seed: u64) -> Result<HoEval> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut correct = 0;
        let mut total = 0;
        let mut label_freq: BTreeMap<(NodeKind, String), usize> = BTreeMap::new();
        let mut pos_scores = Vec::new();
        let mut neg_scores = Vec::new();
        for chunk in sentences.chunks(self.gnn.config.batch_size.max(1)) {
            let batch = GraphBatch::new(chunk.iter().map(build_joint_graph).collect());
            let masked = self.gnn.sample_mask(&batch, &mut rng);
            for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
                let node = batch.node(i);
                *label_freq.entry((node.kind, node.label.clone())).or_default() += 1;
            }
            let (pairs, labels) = self.gnn.sample_edges(&batch, &mut rng);
            let mut tape = Tape::new(&self.params);
            let h = self.gnn.forward(&mut tape, &batch, &masked)?;
            let (_, stats) = self.gnn.masked_node_loss(&mut tape, &batch, h, &masked)?;
            correct += stats.correct;
            total += stats.total;
            // edge scores use unmasked inputs
            let h = self.gnn.forward(&mut tape, &batch, &vec![false; batch.total])?;
            let s = self.gnn.edge_scores(&mut tape, h, &pairs)?;
            for (&v, &y) in tape.value(s).iter().zip(&labels) {
                if y > 0.5 {
                    pos_scores.push(v);
                } else {
                    neg_scores.push(v);
                }
            }
        }
        let majority = label_freq.values().copied().max().unwrap_or(0);
        Ok(HoEval {
            mask_accuracy: correct as f64 / total.max(1) as f64,
            majority_rate: majority as f64 / total.max(1) as f64,
            auc: auc(&pos_scores, &neg_scores),
        })
    }

    /// Writes the parameter checkpoint at `path` and its vocabulary and
    /// configuration to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(BufWriter::new(File::create(path)?))?;
        let meta = HoMeta {
            config: self.gnn.config.clone(),
            vocab: self.gnn.vocab.clone(),
        };
        serde_json::to_writer(BufWriter::new(File::create(sidecar(path))?), &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: HoMeta = serde_json::from_reader(BufReader::new(File::open(sidecar(path))?))?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gnn = Gnn::new(&mut params, meta.config, meta.vocab, &mut rng)?;
        params.load_into(BufReader::new(File::open(path)?))?;
        Ok(Self {
            gnn,
            params,
            losses: Vec::new(),
        })
    }

    pub fn extract(&self, sentence: &Sentence) -> Result<Tensor> {
        self.gnn.extract(&self.params, sentence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::Token;
    use crate::synth::{synth_corpus, GrammarProfile};

    fn tok(i: usize, upos: &str, head: usize, deprel: &str) -> Token {
        Token {
            index: i,
            form: format!("w{i}"),
            lemma: format!("w{i}"),
            upos: upos.into(),
            head,
            deprel: deprel.into(),
        }
    }

    fn sent(tokens: Vec<Token>) -> Sentence {
        Sentence {
            sentence_id: "s".into(),
            language: "en".into(),
            tokens,
            frames: vec![],
        }
    }

    fn small_config() -> GnnConfig {
        GnnConfig {
            hidden: 6,
            layers: 2,
            ..GnnConfig::default()
        }
    }

    #[test]
    fn one_token_graph() {
        let g = build_joint_graph(&sent(vec![tok(1, "NOUN", 0, "root")]));
        let kinds: Vec<NodeKind> = g.nodes.iter().map(|n| n.kind).collect();
        assert_eq!(kinds, vec![NodeKind::Word, NodeKind::Upos, NodeKind::Deprel, NodeKind::Root]);
        assert_eq!(g.nodes[1].label, "NOUN");
        assert_eq!(g.nodes[2].label, "root");
        // w1—NOUN, root-label—w1, Root—root-label
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (2, 3)]);
    }

    #[test]
    fn adjacency_and_shared_tags() {
        let g = build_joint_graph(&sent(vec![tok(1, "VERB", 0, "root"), tok(2, "VERB", 1, "ccomp")]));
        assert!(g.edges.contains(&(0, 1)));
        let verb_nodes: Vec<usize> = (0..g.len())
            .filter(|&i| g.nodes[i].kind == NodeKind::Upos)
            .collect();
        assert_eq!(verb_nodes.len(), 1);
        let v = verb_nodes[0];
        assert!(g.edges.contains(&(0, v)) && g.edges.contains(&(1, v)));
        assert_eq!(g, build_joint_graph(&sent(vec![tok(1, "VERB", 0, "root"), tok(2, "VERB", 1, "ccomp")])));
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(0.15, 20), 3);
        assert_eq!(mask_count(0.15, 4), 1);
    }

    fn fixture() -> (Corpus, Params, Gnn) {
        let c = synth_corpus(3, 20, 30, GrammarProfile::SyntaxDetermined);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Gnn::new(&mut p, small_config(), HoVocab::build(&c), &mut rng).unwrap();
        (c, p, g)
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let (c, mut p, g) = fixture();
        for id in p.ids().collect::<Vec<_>>() {
            p.get_mut(id).values_mut().fill(0.0);
        }
        let batch = GraphBatch::new(vec![build_joint_graph(&c.sentences[0])]);
        let mut t = Tape::new(&p);
        let h = g.forward(&mut t, &batch, &vec![false; batch.total]).unwrap();
        assert!(t.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_node_has_zero_neighbor_mean() {
        let batch = GraphBatch::new(vec![JointGraph {
            nodes: vec![JointNode {
                kind: NodeKind::Root,
                label: String::new(),
            }],
            n_words: 0,
            edges: vec![],
        }]);
        assert_eq!(batch.mean_adjacency(), vec![0.0]);
    }

    #[test]
    fn two_node_single_layer_hand_arithmetic() {
        let c = Corpus::new(vec![sent(vec![tok(1, "NOUN", 0, "root")])]);
        let vocab = HoVocab::build(&c);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GnnConfig {
            hidden: 2,
            layers: 1,
            ..GnnConfig::default()
        };
        let g = Gnn::new(&mut p, cfg, vocab.clone(), &mut rng).unwrap();
        // inputs: word row [1, 2], POS row [3, -1]
        let table = p.get_mut(g.input).values_mut();
        table.fill(0.0);
        let w = vocab.word.get("w1");
        table[w * 2..w * 2 + 2].copy_from_slice(&[1.0, 2.0]);
        let u = vocab.word.len() + vocab.upos.get("NOUN");
        table[u * 2..u * 2 + 2].copy_from_slice(&[3.0, -1.0]);
        let l = g.layers[0];
        p.get_mut(l.w_self).values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.get_mut(l.w_nbr).values_mut().copy_from_slice(&[0.5, 1.0, -1.0, 0.0]);
        p.get_mut(l.b).values_mut().copy_from_slice(&[0.1, -0.2]);
        let graph = JointGraph {
            nodes: c.sentences[0]
                .tokens
                .iter()
                .map(|_| JointNode {
                    kind: NodeKind::Word,
                    label: "w1".into(),
                })
                .chain([JointNode {
                    kind: NodeKind::Upos,
                    label: "NOUN".into(),
                }])
                .collect(),
            n_words: 1,
            edges: vec![(0, 1)],
        };
        let batch = GraphBatch::new(vec![graph]);
        let mut t = Tape::new(&p);
        let h = g.forward(&mut t, &batch, &[false, false]).unwrap();
        // node 0: [1,2] + [3,-1]·Wn + b = [1,2] + [2.5, 3] + [0.1,-0.2]
        // node 1: [3,-1] + [1,2]·Wn + b = [3,-1] + [-1.5, 1] + [0.1,-0.2]
        let want = [3.6, 4.8, 1.6, 0.0];
        for (a, b) in t.value(h).iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_bilinear_gives_ln2_per_pair() {
        let (c, mut p, g) = fixture();
        p.get_mut(g.edge).values_mut().fill(0.0);
        let batch = GraphBatch::new(vec![build_joint_graph(&c.sentences[0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pairs, labels) = g.sample_edges(&batch, &mut rng);
        let mut t = Tape::new(&p);
        let h = g.forward(&mut t, &batch, &vec![false; batch.total]).unwrap();
        let (loss, _) = g.edge_prediction_loss(&mut t, h, &pairs, &labels).unwrap();
        assert!((t.scalar(loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negatives_match_positive_count() {
        let (c, _, g) = fixture();
        let graph = c
            .sentences
            .iter()
            .map(build_joint_graph)
            .find(|g| g.edges.len() == 7 || g.absent_pairs().len() >= g.edges.len())
            .unwrap();
        let e = graph.edges.len();
        let batch = GraphBatch::new(vec![graph]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, labels) = g.sample_edges(&batch, &mut rng);
        assert_eq!(labels.iter().filter(|&&y| y == 0.0).count(), e);
    }

    #[test]
    fn symmetric_bilinear_is_order_free() {
        let (c, mut p, g) = fixture();
        let d = g.config.hidden;
        let b = p.get(g.edge).values().to_vec();
        let sym: Vec<f64> = (0..d * d).map(|k| (b[k] + b[(k % d) * d + k / d]) / 2.0).collect();
        p.get_mut(g.edge).values_mut().copy_from_slice(&sym);
        let batch = GraphBatch::new(vec![build_joint_graph(&c.sentences[1])]);
        let mut t = Tape::new(&p);
        let h = g.forward(&mut t, &batch, &vec![false; batch.total]).unwrap();
        let s = g.edge_scores(&mut t, h, &[(0, 2), (2, 0), (1, 3), (3, 1)]).unwrap();
        let v = t.value(s);
        assert!((v[0] - v[1]).abs() < 1e-12 && (v[2] - v[3]).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier_has_zero_loss() {
        // a 4-node graph masks exactly one node
        let c = Corpus::new(vec![sent(vec![tok(1, "NOUN", 0, "root")])]);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Gnn::new(&mut p, small_config(), HoVocab::build(&c), &mut rng).unwrap();
        let batch = GraphBatch::new(vec![build_joint_graph(&c.sentences[0])]);
        let masked = g.sample_mask(&batch, &mut rng);
        let i = masked.iter().position(|&m| m).unwrap();
        assert_eq!(masked.iter().filter(|&&m| m).count(), 1);
        let node = batch.node(i);
        let kind = match node.kind {
            NodeKind::Word => 0,
            NodeKind::Upos => 1,
            _ => 2,
        };
        let (w, b) = g.heads[kind];
        p.get_mut(w).values_mut().fill(0.0);
        p.get_mut(b).values_mut()[g.vocab.class(node)] = 1e3;
        let mut t = Tape::new(&p);
        let h = g.forward(&mut t, &batch, &masked).unwrap();
        let (loss, stats) = g.masked_node_loss(&mut t, &batch, h, &masked).unwrap();
        assert!(t.scalar(loss) < 1e-9);
        assert_eq!(stats, MaskStats { correct: 1, total: 1 });
    }

    #[test]
    fn root_is_never_masked() {
        let (c, _, g) = fixture();
        let batch = GraphBatch::new(c.sentences.iter().take(5).map(build_joint_graph).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = g.sample_mask(&batch, &mut rng);
            for (gr, &off) in batch.graphs.iter().zip(&batch.offsets) {
                assert!(!m[off + gr.root()]);
                let k = m[off..off + gr.len()].iter().filter(|&&x| x).count();
                assert_eq!(k, mask_count(0.15, gr.len()));
            }
        }
    }

    #[test]
    fn auc_by_ranks() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[0.0], &[1.0]), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn extraction_is_restriction_of_forward() {
        let c = Corpus::new(vec![sent(vec![tok(1, "NOUN", 0, "root")])]);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Gnn::new(&mut p, small_config(), HoVocab::build(&c), &mut rng).unwrap();
        let s = &c.sentences[0];
        let a = g.extract(&p, s).unwrap();
        let b = g.extract(&p, s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 6]);
        let batch = GraphBatch::new(vec![build_joint_graph(s)]);
        let mut t = Tape::new(&p);
        let h = g.forward(&mut t, &batch, &vec![false; batch.total]).unwrap();
        assert_eq!(a.values(), t.row_values(h, 0));
    }

    #[test]
    fn unknown_words_fall_back_without_error() {
        let (_, p, g) = fixture();
        let s = sent(vec![tok(1, "NOUN", 0, "root")]);
        let mut s2 = s.clone();
        s2.tokens[0].form = "never-seen".into();
        assert!(g.extract(&p, &s2).is_ok());
    }

    #[test]
    fn pretraining_reduces_loss_and_round_trips() {
        let c = synth_corpus(5, 30, 40, GrammarProfile::SyntaxDetermined);
        let cfg = GnnConfig {
            hidden: 16,
            layers: 2,
            steps: 50,
            batch_size: 4,
            lr: 0.01,
            ..GnnConfig::default()
        };
        let m = HoModel::pretrain(&c, cfg, 1).unwrap();
        let head: f64 = m.losses[..5].iter().sum();
        let tail: f64 = m.losses[45..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ho.ckpt");
        m.save(&path).unwrap();
        let back = HoModel::load(&path).unwrap();
        assert_eq!(back.params.to_bytes(), m.params.to_bytes());
        assert!(back.params.iter().all(|(_, name, _)| name.starts_with("ho.")));
        assert_eq!(back.extract(&c.sentences[0]).unwrap(), m.extract(&c.sentences[0]).unwrap());
    }
}
