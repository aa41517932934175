//! Dependency-tree encoders: bidirectional child-sum TreeLSTM and a gated
//! graph convolution over typed head/dependent arcs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xsrl_tensor::{Axis, ParamId, Params, Tape, Tensor, Var};

use crate::conllu::Sentence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeType {
    HeadToDep,
    DepToHead,
    SelfLoop,
}

impl EdgeType {
    pub const ALL: [EdgeType; 3] = [EdgeType::HeadToDep, EdgeType::DepToHead, EdgeType::SelfLoop];

    fn tag(self) -> &'static str {
        match self {
            EdgeType::HeadToDep => "hd",
            EdgeType::DepToHead => "dh",
            EdgeType::SelfLoop => "self",
        }
    }
}

/// Arc structure of one sentence, 0-based node ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DepGraph {
    pub n: usize,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub deprel: Vec<String>,
}

impl DepGraph {
    pub fn from_sentence(s: &Sentence) -> Self {
        let n = s.len();
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for (i, t) in s.tokens.iter().enumerate() {
            if t.head > 0 {
                parent[i] = Some(t.head - 1);
                children[t.head - 1].push(i);
            }
        }
        Self {
            n,
            parent,
            children,
            deprel: s.tokens.iter().map(|t| t.deprel.clone()).collect(),
        }
    }

    /// Typed arcs `(from, to, type)`; every node also has a self-loop.
    pub fn arcs(&self) -> Vec<(usize, usize, EdgeType)> {
        let mut out = Vec::with_capacity(3 * self.n);
        for (d, p) in self.parent.iter().enumerate() {
            if let Some(h) = *p {
                out.push((h, d, EdgeType::HeadToDep));
                out.push((d, h, EdgeType::DepToHead));
            }
        }
        out.extend((0..self.n).map(|i| (i, i, EdgeType::SelfLoop)));
        out
    }

    /// Nodes ordered so that every child precedes its parent.
    pub fn bottom_up_order(&self) -> Vec<usize> {
        let mut order = self.top_down_order();
        order.reverse();
        order
    }

    /// Nodes ordered so that every parent precedes its children.
    pub fn top_down_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.n);
        let mut stack: Vec<usize> = (0..self.n).filter(|&i| self.parent[i].is_none()).rev().collect();
        while let Some(v) = stack.pop() {
            order.push(v);
            let mut kids = self.children[v].clone();
            kids.sort_unstable();
            stack.extend(kids.into_iter().rev());
        }
        order
    }

    /// `A[to][from] = 1` for every arc of the given type.
    pub fn adjacency(&self, edge: EdgeType) -> Vec<f64> {
        let mut a = vec![0.0; self.n * self.n];
        for (from, to, t) in self.arcs() {
            if t == edge {
                a[to * self.n + from] = 1.0;
            }
        }
        a
    }
}

fn zero_bias(params: &mut Params, name: String, cols: usize) -> Result<ParamId> {
    Ok(params.add(name, Tensor::zeros(&[1, cols]))?)
}

/// One TreeLSTM direction with gate column order `[i | f | o | u]`.
#[derive(Clone, Copy, Debug)]
pub struct TreeLstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct TreeLstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub up: TreeLstmCell,
    pub down: TreeLstmCell,
}

struct Gates {
    i: Var,
    f: Var,
    o: Var,
    u: Var,
}

fn split_gates(tape: &mut Tape<'_>, z: Var, h: usize) -> Result<Gates> {
    Ok(Gates {
        i: tape.slice_cols(z, 0, h)?,
        f: tape.slice_cols(z, h, h)?,
        o: tape.slice_cols(z, 2 * h, h)?,
        u: tape.slice_cols(z, 3 * h, h)?,
    })
}

impl TreeLstm {
    pub fn new<R: Rng>(params: &mut Params, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut cell = |dir: &str| -> Result<TreeLstmCell> {
            Ok(TreeLstmCell {
                w: params.add(format!("{prefix}.{dir}.w"), Tensor::glorot(input_dim, 4 * hidden, rng))?,
                u: params.add(format!("{prefix}.{dir}.u"), Tensor::glorot(hidden, 4 * hidden, rng))?,
                b: zero_bias(params, format!("{prefix}.{dir}.b"), 4 * hidden)?,
            })
        };
        let up = cell("up")?;
        let down = cell("down")?;
        Ok(Self {
            input_dim,
            hidden,
            up,
            down,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Returns `n × 2H`: bottom-up states followed by top-down states.
    pub fn encode(&self, tape: &mut Tape<'_>, graph: &DepGraph, x: Var) -> Result<Var> {
        let (n, d) = tape.dims(x);
        if d != self.input_dim || n != graph.n {
            return Err(Error::Invalid(format!(
                "treelstm expects {}×{} inputs, got {n}×{d}",
                graph.n, self.input_dim
            )));
        }
        let up = self.direction(tape, &self.up, x, graph.bottom_up_order(), |j| {
            let mut kids = graph.children[j].clone();
            kids.sort_unstable();
            kids
        })?;
        let down = self.direction(tape, &self.down, x, graph.top_down_order(), |j| {
            graph.parent[j].into_iter().collect()
        })?;
        Ok(tape.concat(&[up, down], Axis::Cols)?)
    }

    fn direction(
        &self,
        tape: &mut Tape<'_>,
        cell: &TreeLstmCell,
        x: Var,
        order: Vec<usize>,
        sources: impl Fn(usize) -> Vec<usize>,
    ) -> Result<Var> {
        let h = self.hidden;
        let n = order.len();
        let w = tape.param(cell.w);
        let u = tape.param(cell.u);
        let b = tape.param(cell.b);
        let xw = tape.matmul(x, w)?;
        let z_all = tape.add(xw, b)?;
        let mut hs: Vec<Option<Var>> = vec![None; n];
        let mut cs: Vec<Option<Var>> = vec![None; n];
        for j in order {
            let zj = tape.row(z_all, j)?;
            let zg = split_gates(tape, zj, h)?;
            let kids = sources(j);
            let (ig, og, ug) = if kids.is_empty() {
                (zg.i, zg.o, zg.u)
            } else {
                let kid_h: Vec<Var> = kids.iter().map(|&k| hs[k].expect("child visited first")).collect();
                let hsum = tape.sum_set(&kid_h)?;
                let hu = tape.matmul(hsum, u)?;
                let hg = split_gates(tape, hu, h)?;
                (tape.add(zg.i, hg.i)?, tape.add(zg.o, hg.o)?, tape.add(zg.u, hg.u)?)
            };
            let ig = tape.sigmoid(ig);
            let og = tape.sigmoid(og);
            let ug = tape.tanh(ug);
            let mut terms = vec![tape.mul(ig, ug)?];
            for &k in &kids {
                let hk = hs[k].expect("child visited first");
                let hku = tape.matmul(hk, u)?;
                let hkf = tape.slice_cols(hku, h, h)?;
                let fk = tape.add(zg.f, hkf)?;
                let fk = tape.sigmoid(fk);
                let ck = cs[k].expect("child visited first");
                terms.push(tape.mul(fk, ck)?);
            }
            let c = tape.sum_set(&terms)?;
            let tc = tape.tanh(c);
            hs[j] = Some(tape.mul(og, tc)?);
            cs[j] = Some(c);
        }
        let rows: Vec<Var> = hs.into_iter().map(|v| v.expect("all nodes visited")).collect();
        Ok(tape.concat(&rows, Axis::Rows)?)
    }
}

/// Message, bias, gate and gate-bias parameters for one edge type.
#[derive(Clone, Copy, Debug)]
pub struct GcnEdgeParams {
    pub w: ParamId,
    pub b: ParamId,
    pub wg: ParamId,
    pub bg: ParamId,
}

#[derive(Clone, Debug)]
pub struct Gcn {
    pub input_dim: usize,
    pub hidden: usize,
    /// `layers[k][t]` for edge type `EdgeType::ALL[t]`.
    pub layers: Vec<[GcnEdgeParams; 3]>,
}

impl Gcn {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers < 1 {
            return Err(Error::Config("gcn needs at least one layer".into()));
        }
        let mut out = Vec::with_capacity(layers);
        for k in 0..layers {
            let fan_in = if k == 0 { input_dim } else { hidden };
            let mut edge = |t: EdgeType| -> Result<GcnEdgeParams> {
                let p = format!("{prefix}.l{k}.{}", t.tag());
                Ok(GcnEdgeParams {
                    w: params.add(format!("{p}.w"), Tensor::glorot(fan_in, hidden, rng))?,
                    b: zero_bias(params, format!("{p}.b"), hidden)?,
                    wg: params.add(format!("{p}.wg"), Tensor::glorot(fan_in, hidden, rng))?,
                    bg: zero_bias(params, format!("{p}.bg"), hidden)?,
                })
            };
            out.push([
                edge(EdgeType::HeadToDep)?,
                edge(EdgeType::DepToHead)?,
                edge(EdgeType::SelfLoop)?,
            ]);
        }
        Ok(Self {
            input_dim,
            hidden,
            layers: out,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.hidden
    }

    /// Each layer computes `ReLU(Σ_t A_t [(H W_t + b_t) ⊙ σ(H Wg_t + bg_t)])`.
    pub fn encode(&self, tape: &mut Tape<'_>, graph: &DepGraph, x: Var) -> Result<Var> {
        let (n, d) = tape.dims(x);
        if d != self.input_dim || n != graph.n {
            return Err(Error::Invalid(format!(
                "gcn expects {}×{} inputs, got {n}×{d}",
                graph.n, self.input_dim
            )));
        }
        let adj: Vec<Option<Var>> = EdgeType::ALL
            .iter()
            .map(|&t| match t {
                EdgeType::SelfLoop => Ok(None),
                _ => tape.constant_matrix(n, n, graph.adjacency(t)).map(Some),
            })
            .collect::<std::result::Result<_, _>>()?;
        let mut h = x;
        for layer in &self.layers {
            let mut msgs = Vec::with_capacity(3);
            for (p, a) in layer.iter().zip(&adj) {
                let w = tape.param(p.w);
                let b = tape.param(p.b);
                let wg = tape.param(p.wg);
                let bg = tape.param(p.bg);
                let hw = tape.matmul(h, w)?;
                let m = tape.add(hw, b)?;
                let hg = tape.matmul(h, wg)?;
                let g = tape.add(hg, bg)?;
                let g = tape.sigmoid(g);
                let m = tape.mul(m, g)?;
                msgs.push(match a {
                    Some(a) => tape.matmul(*a, m)?,
                    None => m,
                });
            }
            let s = tape.sum_set(&msgs)?;
            h = tape.relu(s);
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeEncoderChoice {
    #[default]
    None,
    TreeLstm,
    Gcn,
}

impl FromStr for TreeEncoderChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "treelstm" => Ok(Self::TreeLstm),
            "gcn" => Ok(Self::Gcn),
            other => Err(Error::Config(format!(
                "unknown tree encoder `{other}` (expected treelstm, gcn or none)"
            ))),
        }
    }
}

impl fmt::Display for TreeEncoderChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::TreeLstm => "treelstm",
            Self::Gcn => "gcn",
        })
    }
}

#[derive(Clone, Debug)]
pub enum TreeEncoder {
    TreeLstm(TreeLstm),
    Gcn(Gcn),
}

impl TreeEncoder {
    pub fn new<R: Rng>(
        params: &mut Params,
        choice: TreeEncoderChoice,
        input_dim: usize,
        hidden: usize,
        gcn_layers: usize,
        rng: &mut R,
    ) -> Result<Option<Self>> {
        Ok(match choice {
            TreeEncoderChoice::None => None,
            TreeEncoderChoice::TreeLstm => Some(Self::TreeLstm(TreeLstm::new(
                params,
                "tree.lstm",
                input_dim,
                hidden,
                rng,
            )?)),
            TreeEncoderChoice::Gcn => Some(Self::Gcn(Gcn::new(
                params, "tree.gcn", input_dim, hidden, gcn_layers, rng,
            )?)),
        })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::TreeLstm(t) => t.output_dim(),
            Self::Gcn(g) => g.output_dim(),
        }
    }

    pub fn encode(&self, tape: &mut Tape<'_>, graph: &DepGraph, x: Var) -> Result<Var> {
        match self {
            Self::TreeLstm(t) => t.encode(tape, graph, x),
            Self::Gcn(g) => g.encode(tape, graph, x),
        }
    }
}

/// Tree block for one sentence; `None` when no encoder is configured.
pub fn tree_feature(
    tape: &mut Tape<'_>,
    sentence: &Sentence,
    inputs: Var,
    encoder: Option<&TreeEncoder>,
) -> Result<Option<Var>> {
    match encoder {
        None => Ok(None),
        Some(e) => e.encode(tape, &DepGraph::from_sentence(sentence), inputs).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{Sentence, Token};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sentence(heads: &[usize]) -> Sentence {
        Sentence {
            sentence_id: "t".into(),
            language: "en".into(),
            tokens: heads
                .iter()
                .enumerate()
                .map(|(i, &h)| Token {
                    index: i + 1,
                    form: format!("w{i}"),
                    lemma: format!("w{i}"),
                    upos: "NOUN".into(),
                    head: h,
                    deprel: if h == 0 { "root".into() } else { "dep".into() },
                })
                .collect(),
            frames: vec![],
        }
    }

    fn inputs(tape: &mut Tape<'_>, n: usize, d: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(Tensor::uniform(&[n, d], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn graph_structure() {
        let g = DepGraph::from_sentence(&sentence(&[2, 0, 2]));
        assert_eq!(g.parent, vec![Some(1), None, Some(1)]);
        assert_eq!(g.children[1], vec![0, 2]);
        let arcs = g.arcs();
        assert_eq!(arcs.iter().filter(|a| a.2 == EdgeType::HeadToDep).count(), 2);
        assert_eq!(arcs.iter().filter(|a| a.2 == EdgeType::DepToHead).count(), 2);
        assert_eq!(arcs.iter().filter(|a| a.2 == EdgeType::SelfLoop).count(), 3);
        let up = g.bottom_up_order();
        assert_eq!(*up.last().unwrap(), 1);
    }

    #[test]
    fn zero_treelstm_gives_zero_states() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = TreeLstm::new(&mut p, "t", 3, 4, &mut rng).unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            p.get_mut(id).values_mut().fill(0.0);
        }
        let g = DepGraph::from_sentence(&sentence(&[2, 0, 2, 3]));
        let mut t = Tape::new(&p);
        let x = inputs(&mut t, 4, 3, 0);
        let h = enc.encode(&mut t, &g, x).unwrap();
        assert_eq!(t.dims(h), (4, 8));
        assert!(t.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn treelstm_leaf_has_no_child_contribution() {
        // a leaf's upward state depends only on its own input
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TreeLstm::new(&mut p, "t", 3, 4, &mut rng).unwrap();
        let g2 = DepGraph::from_sentence(&sentence(&[2, 0]));
        let g1 = DepGraph::from_sentence(&sentence(&[0]));
        let mut t = Tape::new(&p);
        let x2 = inputs(&mut t, 2, 3, 5);
        let x1 = t.slice_rows(x2, 0, 1).unwrap();
        let h2 = enc.encode(&mut t, &g2, x2).unwrap();
        let h1 = enc.encode(&mut t, &g1, x1).unwrap();
        assert_eq!(&t.row_values(h2, 0)[..4], &t.row_values(h1, 0)[..4]);
    }

    #[test]
    fn treelstm_child_order_is_irrelevant() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = TreeLstm::new(&mut p, "t", 3, 5, &mut rng).unwrap();
        let g = DepGraph::from_sentence(&sentence(&[3, 3, 0, 3, 3]));
        let mut shuffled = g.clone();
        shuffled.children[2] = vec![4, 0, 3, 1];
        let mut t = Tape::new(&p);
        let x = inputs(&mut t, 5, 3, 9);
        let a = enc.encode(&mut t, &g, x).unwrap();
        let b = enc.encode(&mut t, &shuffled, x).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn gcn_single_node_hand_arithmetic() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gcn = Gcn::new(&mut p, "g", 2, 2, 1, &mut rng).unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            p.get_mut(id).values_mut().fill(0.0);
        }
        let w_self = gcn.layers[0][2].w;
        p.get_mut(w_self).values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let g = DepGraph::from_sentence(&sentence(&[0]));
        let mut t = Tape::new(&p);
        let x = t.constant_matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let h = gcn.encode(&mut t, &g, x).unwrap();
        assert_eq!(t.value(h), &[0.5, 0.0]);
    }

    #[test]
    fn gcn_zero_inputs_and_biases_stay_zero() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gcn = Gcn::new(&mut p, "g", 3, 4, 2, &mut rng).unwrap();
        let g = DepGraph::from_sentence(&sentence(&[2, 0, 2]));
        let mut t = Tape::new(&p);
        let x = t.zeros(3, 3);
        let h = gcn.encode(&mut t, &g, x).unwrap();
        assert!(t.value(h).iter().all(|&v| v == 0.0));
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gcn_one_layer_matches_manual_rule_on_chain() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (din, dh) = (2, 3);
        let gcn = Gcn::new(&mut p, "g", din, dh, 1, &mut rng).unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            let shape = p.get(id).shape().to_vec();
            *p.get_mut(id) = Tensor::uniform(&shape, 0.8, &mut rng);
        }
        // chain 1 <- 2 <- 3 (token 1 is root)
        let s = sentence(&[0, 1, 2]);
        let g = DepGraph::from_sentence(&s);
        let xs = [[0.3, -0.7], [1.1, 0.2], [-0.4, 0.9]];
        let mut t = Tape::new(&p);
        let x = t.constant_matrix(3, 2, xs.concat()).unwrap();
        let h = gcn.encode(&mut t, &g, x).unwrap();

        let lin = |v: &[f64], w: ParamId, b: ParamId, k: usize| -> f64 {
            let w = p.get(w).values();
            (0..din).map(|r| v[r] * w[r * dh + k]).sum::<f64>() + p.get(b).values()[k]
        };
        for j in 0..3 {
            for k in 0..dh {
                let mut total = 0.0;
                for (from, to, ty) in g.arcs() {
                    if to != j {
                        continue;
                    }
                    let e = &gcn.layers[0][EdgeType::ALL.iter().position(|&x| x == ty).unwrap()];
                    total += lin(&xs[from], e.w, e.b, k) * sig(lin(&xs[from], e.wg, e.bg, k));
                }
                let want = total.max(0.0);
                assert!((t.row_values(h, j)[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn choice_parsing_and_dims() {
        assert!("lstm".parse::<TreeEncoderChoice>().is_err());
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sentence(&[2, 0, 2]);
        let gcn = TreeEncoder::new(&mut p, "gcn".parse().unwrap(), 4, 300, 2, &mut rng)
            .unwrap()
            .unwrap();
        let lstm = TreeEncoder::new(&mut p, "treelstm".parse().unwrap(), 4, 300, 2, &mut rng)
            .unwrap()
            .unwrap();
        assert!(TreeEncoder::new(&mut p, TreeEncoderChoice::None, 4, 300, 2, &mut rng)
            .unwrap()
            .is_none());
        let mut t = Tape::new(&p);
        let x = inputs(&mut t, 3, 4, 1);
        let hg = tree_feature(&mut t, &s, x, Some(&gcn)).unwrap().unwrap();
        let hl = tree_feature(&mut t, &s, x, Some(&lstm)).unwrap().unwrap();
        assert_eq!(t.dims(hg), (3, 300));
        assert_eq!(t.dims(hl), (3, 600));
        assert!(tree_feature(&mut t, &s, x, None).unwrap().is_none());
    }

    #[test]
    fn gcn_requires_a_layer() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(Gcn::new(&mut p, "g", 2, 2, 0, &mut rng).is_err());
    }
}
