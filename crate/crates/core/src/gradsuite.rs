//! Finite-difference checks of the composite modules on tiny fixtures.
//!
//! Every fixture runs with full beams (α = 1) so that candidate selection is
//! constant around the evaluation point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xsrl_tensor::gradcheck::primitive_suite;
use xsrl_tensor::{check_gradients, GradCheckConfig, GradCheckReport, Params, Tape, Tensor, TensorError, Var};

use crate::config::ModelConfig;
use crate::conllu::{parse_conllu_plus_str, Corpus, Sentence};
use crate::features::{build_vocabularies, FeatureDims, FeatureFlags, LabelSet};
use crate::ho::{build_joint_graph, Gnn, GnnConfig, GraphBatch, HoVocab};
use crate::model::{SrlModel, WeightCache};
use crate::pgn::{BiLstmLayout, Encoder, EncoderMode, LangSel};
use crate::srl::{self, Beams, SrlScorer};
use crate::tree::{DepGraph, Gcn, TreeEncoderChoice, TreeLstm};
use crate::Result;

const FIXTURE: &str = "\
# sent_id = g1
# language = en
1\tDogs\tdog\tNOUN\t_\t_\t2\tnsubj\t_\t_\t_\tA0
2\tbark\tbark\tVERB\t_\t_\t0\troot\t_\t_\tbark.01\t_
3\tloudly\tloudly\tADV\t_\t_\t2\tadvmod\t_\t_\t_\tAM-MNR

# sent_id = g2
# language = de
1\tcats\tcat\tNOUN\t_\t_\t2\tnsubj\t_\t_\t_\tA0\t_
2\tsee\tsee\tVERB\t_\t_\t0\troot\t_\t_\tsee.01\t_\t_
3\tbirds\tbird\tNOUN\t_\t_\t2\tobj\t_\t_\t_\tA1\tA0
4\tsing\tsing\tVERB\t_\t_\t2\tccomp\t_\t_\tsing.01\tA1\t_
";

fn fixture() -> Corpus {
    parse_conllu_plus_str(FIXTURE).expect("fixture parses")
}

/// `Σ y ⊙ C` for a fixed random `C`, so every output coordinate matters.
fn project(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.dims(y);
    let w = Tensor::uniform(&[r, c], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn input(params: &mut Params, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<xsrl_tensor::ParamId> {
    Ok(params.add(name, Tensor::uniform(&[rows, cols], 1.0, rng))?)
}

/// `check_gradients` over a loss built from crate-level operations.
fn check<F>(params: &mut Params, config: &GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    Ok(check_gradients(params, config, |tape| {
        loss(tape).map_err(|e| TensorError::Invalid {
            op: "fixture",
            msg: e.to_string(),
        })
    })?)
}

fn config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    }
}

fn tree_lstm(seed: u64) -> Result<GradCheckReport> {
    let s = &fixture().sentences[1];
    let graph = DepGraph::from_sentence(s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let x = input(&mut params, "x", s.len(), 3, &mut rng)?;
    let enc = TreeLstm::new(&mut params, "t", 3, 4, &mut rng)?;
    check(&mut params, &config(seed), |tape| {
        let xv = tape.param(x);
        let y = enc.encode(tape, &graph, xv)?;
        project(tape, y, seed)
    })
}

fn gcn(seed: u64) -> Result<GradCheckReport> {
    let s = &fixture().sentences[1];
    let graph = DepGraph::from_sentence(s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let x = input(&mut params, "x", s.len(), 3, &mut rng)?;
    let enc = Gcn::new(&mut params, "g", 3, 4, 2, &mut rng)?;
    // Non-zero biases so the bias gradients are exercised away from init.
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).ends_with('b') || params.name(id).ends_with("bg") {
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = Tensor::uniform(&shape, 0.5, &mut rng);
        }
    }
    check(&mut params, &config(seed), |tape| {
        let xv = tape.param(x);
        let y = enc.encode(tape, &graph, xv)?;
        project(tape, y, seed)
    })
}

fn gnn(seed: u64) -> Result<GradCheckReport> {
    let corpus = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let cfg = GnnConfig {
        hidden: 4,
        layers: 2,
        ..GnnConfig::default()
    };
    let gnn = Gnn::new(&mut params, cfg, HoVocab::build(&corpus), &mut rng)?;
    let batch = GraphBatch::new(corpus.sentences.iter().map(build_joint_graph).collect());
    let masked = gnn.sample_mask(&batch, &mut rng);
    let (pairs, labels) = gnn.sample_edges(&batch, &mut rng);
    check(&mut params, &config(seed), |tape| {
        let h = gnn.forward(tape, &batch, &masked)?;
        let (node, _) = gnn.masked_node_loss(tape, &batch, h, &masked)?;
        let (edge, _) = gnn.edge_prediction_loss(tape, h, &pairs, &labels)?;
        Ok(tape.sum_set(&[node, edge])?)
    })
}

fn bilstm(seed: u64, mode: EncoderMode) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let x = input(&mut params, "x", 3, 3, &mut rng)?;
    let layout = BiLstmLayout {
        input_dim: 3,
        hidden: 4,
        layers: 2,
    };
    let (enc, langs) = match mode {
        EncoderMode::Pgn => (
            Encoder::new_pgn(&mut params, layout, 2, 2, &mut rng)?,
            vec![Some(LangSel::Id(1)), Some(LangSel::Mean)],
        ),
        EncoderMode::Basic => (Encoder::new_basic(&mut params, layout, &mut rng)?, vec![None]),
    };
    let mut report = GradCheckReport::default();
    for lang in langs {
        let r = check(&mut params, &config(seed), |tape| {
            let xv = tape.param(x);
            let y = enc.encode(tape, xv, lang)?;
            project(tape, y, seed)
        })?;
        report.merge(&r);
    }
    Ok(report)
}

fn biaffine(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let h = input(&mut params, "h", 4, 5, &mut rng)?;
    let scorer = SrlScorer::new(&mut params, 5, 3, 2, &mut rng)?;
    let beams = Beams::full(4);
    let mut trng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let targets: Vec<usize> = (0..beams.pairs())
        .map(|_| rand::Rng::gen_range(&mut trng, 0..3))
        .collect();
    check(&mut params, &config(seed), |tape| {
        let hv = tape.param(h);
        let proj = scorer.project(tape, hv)?;
        let logits = scorer.pair_logits(tape, &proj, &beams)?;
        let pair = srl::sentence_loss(tape, logits, &targets)?;
        let up = tape.bce_with_logits(proj.unary_p, &[0.0, 1.0, 0.0, 1.0])?;
        let ua = tape.bce_with_logits(proj.unary_a, &[1.0, 0.0, 1.0, 0.0])?;
        Ok(tape.sum_set(&[pair, up, ua])?)
    })
}

fn full_model(seed: u64) -> Result<GradCheckReport> {
    let corpus = fixture();
    let s: Sentence = corpus.sentences[0].clone();
    let vocabs = build_vocabularies(&corpus, 1)?;
    let mut cfg = ModelConfig {
        features: FeatureFlags::parse_list("word,lemma,pos,tree")?,
        dims: FeatureDims { word: 3, lemma: 2, pos: 2 },
        tree: TreeEncoderChoice::Gcn,
        tree_hidden: 3,
        gcn_layers: 1,
        encoder: EncoderMode::Pgn,
        lstm_hidden: 3,
        lstm_layers: 1,
        lang_dim: 2,
        repr_dim: 3,
        ..ModelConfig::default()
    };
    cfg.alpha_p = 1.0;
    cfg.alpha_a = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let languages = LabelSet::ordered(["en", "de"]);
    let model = SrlModel::new(&mut params, cfg, vocabs, languages, None, None, &mut rng)?;
    let cfg_train = GradCheckConfig {
        training_seed: Some(seed),
        ..config(seed)
    };
    check(&mut params, &cfg_train, |tape| {
        let mut cache = WeightCache::new();
        Ok(model.loss(tape, &mut cache, &s, None)?.total)
    })
}

/// Composite fixtures by name.
pub fn composite_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(vec![
        ("treelstm", tree_lstm(seed)?),
        ("gcn", gcn(seed)?),
        ("gnn", gnn(seed)?),
        ("pgn-bilstm", bilstm(seed, EncoderMode::Pgn)?),
        ("basic-bilstm", bilstm(seed, EncoderMode::Basic)?),
        ("biaffine+loss", biaffine(seed)?),
        ("srl-model", full_model(seed)?),
    ])
}

/// Primitives (several random points each) followed by the composites.
pub fn full_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = primitive_suite(3, seed)?;
    out.extend(composite_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composites_pass() {
        for (name, r) in composite_suite(11).unwrap() {
            assert!(r.checked > 0, "{name}");
            assert!(r.max_rel_error <= 1e-4, "{name}: {} at {:?}", r.max_rel_error, r.worst);
        }
    }
}
