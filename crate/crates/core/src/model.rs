//! The assembled labeler: feature bank, optional tree encoder and frozen
//! high-order block, BiLSTM encoder and the pair scorer.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use xsrl_tensor::{Params, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::conllu::Sentence;
use crate::error::{Error, Result};
use crate::features::{ContextVectorStore, FeatureBank, LabelSet, Vocabularies};
use crate::ho::HoModel;
use crate::pgn::{BiLstmLayout, Encoder, EncoderMode, LangSel};
use crate::srl::{self, Beams, Projections, SrlScorer, Triplet};
use crate::tree::{tree_feature, TreeEncoder};

/// Encoder weights already placed on a tape, keyed by language selection.
pub type WeightCache = HashMap<Option<LangSel>, Vec<Var>>;

#[derive(Clone, Debug)]
pub struct SrlModel {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    /// Training languages; their order fixes the language-embedding rows.
    pub languages: LabelSet,
    pub bank: FeatureBank,
    pub tree: Option<TreeEncoder>,
    pub encoder: Encoder,
    pub scorer: SrlScorer,
    pub ho: Option<HoModel>,
}

/// Per-sentence loss terms.
#[derive(Clone, Copy, Debug)]
pub struct SentenceLoss {
    pub total: Var,
    pub pair: Var,
    pub oracle_misses: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub triplets: Vec<Triplet>,
    pub oracle_misses: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    vocabs: Vocabularies,
    languages: LabelSet,
    context_dim: Option<usize>,
    ho_dim: Option<usize>,
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl SrlModel {
    pub fn new<R: Rng>(
        params: &mut Params,
        config: ModelConfig,
        vocabs: Vocabularies,
        languages: LabelSet,
        context: Option<ContextVectorStore>,
        ho: Option<HoModel>,
        rng: &mut R,
    ) -> Result<Self> {
        let flags = config.features;
        if !flags.any() {
            return Err(Error::Feature("no input features".into()));
        }
        if flags.ho != ho.is_some() {
            return Err(Error::Feature(
                "high-order block needs exactly one pretrained GNN".into(),
            ));
        }
        let bank = FeatureBank::new(params, &vocabs, flags, config.dims, context, rng)?;
        if config.freeze_embeddings {
            for t in bank.tables() {
                params.set_trainable(t.param, false);
            }
        }
        let tree = if flags.tree {
            if bank.base_dim() == 0 {
                return Err(Error::Config("the tree encoder needs word, lemma, context or pos inputs".into()));
            }
            TreeEncoder::new(params, config.tree, bank.base_dim(), config.tree_hidden, config.gcn_layers, rng)?
        } else {
            None
        };
        let input_dim = bank.base_dim()
            + tree.as_ref().map_or(0, TreeEncoder::output_dim)
            + ho.as_ref().map_or(0, |h| h.gnn.output_dim());
        let layout = BiLstmLayout {
            input_dim,
            hidden: config.lstm_hidden,
            layers: config.lstm_layers,
        };
        let encoder = match config.encoder {
            EncoderMode::Pgn => Encoder::new_pgn(params, layout, languages.len(), config.lang_dim, rng)?,
            EncoderMode::Basic => Encoder::new_basic(params, layout, rng)?,
        };
        let scorer = SrlScorer::new(params, layout.output_dim(), config.repr_dim, vocabs.roles.len(), rng)?;
        Ok(Self {
            config,
            vocabs,
            languages,
            bank,
            tree,
            encoder,
            scorer,
            ho,
        })
    }

    /// Trained languages use their own vector; others use the mean.
    pub fn lang_sel(&self, language: &str) -> Option<LangSel> {
        match self.config.encoder {
            EncoderMode::Basic => None,
            EncoderMode::Pgn => Some(match self.languages.id(language) {
                Some(id) => LangSel::Id(id),
                None => LangSel::Mean,
            }),
        }
    }

    /// Frozen high-order block for a sentence, when configured.
    pub fn ho_features(&self, s: &Sentence) -> Result<Option<Tensor>> {
        self.ho.as_ref().map(|h| h.extract(s)).transpose()
    }

    /// Checks that every enabled feature source covers `s`.
    pub fn check_resources(&self, s: &Sentence) -> Result<()> {
        if let Some(store) = &self.bank.context {
            for t in &s.tokens {
                if store.get(&s.sentence_id, t.index).is_none() {
                    return Err(Error::Feature(format!(
                        "missing context vector for token {} of sentence {}",
                        t.index, s.sentence_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn project(
        &self,
        tape: &mut Tape<'_>,
        cache: &mut WeightCache,
        s: &Sentence,
        ho: Option<&Tensor>,
    ) -> Result<Projections> {
        let base = self.bank.base_input(tape, s, &self.vocabs)?;
        let tree = match (base, &self.tree) {
            (Some(b), Some(_)) => tree_feature(tape, s, b, self.tree.as_ref())?,
            _ => None,
        };
        let ho = ho.map(|t| tape.constant(t.clone())).transpose()?;
        let x = self.bank.assemble_input(tape, s, &self.vocabs, tree, ho)?;
        let x = tape.dropout(x, self.config.dropout)?;
        let lang = self.lang_sel(&s.language);
        let weights = match cache.get(&lang) {
            Some(w) => w.clone(),
            None => {
                let w = self.encoder.weights(tape, lang)?;
                cache.insert(lang, w.clone());
                w
            }
        };
        let h = self.encoder.run(tape, x, &weights)?;
        let h = tape.dropout(h, self.config.dropout)?;
        self.scorer.project(tape, h)
    }

    /// Pair loss over the beams plus the weighted unary beam-scorer loss.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        cache: &mut WeightCache,
        s: &Sentence,
        ho: Option<&Tensor>,
    ) -> Result<SentenceLoss> {
        let proj = self.project(tape, cache, s, ho)?;
        let gold = srl::gold_pairs(s, &self.vocabs.roles);
        let mut beams = self.scorer.beams(tape, &proj, self.config.alpha_p, self.config.alpha_a);
        if self.config.gold_beam_inject {
            beams.inject(gold.keys().map(|k| k.0), gold.keys().map(|k| k.1));
        }
        let (targets, oracle_misses) = srl::pair_targets(&beams, &gold);
        let logits = self.scorer.pair_logits(tape, &proj, &beams)?;
        let pair = srl::sentence_loss(tape, logits, &targets)?;
        let total = if self.config.unary_weight > 0.0 {
            let n = s.len();
            let mut is_pred = vec![0.0; n];
            let mut is_arg = vec![0.0; n];
            for &(p, a) in gold.keys() {
                is_pred[p] = 1.0;
                is_arg[a] = 1.0;
            }
            for f in &s.frames {
                is_pred[f.predicate_index - 1] = 1.0;
            }
            let lp = tape.bce_with_logits(proj.unary_p, &is_pred)?;
            let la = tape.bce_with_logits(proj.unary_a, &is_arg)?;
            let unary = tape.sum_set(&[lp, la])?;
            let unary = tape.affine(unary, self.config.unary_weight, 0.0);
            tape.sum_set(&[pair, unary])?
        } else {
            pair
        };
        Ok(SentenceLoss {
            total,
            pair,
            oracle_misses,
        })
    }

    /// Decodes one sentence. With `gold_predicates`, the predicate beam is
    /// replaced by the annotated predicate positions.
    pub fn predict(&self, params: &Params, s: &Sentence, ho: Option<&Tensor>, gold_predicates: bool) -> Result<Prediction> {
        self.predict_with(params, s, ho, |model, tape, proj| {
            let mut beams = model.scorer.beams(tape, proj, model.config.alpha_p, model.config.alpha_a);
            if gold_predicates {
                let p: BTreeSet<usize> = s.frames.iter().map(|f| f.predicate_index - 1).collect();
                beams.predicates = p.into_iter().collect();
            }
            beams
        })
    }

    /// Decodes with caller-chosen beams.
    pub fn predict_with<F>(&self, params: &Params, s: &Sentence, ho: Option<&Tensor>, choose: F) -> Result<Prediction>
    where
        F: FnOnce(&Self, &Tape<'_>, &Projections) -> Beams,
    {
        let mut tape = Tape::new(params);
        let mut cache = WeightCache::new();
        let proj = self.project(&mut tape, &mut cache, s, ho)?;
        let beams = choose(self, &tape, &proj);
        let gold = srl::gold_pairs(s, &self.vocabs.roles);
        let (_, oracle_misses) = srl::pair_targets(&beams, &gold);
        if beams.pairs() == 0 {
            return Ok(Prediction {
                triplets: Vec::new(),
                oracle_misses,
            });
        }
        let logits = self.scorer.pair_logits(&mut tape, &proj, &beams)?;
        Ok(Prediction {
            triplets: srl::decode(tape.value(logits), self.scorer.labels, &beams),
            oracle_misses,
        })
    }

    /// Writes the checkpoint and a `.json` sidecar with configuration,
    /// vocabularies and languages.
    pub fn save(&self, params: &Params, path: &Path) -> Result<()> {
        params.save(BufWriter::new(File::create(path)?))?;
        let meta = ModelMeta {
            config: self.config.clone(),
            vocabs: self.vocabs.clone(),
            languages: self.languages.clone(),
            context_dim: self.bank.context.as_ref().map(|c| c.dim),
            ho_dim: self.ho.as_ref().map(|h| h.gnn.output_dim()),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar(path))?), &meta)?;
        Ok(())
    }

    /// Restores a model; context vectors and the pretrained GNN must be
    /// supplied when the checkpoint was trained with them.
    pub fn load(path: &Path, context: Option<ContextVectorStore>, ho: Option<HoModel>) -> Result<(Self, Params)> {
        let meta: ModelMeta = serde_json::from_reader(BufReader::new(File::open(sidecar(path))?))?;
        if meta.context_dim != context.as_ref().map(|c| c.dim) {
            return Err(Error::Feature(format!(
                "checkpoint expects context vectors of dim {:?}",
                meta.context_dim
            )));
        }
        if meta.ho_dim != ho.as_ref().map(|h| h.gnn.output_dim()) {
            return Err(Error::Feature(format!(
                "checkpoint expects high-order features of dim {:?}",
                meta.ho_dim
            )));
        }
        let mut params = Params::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = Self::new(&mut params, meta.config, meta.vocabs, meta.languages, context, ho, &mut rng)?;
        params.load_into(BufReader::new(File::open(path)?))?;
        Ok((model, params))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_vocabularies, FeatureFlags};
    use crate::synth::{synth_corpus, GrammarProfile};
    use crate::tree::TreeEncoderChoice;
    use rand_chacha::ChaCha8Rng;

    fn tiny(encoder: EncoderMode, tree: TreeEncoderChoice) -> ModelConfig {
        ModelConfig {
            features: FeatureFlags {
                word: true,
                pos: true,
                tree: tree != TreeEncoderChoice::None,
                ..FeatureFlags::default()
            },
            dims: crate::features::FeatureDims { word: 4, lemma: 4, pos: 3 },
            tree,
            tree_hidden: 4,
            encoder,
            lstm_hidden: 5,
            lstm_layers: 1,
            lang_dim: 2,
            repr_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_and_prediction_run() {
        let c = synth_corpus(1, 5, 20, GrammarProfile::SyntaxDetermined);
        let v = build_vocabularies(&c, 1).unwrap();
        for (mode, tree) in [
            (EncoderMode::Pgn, TreeEncoderChoice::Gcn),
            (EncoderMode::Basic, TreeEncoderChoice::TreeLstm),
        ] {
            let mut p = Params::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let m = SrlModel::new(&mut p, tiny(mode, tree), v.clone(), LabelSet::ordered(["en"]), None, None, &mut rng)
                .unwrap();
            let mut t = Tape::training(&p, 3);
            let mut cache = WeightCache::new();
            let l = m.loss(&mut t, &mut cache, &c.sentences[0], None).unwrap();
            assert!(t.scalar(l.total).is_finite() && t.scalar(l.total) > 0.0);
            assert!(t.backward(l.total).is_ok());
            let pred = m.predict(&p, &c.sentences[0], None, false).unwrap();
            assert!(pred.triplets.iter().all(|tr| tr.predicate >= 1 && tr.argument <= c.sentences[0].len()));
        }
    }

    #[test]
    fn unseen_language_uses_mean_vector() {
        let c = synth_corpus(1, 3, 20, GrammarProfile::SyntaxDetermined);
        let v = build_vocabularies(&c, 1).unwrap();
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = SrlModel::new(
            &mut p,
            tiny(EncoderMode::Pgn, TreeEncoderChoice::None),
            v,
            LabelSet::ordered(["en", "de"]),
            None,
            None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.lang_sel("de"), Some(LangSel::Id(1)));
        assert_eq!(m.lang_sel("fr"), Some(LangSel::Mean));
    }

    #[test]
    fn save_and_load_round_trip() {
        let c = synth_corpus(2, 4, 20, GrammarProfile::SyntaxDetermined);
        let v = build_vocabularies(&c, 1).unwrap();
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SrlModel::new(
            &mut p,
            tiny(EncoderMode::Pgn, TreeEncoderChoice::Gcn),
            v,
            LabelSet::ordered(["en"]),
            None,
            None,
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&p, &path).unwrap();
        let (m2, p2) = SrlModel::load(&path, None, None).unwrap();
        assert_eq!(p2.to_bytes(), p.to_bytes());
        let s = &c.sentences[1];
        assert_eq!(
            m.predict(&p, s, None, false).unwrap(),
            m2.predict(&p2, s, None, false).unwrap()
        );
    }

    #[test]
    fn ho_flag_requires_model() {
        let c = synth_corpus(1, 3, 20, GrammarProfile::SyntaxDetermined);
        let v = build_vocabularies(&c, 1).unwrap();
        let mut cfg = tiny(EncoderMode::Basic, TreeEncoderChoice::None);
        cfg.features.ho = true;
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SrlModel::new(&mut p, cfg, v, LabelSet::ordered(["en"]), None, None, &mut rng).is_err());
    }
}
