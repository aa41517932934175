//! Mini-batch training, end-to-end and gold-predicate evaluation, and the
//! file loading that feeds them.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsrl_tensor::{Adam, AdamConfig, Params, Tape, Tensor};

use crate::config::ExperimentConfig;
use crate::conllu::{derive_triplets, parse_conllu_plus, Corpus, LabeledTriplet, Sentence};
use crate::error::{Error, Result};
use crate::features::{build_vocabularies, load_context_vectors, ContextVectorStore, LabelSet};
use crate::ho::HoModel;
use crate::metrics::MetricsReport;
use crate::model::{SrlModel, WeightCache};
use crate::srl::{to_labeled, Triplet};

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = File::open(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    parse_conllu_plus(BufReader::new(f))
}

/// Context vectors and pretrained GNN named by the configuration.
pub fn load_resources(cfg: &ExperimentConfig) -> Result<(Option<ContextVectorStore>, Option<HoModel>)> {
    let context = match &cfg.context_vectors {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::Feature(format!("{}: {e}", p.display())))?;
            Some(load_context_vectors(BufReader::new(f))?)
        }
        None => None,
    };
    let ho = cfg.ho_checkpoint.as_deref().map(HoModel::load).transpose()?;
    Ok((context, ho))
}

/// Concatenated training files of all source languages.
pub fn load_sources(cfg: &ExperimentConfig) -> Result<Corpus> {
    let parts = cfg
        .sources
        .iter()
        .map(|l| load_corpus(&cfg.corpus_path(l, "train")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::concat(&parts))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SrlModel,
    pub params: Params,
    /// Mean per-sentence loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub oracle_misses: Vec<usize>,
}

/// Trains a model on `train` under `cfg`. Multi-source corpora mix
/// languages within batches; each sentence drives the encoder with its own
/// language.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &Corpus,
    context: Option<ContextVectorStore>,
    ho: Option<HoModel>,
) -> Result<TrainOutcome> {
    train_model_with(cfg, train, context, ho, |_, _| {})
}

/// As `train_model`, calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_model_with<F>(
    cfg: &ExperimentConfig,
    train: &Corpus,
    context: Option<ContextVectorStore>,
    ho: Option<HoModel>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, f64),
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    if cfg.model.features.context && context.is_none() {
        return Err(Error::Feature("context vectors enabled but not loaded".into()));
    }
    if cfg.model.features.ho && ho.is_none() {
        return Err(Error::Feature("high-order features enabled but no checkpoint loaded".into()));
    }
    let languages = LabelSet::ordered(cfg.sources.iter().cloned());
    if let Some(s) = train.sentences.iter().find(|s| languages.id(&s.language).is_none()) {
        return Err(Error::Config(format!(
            "sentence {} has language `{}` outside the sources",
            s.sentence_id, s.language
        )));
    }
    let vocabs = build_vocabularies(train, cfg.min_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::new();
    let model = SrlModel::new(&mut params, cfg.model.clone(), vocabs, languages, context, ho, &mut rng)?;
    for s in &train.sentences {
        model.check_resources(s)?;
    }
    let ho_cache: Vec<Option<Tensor>> = train
        .sentences
        .iter()
        .map(|s| model.ho_features(s))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut misses_log = Vec::new();
    for epoch in 0..cfg.epochs() {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut misses = 0;
        for batch in order.chunks(cfg.batch_size) {
            let tape_seed: u64 = rng.gen();
            let grads = {
                let mut tape = Tape::training(&params, tape_seed);
                let mut cache = WeightCache::new();
                let mut parts = Vec::with_capacity(batch.len());
                for &i in batch {
                    let l = model.loss(&mut tape, &mut cache, &train.sentences[i], ho_cache[i].as_ref())?;
                    epoch_loss += tape.scalar(l.total);
                    misses += l.oracle_misses;
                    parts.push(l.total);
                }
                let sum = tape.sum_set(&parts)?;
                let mean = tape.affine(sum, 1.0 / batch.len() as f64, 0.0);
                tape.backward(mean)?
            };
            params.zero_grad();
            params.accumulate(&grads);
            adam.step(&mut params)?;
        }
        let mean = epoch_loss / train.len() as f64;
        log::info!("epoch {}: loss {mean:.4}, oracle misses {misses}", epoch + 1);
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
        misses_log.push(misses);
    }
    Ok(TrainOutcome {
        model,
        params,
        epoch_losses,
        oracle_misses: misses_log,
    })
}

/// Predictions per sentence and the corpus-level report.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Vec<Triplet>>,
}

impl Evaluation {
    pub fn labeled(&self, model: &SrlModel) -> Vec<BTreeSet<LabeledTriplet>> {
        self.predictions
            .iter()
            .map(|p| to_labeled(p, &model.vocabs.roles))
            .collect()
    }
}

fn evaluate(model: &SrlModel, params: &Params, corpus: &Corpus, gold_predicates: bool) -> Result<Evaluation> {
    let mut out = Evaluation::default();
    for s in &corpus.sentences {
        model.check_resources(s)?;
        let ho = model.ho_features(s)?;
        let pred = model.predict(params, s, ho.as_ref(), gold_predicates)?;
        let labeled = to_labeled(&pred.triplets, &model.vocabs.roles);
        out.report.add_sentence(&labeled, &derive_triplets(s));
        out.report.oracle_misses += pred.oracle_misses;
        out.predictions.push(pred.triplets);
    }
    Ok(out)
}

/// Predicate, argument and label must all match a gold triplet.
pub fn evaluate_end2end(model: &SrlModel, params: &Params, corpus: &Corpus) -> Result<Evaluation> {
    evaluate(model, params, corpus, false)
}

/// As `evaluate_end2end`, with candidate predicates fixed to the gold
/// frame positions.
pub fn evaluate_arg_labeling(model: &SrlModel, params: &Params, corpus: &Corpus) -> Result<Evaluation> {
    evaluate(model, params, corpus, true)
}

/// Writes predictions in the tab-separated prediction format.
pub fn write_predictions<W: std::io::Write>(
    mut w: W,
    model: &SrlModel,
    sentences: &[Sentence],
    predictions: &[Vec<Triplet>],
) -> std::io::Result<()> {
    for (s, p) in sentences.iter().zip(predictions) {
        crate::srl::write_predictions(&mut w, &s.sentence_id, p, &model.vocabs.roles)?;
    }
    Ok(())
}
