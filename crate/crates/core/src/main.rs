use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xsrl::config::ExperimentConfig;
use xsrl::conllu::Corpus;
use xsrl::gradsuite::full_suite;
use xsrl::ho::{GnnConfig, HoModel};
use xsrl::metrics::MetricsReport;
use xsrl::model::SrlModel;
use xsrl::synth::{synth, GrammarProfile, SynthConfig};
use xsrl::train::{
    evaluate_arg_labeling, evaluate_end2end, load_corpus, load_resources, load_sources, train_model_with,
    write_predictions,
};
use xsrl::transfer::{run_transfer_matrix, LanguageData, TransferCell, TransferMatrix, TransferMode};
use xsrl::{Error, Result};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "xsrl", version, about = "Cross-lingual end-to-end semantic role labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test corpora, one pair per language.
    SynthData(SynthArgs),
    /// Pretrain the high-order GNN on joint word-syntax graphs.
    PretrainHo(PretrainArgs),
    /// Train a model on the configured source languages.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Run the bilingual or multi-source transfer grid.
    TransferMatrix(TransferArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "en")]
    languages: Vec<String>,
    #[arg(long, default_value_t = 200)]
    train_sentences: usize,
    #[arg(long, default_value_t = 50)]
    test_sentences: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value = "syntax-determined")]
    profile: GrammarProfile,
    /// Fraction of word forms shared across languages.
    #[arg(long, default_value_t = 1.0)]
    shared_fraction: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// CoNLL-U-plus training files.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sentences held out from the end of the corpus for evaluation.
    #[arg(long, default_value_t = 0)]
    heldout: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Configuration file plus per-key overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    sources: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    tree: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    context_vectors: Option<String>,
    #[arg(long)]
    ho_checkpoint: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {kv}`: expected key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let named = [
            ("encoder", self.encoder.clone()),
            ("sources", self.sources.clone()),
            ("target", self.target.clone()),
            ("features", self.features.clone()),
            ("tree", self.tree.clone()),
            ("data_dir", self.data_dir.clone()),
            ("context_vectors", self.context_vectors.clone()),
            ("ho_checkpoint", self.ho_checkpoint.clone()),
            ("epochs", self.epochs.map(|e| e.to_string())),
            ("seed", self.seed.map(|s| s.to_string())),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint path; the model description goes next to it as `.json`.
    #[arg(long)]
    out: PathBuf,
    /// Writes `epoch<TAB>loss` lines.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus to score; defaults to the target language's test file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fix candidate predicates to the gold frames.
    #[arg(long)]
    gold_predicates: bool,
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Append per-label and distance sections.
    #[arg(long)]
    breakdown: bool,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "bilingual")]
    mode: TransferMode,
    /// Languages of the grid; defaults to every `{lang}-train` file in the data directory.
    #[arg(long, value_delimiter = ',')]
    languages: Vec<String>,
    #[arg(long)]
    gold_predicates: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::PretrainHo(a) => pretrain_ho(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::TransferMatrix(a) => transfer(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    corpus.write_conllu_plus(&mut w)?;
    w.flush()?;
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<ExitCode> {
    fs::create_dir_all(&a.out)?;
    for (i, lang) in a.languages.iter().enumerate() {
        let cfg = SynthConfig::new(a.seed + i as u64, a.train_sentences + a.test_sentences, a.vocab, a.profile)
            .language(lang.as_str())
            .shared_fraction(a.shared_fraction);
        let mut all = synth(&cfg).sentences;
        let test = all.split_off(a.train_sentences.min(all.len()));
        for (split, sentences) in [("train", all), ("test", test)] {
            let path = a.out.join(format!("{lang}-{split}.conllu"));
            write_corpus(&path, &Corpus::new(sentences))?;
            println!("{}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn pretrain_ho(a: PretrainArgs) -> Result<ExitCode> {
    let parts = a.input.iter().map(|p| load_corpus(p)).collect::<Result<Vec<_>>>()?;
    let mut sentences = Corpus::concat(&parts).sentences;
    if a.heldout >= sentences.len() {
        return Err(Error::Config("held-out split leaves no training sentences".into()));
    }
    let heldout = sentences.split_off(sentences.len() - a.heldout);
    let mut cfg = GnnConfig::default();
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    cfg.validate()?;
    let model = HoModel::pretrain(&Corpus::new(sentences), cfg, a.seed)?;
    model.save(&a.out)?;
    if let Some(l) = model.losses.last() {
        println!("final-loss\t{l:.4}");
    }
    if !heldout.is_empty() {
        let e = model.evaluate(&heldout, a.seed)?;
        println!("mask-accuracy\t{:.4}", e.mask_accuracy);
        println!("majority-rate\t{:.4}", e.majority_rate);
        println!("edge-auc\t{:.4}", e.auc);
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let (context, ho) = load_resources(&cfg)?;
    let corpus = load_sources(&cfg)?;
    let mut log = a.loss_log.as_deref().map(File::create).transpose()?.map(BufWriter::new);
    let mut log_err = None;
    let out = train_model_with(&cfg, &corpus, context, ho, |epoch, loss| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{}\t{loss:.6}", epoch + 1) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    out.model.save(&out.params, &a.out)?;
    println!("{}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn metrics_row(model: &SrlModel, target: &str, report: &MetricsReport) -> TransferCell {
    let sources: Vec<String> = model.languages.iter().map(str::to_string).collect();
    let mode = if sources.len() > 1 {
        TransferMode::MultiSource
    } else {
        TransferMode::Bilingual
    };
    TransferCell::new(sources, target.to_string(), mode, report)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    let (context, ho) = load_resources(&cfg)?;
    let (model, params) = SrlModel::load(&a.checkpoint, context, ho)?;
    let (path, target) = match (&a.input, &cfg.target) {
        (Some(p), t) => (p.clone(), t.clone().unwrap_or_else(|| "-".into())),
        (None, Some(t)) => (cfg.corpus_path(t, "test"), t.clone()),
        (None, None) => return Err(Error::Config("eval needs --input or a target language".into())),
    };
    let corpus = load_corpus(&path)?;
    let result = if a.gold_predicates {
        evaluate_arg_labeling(&model, &params, &corpus)?
    } else {
        evaluate_end2end(&model, &params, &corpus)?
    };
    if let Some(p) = &a.predictions {
        let mut w = BufWriter::new(File::create(p)?);
        write_predictions(&mut w, &model, &corpus.sentences, &result.predictions)?;
        w.flush()?;
    }
    let matrix = TransferMatrix {
        cells: vec![metrics_row(&model, &target, &result.report)],
    };
    print!("{}", matrix.to_tsv());
    if a.breakdown {
        print!("{}", result.report.breakdown_tsv());
    }
    Ok(ExitCode::SUCCESS)
}

fn discover_languages(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut langs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(lang) = name.strip_suffix(suffix) {
            langs.push(lang.to_string());
        }
    }
    langs.sort();
    Ok(langs)
}

fn transfer(a: TransferArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    let langs = if a.languages.is_empty() {
        let probe = cfg.corpus_path("", "train");
        let suffix = probe.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        discover_languages(&cfg.data_dir, &suffix)?
    } else {
        a.languages.clone()
    };
    let mut data = BTreeMap::new();
    for l in &langs {
        data.insert(
            l.clone(),
            LanguageData {
                train: load_corpus(&cfg.corpus_path(l, "train"))?,
                test: load_corpus(&cfg.corpus_path(l, "test"))?,
            },
        );
    }
    let (context, ho) = load_resources(&cfg)?;
    let run = run_transfer_matrix(&cfg, &data, a.mode, a.gold_predicates, context.as_ref(), ho.as_ref())?;
    let tsv = run.matrix.to_tsv();
    match &a.out {
        Some(p) => fs::write(p, &tsv)?,
        None => print!("{tsv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: GradArgs) -> Result<ExitCode> {
    let mut worst: f64 = 0.0;
    for (name, r) in full_suite(a.seed)? {
        println!("{name}\t{:.3e}\t{}", r.max_rel_error, r.checked);
        worst = worst.max(r.max_rel_error);
    }
    println!("max-relative-error\t{worst:.3e}");
    Ok(if worst <= GRAD_TOLERANCE {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
