//! Seeded generator of small CoNLL-U-plus corpora.
//!
//! Trees are grown top-down from a VERB root with POS-conditioned
//! dependents, then linearized by placing each dependent on a random side
//! of its head, so every tree is projective and single-rooted. The
//! dependency label is a fixed function of (head UPOS, dependent UPOS) and
//! every VERB is a predicate. Under [`GrammarProfile::SyntaxDetermined`]
//! each role is a fixed function of the dependent's label, so the tree and
//! POS tags fully determine the gold triplets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conllu::{Corpus, PredicateFrame, Sentence, Token};

pub const MIN_TOKENS: usize = 3;
pub const MAX_TOKENS: usize = 12;

/// Tags used by the generator; each vocabulary word owns exactly one.
pub const SYNTH_UPOS: [&str; 10] = [
    "NOUN", "VERB", "PRON", "PROPN", "NUM", "ADV", "DET", "ADJ", "ADP", "PUNCT",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrammarProfile {
    /// Role = fixed function of the argument's dependency label.
    SyntaxDetermined,
    /// Same predicate–argument structure, but each role is drawn uniformly.
    RandomRoles,
}

impl std::str::FromStr for GrammarProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "syntax-determined" => Ok(Self::SyntaxDetermined),
            "random-roles" => Ok(Self::RandomRoles),
            other => Err(format!("unknown grammar profile `{other}`")),
        }
    }
}

/// Dependency label of a dependent attached to `head`, or `None` when the
/// generator never produces that pair.
pub fn deprel_for(head: &str, dep: &str) -> Option<&'static str> {
    Some(match (head, dep) {
        ("VERB", "PRON") => "nsubj",
        ("VERB", "NOUN") => "obj",
        ("VERB", "PROPN") => "iobj",
        ("VERB", "NUM") => "obl:tmod",
        ("VERB", "ADV") => "advmod",
        ("VERB", "VERB") => "ccomp",
        ("VERB", "PUNCT") => "punct",
        ("NOUN", "DET") => "det",
        ("NOUN", "ADJ") => "amod",
        ("NOUN", "NOUN") => "nmod",
        ("NOUN", "ADP") => "case",
        ("NOUN", "NUM") => "nummod",
        ("ADJ", "ADV") => "advmod",
        _ => return None,
    })
}

/// Role carried by a dependent of a predicate under the syntax-determined
/// profile.
pub fn role_for(deprel: &str) -> Option<&'static str> {
    Some(match deprel {
        "nsubj" => "A0",
        "obj" | "ccomp" => "A1",
        "iobj" => "A2",
        "obl:tmod" => "AM-TMP",
        "advmod" => "AM-MNR",
        _ => return None,
    })
}

pub const SYNTH_ROLES: [&str; 5] = ["A0", "A1", "A2", "AM-TMP", "AM-MNR"];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_sentences: usize,
    pub vocab_size: usize,
    pub profile: GrammarProfile,
    pub language: String,
    /// Fraction of the vocabulary whose forms are shared across languages.
    pub shared_fraction: f64,
    /// Resample sentences whose predicate or argument counts exceed
    /// `ceil(α·n)` for these beam ratios.
    pub beam_fit: Option<(f64, f64)>,
}

impl SynthConfig {
    pub fn new(seed: u64, n_sentences: usize, vocab_size: usize, profile: GrammarProfile) -> Self {
        Self {
            seed,
            n_sentences,
            vocab_size,
            profile,
            language: "en".into(),
            shared_fraction: 1.0,
            beam_fit: Some((0.4, 0.7)),
        }
    }

    pub fn language(mut self, lang: impl Into<String>) -> Self {
        self.language = lang.into();
        self
    }

    pub fn shared_fraction(mut self, f: f64) -> Self {
        self.shared_fraction = f;
        self
    }

    pub fn beam_fit(mut self, fit: Option<(f64, f64)>) -> Self {
        self.beam_fit = fit;
        self
    }
}

/// Generates a corpus in language "en" with a fully shared vocabulary.
pub fn synth_corpus(seed: u64, n_sentences: usize, vocab_size: usize, profile: GrammarProfile) -> Corpus {
    synth(&SynthConfig::new(seed, n_sentences, vocab_size, profile))
}

struct Lexicon {
    by_pos: BTreeMap<&'static str, Vec<String>>,
}

impl Lexicon {
    fn new(cfg: &SynthConfig) -> Self {
        let size = cfg.vocab_size.max(SYNTH_UPOS.len());
        let shared = (cfg.shared_fraction.clamp(0.0, 1.0) * size as f64).round() as usize;
        let mut by_pos: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
        for k in 0..size {
            let pos = SYNTH_UPOS[k % SYNTH_UPOS.len()];
            let form = if k < shared {
                format!("w{k}")
            } else {
                format!("{}{k}", cfg.language)
            };
            by_pos.entry(pos).or_default().push(form);
        }
        Self { by_pos }
    }

    fn word(&self, pos: &str, rng: &mut ChaCha8Rng) -> String {
        self.by_pos[pos].choose(rng).expect("every tag has words").clone()
    }
}

struct Node {
    upos: &'static str,
    children: Vec<usize>,
}

fn grow(nodes: &mut Vec<Node>, upos: &'static str, depth: usize, rng: &mut ChaCha8Rng) -> usize {
    let id = nodes.len();
    nodes.push(Node {
        upos,
        children: Vec::new(),
    });
    let options: &[(&'static str, f64)] = match upos {
        "VERB" => &[
            ("PRON", 0.55),
            ("NOUN", 0.6),
            ("PROPN", 0.25),
            ("NUM", 0.2),
            ("ADV", 0.25),
            ("VERB", if depth < 2 { 0.3 } else { 0.0 }),
            ("PUNCT", if depth == 0 { 0.4 } else { 0.0 }),
        ],
        "NOUN" => &[
            ("DET", 0.5),
            ("ADJ", 0.3),
            ("NOUN", if depth < 3 { 0.2 } else { 0.0 }),
            ("NUM", 0.1),
        ],
        "ADJ" => &[("ADV", 0.2)],
        _ => &[],
    };
    let mut kids = Vec::new();
    for &(pos, p) in options {
        if rng.gen::<f64>() < p {
            kids.push(pos);
        }
    }
    // nominal modifiers carry a case marker
    if upos == "NOUN" && depth > 0 && rng.gen::<f64>() < 0.3 {
        kids.push("ADP");
    }
    for pos in kids {
        let child = grow(nodes, pos, depth + 1, rng);
        nodes[id].children.push(child);
    }
    id
}

fn linearize(nodes: &[Node], at: usize, rng: &mut ChaCha8Rng, order: &mut Vec<usize>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &c in &nodes[at].children {
        if rng.gen::<bool>() {
            left.push(c);
        } else {
            right.push(c);
        }
    }
    left.shuffle(rng);
    right.shuffle(rng);
    for c in left {
        linearize(nodes, c, rng, order);
    }
    order.push(at);
    for c in right {
        linearize(nodes, c, rng, order);
    }
}

fn beam_size(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64).ceil() as usize).clamp(1, n)
}

fn sentence(
    cfg: &SynthConfig,
    lex: &Lexicon,
    rng: &mut ChaCha8Rng,
    number: usize,
) -> Sentence {
    loop {
        let mut nodes = Vec::new();
        grow(&mut nodes, "VERB", 0, rng);
        let n = nodes.len();
        if !(MIN_TOKENS..=MAX_TOKENS).contains(&n) {
            continue;
        }
        let mut order = Vec::with_capacity(n);
        linearize(&nodes, 0, rng, &mut order);
        // node id → 1-based token index
        let mut position = vec![0; n];
        for (pos, &node) in order.iter().enumerate() {
            position[node] = pos + 1;
        }
        let mut head_of = vec![0usize; n];
        let mut deprel = vec!["root"; n];
        for (id, node) in nodes.iter().enumerate() {
            for &c in &node.children {
                head_of[c] = position[id];
                deprel[c] = deprel_for(node.upos, nodes[c].upos).expect("generator table");
            }
        }
        let tokens: Vec<Token> = order
            .iter()
            .enumerate()
            .map(|(pos, &node)| {
                let form = lex.word(nodes[node].upos, rng);
                Token {
                    index: pos + 1,
                    lemma: form.clone(),
                    form,
                    upos: nodes[node].upos.to_string(),
                    head: head_of[node],
                    deprel: deprel[node].to_string(),
                }
            })
            .collect();
        let mut frames = Vec::new();
        for tok in tokens.iter().filter(|t| t.upos == "VERB") {
            let node = order[tok.index - 1];
            let mut roles = BTreeMap::new();
            for &c in &nodes[node].children {
                if let Some(role) = role_for(deprel[c]) {
                    let label = match cfg.profile {
                        GrammarProfile::SyntaxDetermined => role,
                        GrammarProfile::RandomRoles => {
                            SYNTH_ROLES.choose(rng).copied().expect("non-empty")
                        }
                    };
                    roles.insert(position[c], label.to_string());
                }
            }
            frames.push(PredicateFrame {
                predicate_index: tok.index,
                sense: format!("{}.01", tok.lemma),
                roles,
            });
        }
        if let Some((ap, aa)) = cfg.beam_fit {
            let args: std::collections::BTreeSet<usize> =
                frames.iter().flat_map(|f| f.roles.keys().copied()).collect();
            if frames.len() > beam_size(ap, n) || args.len() > beam_size(aa, n) {
                continue;
            }
        }
        return Sentence {
            sentence_id: format!("{}-{:04}", cfg.language, number),
            language: cfg.language.clone(),
            tokens,
            frames,
        };
    }
}

pub fn synth(cfg: &SynthConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = Lexicon::new(cfg);
    let sentences = (0..cfg.n_sentences.max(1))
        .map(|k| sentence(cfg, &lex, &mut rng, k + 1))
        .collect();
    Corpus::new(sentences)
}
