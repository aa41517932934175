//! CoNLL-U-plus corpora: ten standard CoNLL-U columns, a predicate-sense
//! column, then one role column per predicate in textual order.
//!
//! ```text
//! # sent_id = s1
//! # language = en
//! 1	Dogs	dog	NOUN	_	_	2	nsubj	_	_	_	A0
//! 2	bark	bark	VERB	_	_	0	root	_	_	bark.01	_
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STANDARD_COLUMNS: usize = 10;
const SENSE_COLUMN: usize = 10;
const EMPTY: &str = "_";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 1-based position.
    pub index: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    /// 0 is the virtual root.
    pub head: usize,
    pub deprel: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateFrame {
    pub predicate_index: usize,
    pub sense: String,
    /// Argument token index → role label.
    pub roles: BTreeMap<usize, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: String,
    pub language: String,
    pub tokens: Vec<Token>,
    /// Sorted by predicate index.
    pub frames: Vec<PredicateFrame>,
}

/// A gold `(predicate, argument, role)` triple with 1-based token indices.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledTriplet {
    pub predicate: usize,
    pub argument: usize,
    pub label: String,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks indices, the single-rooted acyclic head structure and frames.
    /// Errors carry the 1-based token index they concern.
    pub fn validate(&self) -> std::result::Result<(), (usize, String)> {
        let n = self.tokens.len();
        if n == 0 {
            return Err((0, "sentence has no tokens".into()));
        }
        let mut root = None;
        for (pos, tok) in self.tokens.iter().enumerate() {
            if tok.index != pos + 1 {
                return Err((pos + 1, format!("token id {} out of sequence", tok.index)));
            }
            if tok.head == tok.index {
                return Err((tok.index, "self-headed token".into()));
            }
            if tok.head > n {
                return Err((tok.index, format!("head {} outside sentence", tok.head)));
            }
            if tok.head == 0 {
                if root.is_some() {
                    return Err((tok.index, "multiple roots".into()));
                }
                root = Some(tok.index);
            }
        }
        if root.is_none() {
            return Err((1, "no token attached to the root".into()));
        }
        for tok in &self.tokens {
            let mut cur = tok.index;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err((tok.index, "cyclic head structure".into()));
                }
            }
        }
        let mut last = 0;
        for frame in &self.frames {
            let p = frame.predicate_index;
            if p == 0 || p > n {
                return Err((p, "predicate index outside sentence".into()));
            }
            if p <= last {
                return Err((p, "frames not in textual order".into()));
            }
            last = p;
            if frame.sense == EMPTY || frame.sense.is_empty() {
                return Err((p, "predicate sense must not be empty".into()));
            }
            if let Some((&a, _)) = frame.roles.iter().find(|(&a, _)| a == 0 || a > n) {
                return Err((a, "argument index outside sentence".into()));
            }
        }
        Ok(())
    }

    pub fn frame_at(&self, predicate: usize) -> Option<&PredicateFrame> {
        self.frames.iter().find(|f| f.predicate_index == predicate)
    }
}

/// All non-null labeled triplets of a sentence: one per (frame, role entry).
pub fn derive_triplets(sentence: &Sentence) -> BTreeSet<LabeledTriplet> {
    sentence
        .frames
        .iter()
        .flat_map(|f| {
            f.roles.iter().map(move |(&a, l)| LabeledTriplet {
                predicate: f.predicate_index,
                argument: a,
                label: l.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageStats {
    pub sentences: usize,
    pub predicates: usize,
    pub arguments: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    /// Role inventory, without the null label.
    pub labels: BTreeSet<String>,
    pub word_counts: BTreeMap<String, usize>,
    pub lemma_counts: BTreeMap<String, usize>,
    pub stats: BTreeMap<String, LanguageStats>,
}

impl Corpus {
    /// Builds a corpus and recounts every derived field from `sentences`.
    pub fn new(sentences: Vec<Sentence>) -> Self {
        let mut corpus = Corpus {
            sentences,
            ..Default::default()
        };
        for s in &corpus.sentences {
            let st = corpus.stats.entry(s.language.clone()).or_default();
            st.sentences += 1;
            st.predicates += s.frames.len();
            st.arguments += s.frames.iter().map(|f| f.roles.len()).sum::<usize>();
            for t in &s.tokens {
                *corpus.word_counts.entry(t.form.clone()).or_default() += 1;
                *corpus.lemma_counts.entry(t.lemma.clone()).or_default() += 1;
            }
            for f in &s.frames {
                corpus.labels.extend(f.roles.values().cloned());
            }
        }
        corpus
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.stats.keys().map(String::as_str)
    }

    /// Concatenation of several corpora with statistics recounted.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Corpus>) -> Corpus {
        Corpus::new(
            parts
                .into_iter()
                .flat_map(|c| c.sentences.iter().cloned())
                .collect(),
        )
    }

    pub fn to_conllu_plus(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            write_sentence(&mut out, s);
        }
        out
    }

    pub fn write_conllu_plus<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_conllu_plus().as_bytes())?;
        Ok(())
    }
}

fn write_sentence(out: &mut String, s: &Sentence) {
    let _ = writeln!(out, "# sent_id = {}", s.sentence_id);
    let _ = writeln!(out, "# language = {}", s.language);
    for t in &s.tokens {
        let sense = s
            .frame_at(t.index)
            .map(|f| f.sense.as_str())
            .unwrap_or(EMPTY);
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t_\t{}",
            t.index, t.form, t.lemma, t.upos, t.head, t.deprel, sense
        );
        for f in &s.frames {
            let role = f.roles.get(&t.index).map(String::as_str).unwrap_or(EMPTY);
            let _ = write!(out, "\t{role}");
        }
        out.push('\n');
    }
    out.push('\n');
}

struct PendingToken {
    line: usize,
    token: Token,
    sense: String,
    roles: Vec<String>,
    columns: usize,
}

#[derive(Default)]
struct Pending {
    start_line: usize,
    sent_id: Option<String>,
    language: Option<String>,
    tokens: Vec<PendingToken>,
}

pub fn parse_conllu_plus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut pending = Pending::default();
    let mut line_no = 0;
    for line in reader.lines() {
        line_no += 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut pending, &mut sentences)?;
            continue;
        }
        if pending.start_line == 0 {
            pending.start_line = line_no;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                match key.trim() {
                    "sent_id" => pending.sent_id = Some(value.trim().to_string()),
                    "language" => pending.language = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        if let Some(tok) = parse_token_line(line, line_no)? {
            pending.tokens.push(tok);
        }
    }
    flush(&mut pending, &mut sentences)?;
    Ok(Corpus::new(sentences))
}

pub fn parse_conllu_plus_str(text: &str) -> Result<Corpus> {
    parse_conllu_plus(text.as_bytes())
}

fn parse_token_line(line: &str, line_no: usize) -> Result<Option<PendingToken>> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() <= STANDARD_COLUMNS {
        return Err(Error::Parse {
            line: line_no,
            msg: format!(
                "malformed column count: expected at least {} tab-separated columns, got {}",
                STANDARD_COLUMNS + 1,
                cols.len()
            ),
        });
    }
    let id = cols[0];
    if id.contains('-') || id.contains('.') {
        log::warn!("line {line_no}: skipping multi-word token or empty node `{id}`");
        return Ok(None);
    }
    let index: usize = id.parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("non-integer token id `{id}`"),
    })?;
    let head: usize = cols[6].parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("non-integer head `{}`", cols[6]),
    })?;
    Ok(Some(PendingToken {
        line: line_no,
        token: Token {
            index,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            head,
            deprel: cols[7].to_string(),
        },
        sense: cols[SENSE_COLUMN].to_string(),
        roles: cols[SENSE_COLUMN + 1..].iter().map(|s| s.to_string()).collect(),
        columns: cols.len(),
    }))
}

fn flush(pending: &mut Pending, out: &mut Vec<Sentence>) -> Result<()> {
    let p = std::mem::take(pending);
    if p.tokens.is_empty() {
        return Ok(());
    }
    let first_line = p.tokens[0].line;
    let columns = p.tokens[0].columns;
    if let Some(t) = p.tokens.iter().find(|t| t.columns != columns) {
        return Err(Error::Parse {
            line: t.line,
            msg: format!(
                "malformed column count: {} columns where the sentence uses {columns}",
                t.columns
            ),
        });
    }
    let predicates: Vec<usize> = p
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.sense != EMPTY)
        .map(|(i, _)| i)
        .collect();
    let role_columns = columns - STANDARD_COLUMNS - 1;
    if role_columns != predicates.len() {
        return Err(Error::Parse {
            line: first_line,
            msg: format!(
                "role-column/predicate mismatch: {role_columns} role columns for {} predicates",
                predicates.len()
            ),
        });
    }
    let frames = predicates
        .iter()
        .enumerate()
        .map(|(k, &pos)| PredicateFrame {
            predicate_index: p.tokens[pos].token.index,
            sense: p.tokens[pos].sense.clone(),
            roles: p
                .tokens
                .iter()
                .filter(|t| t.roles[k] != EMPTY)
                .map(|t| (t.token.index, t.roles[k].clone()))
                .collect(),
        })
        .collect();
    let sentence = Sentence {
        sentence_id: p.sent_id.unwrap_or_else(|| format!("s{}", out.len() + 1)),
        language: p.language.unwrap_or_else(|| "und".to_string()),
        tokens: p.tokens.iter().map(|t| t.token.clone()).collect(),
        frames,
    };
    if let Err((tok, msg)) = sentence.validate() {
        let line = p
            .tokens
            .iter()
            .find(|t| t.token.index == tok)
            .map_or(first_line, |t| t.line);
        return Err(Error::Parse {
            line,
            msg: format!("{msg}, line {line}"),
        });
    }
    out.push(sentence);
    Ok(())
}
