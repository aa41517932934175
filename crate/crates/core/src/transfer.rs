//! Bilingual and multi-source transfer grids and their TSV form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::conllu::Corpus;
use crate::error::{Error, Result};
use crate::features::ContextVectorStore;
use crate::ho::HoModel;
use crate::metrics::MetricsReport;
use crate::train::{evaluate_arg_labeling, evaluate_end2end, train_model};

pub const TSV_HEADER: &str = "source\ttarget\tmode\tP\tR\tF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransferMode {
    Bilingual,
    MultiSource,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Bilingual => "bilingual",
            TransferMode::MultiSource => "multi",
        })
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilingual" => Ok(TransferMode::Bilingual),
            "multi" | "multi-source" => Ok(TransferMode::MultiSource),
            other => Err(Error::Config(format!("unknown transfer mode `{other}`"))),
        }
    }
}

/// Training and evaluation data of one language.
#[derive(Clone, Debug, Default)]
pub struct LanguageData {
    pub train: Corpus,
    pub test: Corpus,
}

/// One grid cell. Scores are kept at the one-decimal precision they are
/// reported with.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferCell {
    pub sources: Vec<String>,
    pub target: String,
    pub mode: TransferMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl TransferCell {
    pub fn new(sources: Vec<String>, target: String, mode: TransferMode, report: &MetricsReport) -> Self {
        TransferCell {
            sources,
            target,
            mode,
            precision: round1(report.precision()),
            recall: round1(report.recall()),
            f1: round1(report.f1()),
        }
    }

    pub fn name(&self) -> String {
        format!("{}->{}", self.sources.join("+"), self.target)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferMatrix {
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn get(&self, source: &str, target: &str) -> Option<&TransferCell> {
        self.cells
            .iter()
            .find(|c| c.target == target && c.sources.len() == 1 && c.sources[0] == source)
    }

    pub fn for_target<'a>(&'a self, target: &'a str) -> impl Iterator<Item = &'a TransferCell> {
        self.cells.iter().filter(move |c| c.target == target)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.1}\t{:.1}\t{:.1}\n",
                c.sources.join("+"),
                c.target,
                c.mode,
                c.precision,
                c.recall,
                c.f1
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == TSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing metrics header".into(),
                })
            }
        }
        let mut cells = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 columns, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number `{s}`: {e}")));
            cells.push(TransferCell {
                sources: f[0].split('+').map(str::to_string).collect(),
                target: f[1].to_string(),
                mode: f[2].parse().map_err(|e: Error| err(e.to_string()))?,
                precision: num(f[3])?,
                recall: num(f[4])?,
                f1: num(f[5])?,
            });
        }
        Ok(TransferMatrix { cells })
    }
}

/// Cells in grid order with their full reports.
#[derive(Clone, Debug, Default)]
pub struct TransferRun {
    pub matrix: TransferMatrix,
    pub reports: Vec<MetricsReport>,
}

/// Fills the grid over all languages in `data`. Bilingual mode trains one
/// model per source and tests it on every other language; multi-source mode
/// trains one model per target on all remaining languages.
pub fn run_transfer_matrix(
    template: &ExperimentConfig,
    data: &BTreeMap<String, LanguageData>,
    mode: TransferMode,
    gold_predicates: bool,
    context: Option<&ContextVectorStore>,
    ho: Option<&HoModel>,
) -> Result<TransferRun> {
    if data.len() < 2 {
        return Err(Error::Config("a transfer matrix needs at least two languages".into()));
    }
    let langs: Vec<&String> = data.keys().collect();
    let mut plan: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    match mode {
        TransferMode::Bilingual => {
            for s in &langs {
                let targets = langs.iter().filter(|t| *t != s).map(|t| t.to_string()).collect();
                plan.push((vec![s.to_string()], targets));
            }
        }
        TransferMode::MultiSource => {
            for t in &langs {
                let sources = langs.iter().filter(|s| *s != t).map(|s| s.to_string()).collect();
                plan.push((sources, vec![t.to_string()]));
            }
        }
    }

    let mut run = TransferRun::default();
    for (sources, targets) in plan {
        let label = |target: &str| format!("cell {}->{}", sources.join("+"), target);
        let fail = |target: &str, e: Error| Error::Invalid(format!("{}: {e}", label(target)));
        let mut cfg = template.clone();
        cfg.sources = sources.clone();
        cfg.target = (targets.len() == 1).then(|| targets[0].clone());
        let train = Corpus::concat(sources.iter().map(|s| &data[s].train));
        let first = targets.first().map(String::as_str).unwrap_or("");
        let out = train_model(&cfg, &train, context.cloned(), ho.cloned()).map_err(|e| fail(first, e))?;
        for target in &targets {
            let test = &data[target].test;
            let eval = if gold_predicates {
                evaluate_arg_labeling(&out.model, &out.params, test)
            } else {
                evaluate_end2end(&out.model, &out.params, test)
            }
            .map_err(|e| fail(target, e))?;
            log::info!("{}: F1 {:.1}", label(target), eval.report.f1());
            run.matrix
                .cells
                .push(TransferCell::new(sources.clone(), target.clone(), mode, &eval.report));
            run.reports.push(eval.report);
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let m = TransferMatrix {
            cells: vec![
                TransferCell {
                    sources: vec!["de".into(), "fr".into()],
                    target: "en".into(),
                    mode: TransferMode::MultiSource,
                    precision: 51.2,
                    recall: 0.0,
                    f1: 100.0,
                },
                TransferCell {
                    sources: vec!["en".into()],
                    target: "de".into(),
                    mode: TransferMode::Bilingual,
                    precision: 3.4,
                    recall: 7.5,
                    f1: 4.7,
                },
            ],
        };
        let text = m.to_tsv();
        let back = TransferMatrix::from_tsv(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_tsv(), text);
        assert!(text.starts_with("source\ttarget\tmode\tP\tR\tF1\nde+fr\ten\tmulti\t51.2\t0.0\t100.0\n"));
    }

    #[test]
    fn rejects_malformed_rows() {
        assert!(TransferMatrix::from_tsv("nope\n").is_err());
        let bad = format!("{TSV_HEADER}\nen\tde\tbilingual\t1.0\t2.0\n");
        let err = TransferMatrix::from_tsv(&bad).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
