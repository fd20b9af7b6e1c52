//! Column-format readers and the partial-annotation exchange format.
//!
//! The exchange format is one token per line, `surface<TAB>l1|l2|...`, with
//! a blank line between sequences. A leading `*` marks the gold label.

use std::fmt::Write as _;

use super::{Corpus, LabelId, LabelSet, PartialSequence, Token};
use crate::error::{Error, Result};

/// Which whitespace-separated columns hold the token and its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSpec {
    pub token_col: usize,
    /// `None` selects the last column of each line.
    pub label_col: Option<usize>,
}

impl ColumnSpec {
    pub fn new(token_col: usize, label_col: usize) -> Self {
        ColumnSpec {
            token_col,
            label_col: Some(label_col),
        }
    }

    pub fn last_label(token_col: usize) -> Self {
        ColumnSpec {
            token_col,
            label_col: None,
        }
    }

    fn min_columns(&self) -> usize {
        match self.label_col {
            Some(l) => self.token_col.max(l) + 1,
            None => (self.token_col + 1).max(2),
        }
    }
}

/// Splits text into blank-line separated blocks of `(line_number, line)`.
/// Lines starting with `-DOCSTART-` are dropped.
fn blocks(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if !line.starts_with("-DOCSTART-") {
            cur.push((i + 1, line));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Reads a fully labeled CoNLL column file. Every position gets a singleton
/// candidate set equal to its gold label.
pub fn parse_conll(text: &str, columns: ColumnSpec) -> Result<Corpus> {
    let need = columns.min_columns();
    let mut raw: Vec<Vec<(String, String)>> = Vec::new();
    for block in blocks(text) {
        let mut sent = Vec::with_capacity(block.len());
        for (lineno, line) in block {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < need {
                return Err(Error::parse(
                    lineno,
                    format!("expected at least {need} columns, found {}", cols.len()),
                ));
            }
            let label = match columns.label_col {
                Some(l) => cols[l],
                None => cols[cols.len() - 1],
            };
            sent.push((cols[columns.token_col].to_owned(), label.to_owned()));
        }
        raw.push(sent);
    }
    if raw.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let label_set = LabelSet::from_observed(raw.iter().flatten().map(|(_, l)| l.as_str()))?;
    let sequences = raw
        .into_iter()
        .map(|sent| {
            let (surfaces, labels): (Vec<String>, Vec<String>) = sent.into_iter().unzip();
            let gold = labels
                .iter()
                .map(|l| label_set.id(l).expect("label collected above"))
                .collect();
            PartialSequence::exact(surfaces, gold)
        })
        .collect();
    Corpus::new(sequences, label_set)
}

/// Reads only the token column, for unlabeled prediction input.
pub fn parse_tokens(text: &str, token_col: usize) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for block in blocks(text) {
        let mut sent = Vec::with_capacity(block.len());
        for (lineno, line) in block {
            let tok = line
                .split_whitespace()
                .nth(token_col)
                .ok_or_else(|| Error::parse(lineno, format!("missing token column {token_col}")))?;
            sent.push(tok.to_owned());
        }
        out.push(sent);
    }
    if out.is_empty() {
        return Err(Error::Data("no tokens in input".into()));
    }
    Ok(out)
}

/// Reads the partial-annotation exchange format.
///
/// A sequence carries gold labels when every one of its tokens marks exactly
/// one candidate with `*`; a sequence with no marks has no gold. Anything in
/// between is rejected. When `label_set` is `None` the set is collected from
/// the file.
pub fn parse_partial(text: &str, label_set: Option<&LabelSet>) -> Result<Corpus> {
    struct Line {
        surface: String,
        labels: Vec<String>,
        gold: Option<String>,
    }
    let mut raw: Vec<Vec<(usize, Line)>> = Vec::new();
    for block in blocks(text) {
        let mut sent = Vec::with_capacity(block.len());
        for (lineno, line) in block {
            let (surface, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected surface<TAB>labels"))?;
            let mut labels = Vec::new();
            let mut gold = None;
            for field in rest.trim().split('|') {
                let (name, marked) = match field.strip_prefix('*') {
                    Some(name) => (name, true),
                    None => (field, false),
                };
                if name.is_empty() {
                    return Err(Error::parse(lineno, "empty label"));
                }
                if marked {
                    if gold.is_some() {
                        return Err(Error::parse(lineno, "more than one gold mark"));
                    }
                    gold = Some(name.to_owned());
                }
                labels.push(name.to_owned());
            }
            sent.push((
                lineno,
                Line {
                    surface: surface.to_owned(),
                    labels,
                    gold,
                },
            ));
        }
        raw.push(sent);
    }
    if raw.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let label_set = match label_set {
        Some(set) => set.clone(),
        None => LabelSet::from_observed(
            raw.iter()
                .flatten()
                .flat_map(|(_, l)| l.labels.iter().map(String::as_str)),
        )?,
    };
    let mut sequences = Vec::with_capacity(raw.len());
    for sent in raw {
        let marked = sent.iter().filter(|(_, l)| l.gold.is_some()).count();
        if marked != 0 && marked != sent.len() {
            let lineno = sent.iter().find(|(_, l)| l.gold.is_none()).unwrap().0;
            return Err(Error::parse(
                lineno,
                "gold marked on some tokens of the sequence but not this one",
            ));
        }
        let mut tokens = Vec::with_capacity(sent.len());
        let mut candidates = Vec::with_capacity(sent.len());
        let mut gold = Vec::with_capacity(sent.len());
        for (lineno, line) in sent {
            let lookup = |name: &str| {
                label_set
                    .id(name)
                    .ok_or_else(|| Error::parse(lineno, format!("unknown label {name:?}")))
            };
            let mut ids = line
                .labels
                .iter()
                .map(|l| lookup(l))
                .collect::<Result<Vec<LabelId>>>()?;
            ids.sort_unstable();
            ids.dedup();
            if let Some(g) = &line.gold {
                gold.push(lookup(g)?);
            }
            tokens.push(Token::new(line.surface));
            candidates.push(ids);
        }
        sequences.push(PartialSequence {
            tokens,
            candidates,
            gold: (marked > 0).then_some(gold),
        });
    }
    Corpus::new(sequences, label_set)
}

pub fn write_partial(corpus: &Corpus) -> String {
    let mut out = String::new();
    for seq in &corpus.sequences {
        for (t, token) in seq.tokens.iter().enumerate() {
            out.push_str(&token.surface);
            out.push('\t');
            for (k, &y) in seq.candidates[t].iter().enumerate() {
                if k > 0 {
                    out.push('|');
                }
                if seq.gold.as_ref().is_some_and(|g| g[t] == y) {
                    out.push('*');
                }
                let _ = write!(out, "{}", corpus.label_set.name(y));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_token_sentence() {
        let corpus = parse_conll("He PRP\nruns VBZ\n\n", ColumnSpec::new(0, 1)).unwrap();
        assert_eq!(corpus.sequences.len(), 1);
        let seq = &corpus.sequences[0];
        assert_eq!(seq.len(), 2);
        let gold: Vec<&str> = seq
            .gold
            .as_ref()
            .unwrap()
            .iter()
            .map(|&y| corpus.label_set.name(y))
            .collect();
        assert_eq!(gold, ["PRP", "VBZ"]);
        assert!(seq.is_exact());
        assert_eq!(
            seq.candidates,
            vec![
                vec![seq.gold.as_ref().unwrap()[0]],
                vec![seq.gold.as_ref().unwrap()[1]]
            ]
        );
    }

    #[test]
    fn short_line_reports_its_number() {
        let err = parse_conll("He PRP\nruns\n", ColumnSpec::new(0, 1)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_lines_separate_sentences() {
        let corpus = parse_conll("a X\n\n\nb Y\nc X\n", ColumnSpec::last_label(0)).unwrap();
        assert_eq!(corpus.sequences.len(), 2);
        assert_eq!(corpus.n_tokens(), 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(parse_conll("\n\n", ColumnSpec::new(0, 1)).is_err());
    }

    #[test]
    fn partial_format_round_trip() {
        let text = "the\t*DT|NN\ndog\tDT|*NN|VB\n\nruns\tVB\n\n";
        let corpus = parse_partial(text, None).unwrap();
        assert!(corpus.sequences[0].gold.is_some());
        assert!(corpus.sequences[1].gold.is_none());
        assert_eq!(corpus.sequences[0].candidates[1].len(), 3);
        assert_eq!(write_partial(&corpus), text);
    }

    #[test]
    fn partial_gold_marks_must_be_complete() {
        let text = "the\t*DT|NN\ndog\tDT|NN\n\n";
        assert!(matches!(
            parse_partial(text, None),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
