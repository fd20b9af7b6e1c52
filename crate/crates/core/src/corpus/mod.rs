//! Labeled and partially labeled token sequences.
//!
//! A [`Corpus`] is a list of [`PartialSequence`]s sharing one [`LabelSet`].
//! Every position carries a non-empty candidate set of label ids; exactly
//! annotated positions carry a singleton. When the hidden gold labels are
//! known (synthetic partial annotation), they ride along for evaluation and
//! are never read by training.

mod conll;
mod features;
mod synth;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conll::{parse_conll, parse_partial, parse_tokens, write_partial, ColumnSpec};
pub use features::{featurize, featurize_sequence, FeaturizerConfig};
pub use synth::{synthesize_partial_cl, synthesize_partial_flip};

pub type LabelId = usize;

/// Ordered set of distinct label names with dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, LabelId>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Data(format!(
                "a label set needs at least 2 labels, found {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (id, name) in labels.iter().enumerate() {
            if index.insert(name.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate label {name:?}")));
            }
        }
        Ok(LabelSet { labels, index })
    }

    /// Label set over every name in `names`, sorted so ids do not depend on
    /// sentence order.
    pub fn from_observed<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let sorted: BTreeSet<&str> = names.into_iter().collect();
        Self::new(sorted.into_iter().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.labels[id]
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelSet::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub surface: String,
    /// Empty until the corpus is featurized.
    pub features: Vec<f64>,
}

impl Token {
    pub fn new(surface: impl Into<String>) -> Self {
        Token {
            surface: surface.into(),
            features: Vec::new(),
        }
    }
}

/// A token sequence whose positions carry candidate label sets.
///
/// Candidate lists are kept sorted ascending and duplicate free.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSequence {
    pub tokens: Vec<Token>,
    pub candidates: Vec<Vec<LabelId>>,
    pub gold: Option<Vec<LabelId>>,
}

impl PartialSequence {
    /// Exactly annotated sequence: singleton candidates equal to gold.
    pub fn exact(surfaces: Vec<String>, gold: Vec<LabelId>) -> Self {
        let candidates = gold.iter().map(|&y| vec![y]).collect();
        PartialSequence {
            tokens: surfaces.into_iter().map(Token::new).collect(),
            candidates,
            gold: Some(gold),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_exact(&self) -> bool {
        self.candidates.iter().all(|c| c.len() == 1)
    }

    fn validate(&self, n_labels: usize) -> Result<()> {
        if self.candidates.len() != self.tokens.len() {
            return Err(Error::Data(format!(
                "{} tokens but {} candidate sets",
                self.tokens.len(),
                self.candidates.len()
            )));
        }
        for (t, cands) in self.candidates.iter().enumerate() {
            if cands.is_empty() {
                return Err(Error::Data(format!("empty candidate set at position {t}")));
            }
            if cands.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!(
                    "candidate set at position {t} is not sorted and distinct"
                )));
            }
            if cands.iter().any(|&y| y >= n_labels) {
                return Err(Error::Data(format!(
                    "label id out of range at position {t}"
                )));
            }
        }
        if let Some(gold) = &self.gold {
            if gold.len() != self.tokens.len() {
                return Err(Error::Data("gold length differs from token count".into()));
            }
            for (t, (y, cands)) in gold.iter().zip(&self.candidates).enumerate() {
                if cands.binary_search(y).is_err() {
                    return Err(Error::Data(format!(
                        "gold label not among candidates at position {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<PartialSequence>,
    pub label_set: LabelSet,
    /// Feature dimension; 0 for a corpus that has not been featurized.
    pub feature_dim: usize,
}

impl Corpus {
    pub fn new(sequences: Vec<PartialSequence>, label_set: LabelSet) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("corpus has no sequences".into()));
        }
        for seq in &sequences {
            seq.validate(label_set.len())?;
        }
        Ok(Corpus {
            sequences,
            label_set,
            feature_dim: 0,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.label_set.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(PartialSequence::len).sum()
    }

    pub fn has_gold(&self) -> bool {
        self.sequences.iter().all(|s| s.gold.is_some())
    }

    pub fn is_featurized(&self) -> bool {
        self.feature_dim > 0
    }

    /// Sub-corpus over the given sequence indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            label_set: self.label_set.clone(),
            feature_dim: self.feature_dim,
        }
    }

    /// Every token feature vector in corpus order.
    pub fn features(&self) -> Vec<&[f64]> {
        self.sequences
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.features.as_slice()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_set_rejects_duplicates_and_singletons() {
        assert!(LabelSet::new(vec!["A".into(), "A".into()]).is_err());
        assert!(LabelSet::new(vec!["A".into()]).is_err());
        let set = LabelSet::from_observed(["O", "B", "I", "B"]).unwrap();
        assert_eq!(set.names(), ["B", "I", "O"]);
        assert_eq!(set.id("O"), Some(2));
    }

    #[test]
    fn gold_must_be_a_candidate() {
        let labels = LabelSet::from_observed(["A", "B"]).unwrap();
        let mut seq = PartialSequence::exact(vec!["x".into()], vec![0]);
        seq.candidates[0] = vec![1];
        assert!(Corpus::new(vec![seq], labels).is_err());
    }
}
