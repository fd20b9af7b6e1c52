//! Factor-as-piece decomposition of linear chains.
//!
//! Every token contributes one unary piece and every adjacent pair one
//! transition piece. Unary latent variables live in `|Y|` equal-size blocks
//! (one row per token occurrence, shared by all candidate pieces at that
//! position); transition latent variables form one `|Y|²` block indexed by
//! `prev · |Y| + next`.

use crate::corpus::{Corpus, LabelId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UnaryPiece {
    pub seq_id: usize,
    pub pos: usize,
    /// Row of this token in every unary block and in the feature table.
    pub row: usize,
    pub candidates: Vec<LabelId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPiece {
    pub seq_id: usize,
    /// Position of the second token, always at least 1.
    pub pos: usize,
    /// Candidate `(prev, next)` pairs in lexicographic order.
    pub candidate_pairs: Vec<(LabelId, LabelId)>,
}

/// Piece reference in canonical order: sequence-major, position-minor,
/// unary before transition at the same position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceRef {
    Unary(usize),
    Transition(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentIndex {
    n_labels: usize,
    /// `(seq_id, pos)` of every unary block row.
    rows: Vec<(usize, usize)>,
    seq_offsets: Vec<usize>,
}

impl LatentIndex {
    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// `(block, row)` of the unary latent variable for `label` at a position.
    pub fn unary(&self, seq_id: usize, pos: usize, label: LabelId) -> (usize, usize) {
        (label, self.seq_offsets[seq_id] + pos)
    }

    pub fn transition(&self, prev: LabelId, next: LabelId) -> usize {
        prev * self.n_labels + next
    }

    pub fn transition_pair(&self, row: usize) -> (LabelId, LabelId) {
        (row / self.n_labels, row % self.n_labels)
    }

    pub fn row_position(&self, row: usize) -> (usize, usize) {
        self.rows[row]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub unary: Vec<UnaryPiece>,
    pub transition: Vec<TransitionPiece>,
    pub index: LatentIndex,
    /// Rows per unary block; all blocks have the token count.
    pub block_sizes: Vec<usize>,
    /// Number of transition pieces whose candidate set holds each pair.
    pub pair_counts: Vec<f64>,
    /// Number of candidate pairs, over all pieces, starting with each label.
    pub row_multiplicity: Vec<f64>,
}

impl FactorSet {
    /// Builds the decomposition from per-sequence candidate sets.
    pub fn from_candidates(candidates: &[Vec<Vec<LabelId>>], n_labels: usize) -> Result<Self> {
        let mut unary = Vec::new();
        let mut transition = Vec::new();
        let mut rows = Vec::new();
        let mut seq_offsets = Vec::with_capacity(candidates.len());
        let mut pair_counts = vec![0.0; n_labels * n_labels];
        let mut row_multiplicity = vec![0.0; n_labels];

        for (seq_id, seq) in candidates.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Data(format!("sequence {seq_id} has length 0")));
            }
            seq_offsets.push(rows.len());
            for (pos, cands) in seq.iter().enumerate() {
                if cands.is_empty() {
                    return Err(Error::Data(format!(
                        "empty candidate set at sequence {seq_id}, position {pos}"
                    )));
                }
                unary.push(UnaryPiece {
                    seq_id,
                    pos,
                    row: rows.len(),
                    candidates: cands.clone(),
                });
                rows.push((seq_id, pos));
                if pos > 0 {
                    let pairs: Vec<(LabelId, LabelId)> = seq[pos - 1]
                        .iter()
                        .flat_map(|&a| cands.iter().map(move |&b| (a, b)))
                        .collect();
                    for &(a, b) in &pairs {
                        pair_counts[a * n_labels + b] += 1.0;
                        row_multiplicity[a] += 1.0;
                    }
                    transition.push(TransitionPiece {
                        seq_id,
                        pos,
                        candidate_pairs: pairs,
                    });
                }
            }
        }
        let n_rows = rows.len();
        Ok(FactorSet {
            unary,
            transition,
            index: LatentIndex {
                n_labels,
                rows,
                seq_offsets,
            },
            block_sizes: vec![n_rows; n_labels],
            pair_counts,
            row_multiplicity,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.index.n_labels
    }

    pub fn n_tokens(&self) -> usize {
        self.unary.len()
    }

    /// Total candidate entries over all pieces, `Σ l·m + l²·(m−1)` for
    /// uniform candidate size `l`.
    pub fn candidate_count(&self) -> usize {
        self.unary.iter().map(|p| p.candidates.len()).sum::<usize>()
            + self
                .transition
                .iter()
                .map(|p| p.candidate_pairs.len())
                .sum::<usize>()
    }

    /// All pieces in canonical order.
    pub fn pieces(&self) -> impl Iterator<Item = PieceRef> + '_ {
        let mut next_transition = 0;
        self.unary.iter().enumerate().flat_map(move |(u, piece)| {
            let mut out = vec![PieceRef::Unary(u)];
            if let Some(tp) = self.transition.get(next_transition) {
                if tp.seq_id == piece.seq_id && tp.pos == piece.pos {
                    out.push(PieceRef::Transition(next_transition));
                    next_transition += 1;
                }
            }
            out
        })
    }
}

pub fn decompose(corpus: &Corpus) -> Result<FactorSet> {
    let candidates: Vec<Vec<Vec<LabelId>>> = corpus
        .sequences
        .iter()
        .map(|s| s.candidates.clone())
        .collect();
    FactorSet::from_candidates(&candidates, corpus.n_labels())
}

/// `(seq_id, pos)` for every row of the unary block of label `y`, in row order.
pub fn unary_block_rows(factor_set: &FactorSet, y: LabelId) -> Vec<(usize, usize)> {
    (0..factor_set.block_sizes[y])
        .map(|row| factor_set.index.row_position(row))
        .collect()
}
