//! Synthetic partial annotation from a gold-labeled corpus.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, LabelId};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

fn check_common(corpus: &Corpus, p: f64) -> Result<()> {
    if !corpus.has_gold() {
        return Err(Error::Data(
            "partial annotation synthesis needs gold labels on every sequence".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Picks `round(p·N)` sequences to stay exact and rewrites every other
/// sequence position by position with `ambiguate(rng, gold)`.
fn synthesize<F>(corpus: &Corpus, p: f64, seed: u64, mut ambiguate: F) -> Corpus
where
    F: FnMut(&mut ChaCha8Rng, LabelId) -> Vec<LabelId>,
{
    let mut rng = stream(seed, Stream::Synthesis);
    let n = corpus.sequences.len();
    let n_exact = (p * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut exact = vec![false; n];
    for &i in &order[..n_exact] {
        exact[i] = true;
    }

    let mut out = corpus.clone();
    for (seq, is_exact) in out.sequences.iter_mut().zip(exact) {
        let gold = seq.gold.clone().expect("checked by caller");
        seq.candidates = gold
            .iter()
            .map(|&g| {
                if is_exact {
                    vec![g]
                } else {
                    ambiguate(&mut rng, g)
                }
            })
            .collect();
    }
    out
}

fn negatives(n_labels: usize, gold: LabelId) -> impl Iterator<Item = LabelId> {
    (0..n_labels).filter(move |&y| y != gold)
}

/// Fixed-size ambiguity: each ambiguous position gets its gold label plus
/// `cl` distinct negatives drawn uniformly without replacement.
pub fn synthesize_partial_cl(corpus: &Corpus, cl: usize, p: f64, seed: u64) -> Result<Corpus> {
    check_common(corpus, p)?;
    let n_labels = corpus.n_labels();
    if cl == 0 || cl >= n_labels {
        return Err(Error::Config(format!(
            "cl must be < |Y| ({n_labels}) and at least 1, got {cl}"
        )));
    }
    Ok(synthesize(corpus, p, seed, |rng, gold| {
        let negs: Vec<LabelId> = negatives(n_labels, gold).collect();
        let mut cands: Vec<LabelId> = index::sample(rng, negs.len(), cl)
            .into_iter()
            .map(|k| negs[k])
            .chain(std::iter::once(gold))
            .collect();
        cands.sort_unstable();
        cands
    }))
}

/// Flipping ambiguity: each negative label independently joins the
/// candidate set with probability `r`.
pub fn synthesize_partial_flip(corpus: &Corpus, r: f64, p: f64, seed: u64) -> Result<Corpus> {
    check_common(corpus, p)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("r must lie in [0, 1], got {r}")));
    }
    let n_labels = corpus.n_labels();
    Ok(synthesize(corpus, p, seed, |rng, gold| {
        (0..n_labels)
            .filter(|&y| y == gold || rng.gen_bool(r))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelSet, PartialSequence};

    fn gold_corpus(n_seqs: usize, len: usize, n_labels: usize) -> Corpus {
        let names: Vec<String> = (0..n_labels).map(|i| format!("L{i:02}")).collect();
        let labels = LabelSet::new(names).unwrap();
        let seqs = (0..n_seqs)
            .map(|s| {
                let words = (0..len).map(|t| format!("w{s}_{t}")).collect();
                let gold = (0..len).map(|t| (s * 7 + t * 3) % n_labels).collect();
                PartialSequence::exact(words, gold)
            })
            .collect();
        Corpus::new(seqs, labels).unwrap()
    }

    #[test]
    fn p_one_keeps_corpus() {
        let c = gold_corpus(5, 4, 4);
        assert_eq!(synthesize_partial_cl(&c, 2, 1.0, 3).unwrap(), c);
        assert_eq!(synthesize_partial_flip(&c, 0.5, 1.0, 3).unwrap(), c);
    }

    #[test]
    fn cl_one_less_than_labels_gives_full_sets() {
        let c = gold_corpus(6, 5, 3);
        let out = synthesize_partial_cl(&c, 2, 0.0, 11).unwrap();
        for seq in &out.sequences {
            for cands in &seq.candidates {
                assert_eq!(cands, &vec![0, 1, 2]);
            }
        }
    }

    #[test]
    fn exact_fraction_is_counted_in_sequences() {
        let c = gold_corpus(10, 3, 5);
        for seed in 0..1000 {
            let out = synthesize_partial_cl(&c, 1, 0.3, seed).unwrap();
            let exact = out.sequences.iter().filter(|s| s.is_exact()).count();
            assert_eq!(exact, 3, "seed {seed}");
        }
    }

    #[test]
    fn flip_boundaries() {
        let c = gold_corpus(4, 6, 5);
        let none = synthesize_partial_flip(&c, 0.0, 0.0, 1).unwrap();
        assert!(none.sequences.iter().all(|s| s.is_exact()));
        let all = synthesize_partial_flip(&c, 1.0, 0.0, 1).unwrap();
        for seq in &all.sequences {
            assert!(seq.candidates.iter().all(|cands| cands.len() == 5));
        }
    }

    #[test]
    fn flip_mean_candidate_size_matches_binomial_mean() {
        // 9 labels, r = 0.75: expected size 1 + 8 * 0.75 = 7
        let c = gold_corpus(1000, 100, 9);
        let out = synthesize_partial_flip(&c, 0.75, 0.0, 2024).unwrap();
        let total: usize = out
            .sequences
            .iter()
            .flat_map(|s| s.candidates.iter().map(Vec::len))
            .sum();
        let mean = total as f64 / 100_000.0;
        assert!((mean - 7.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn cl_errors() {
        let c = gold_corpus(3, 3, 3);
        assert!(synthesize_partial_cl(&c, 3, 0.5, 1).is_err());
        assert!(synthesize_partial_cl(&c, 0, 0.5, 1).is_err());
        let mut missing = c.clone();
        missing.sequences[0].gold = None;
        assert!(synthesize_partial_cl(&missing, 1, 0.5, 1).is_err());
    }
}
