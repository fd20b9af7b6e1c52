#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgppsl::corpus::{
    featurize, parse_conll, ColumnSpec, Corpus, FeaturizerConfig, LabelSet, PartialSequence, Token,
};
use sgppsl::inference::{ConfidenceTable, VariationalState};
use sgppsl::kernel::{build_prior_from, KernelHyper, PriorCov, SqDistances};
use sgppsl::piecewise::FactorSet;

pub const SAMPLE: &str = include_str!("../fixtures/conll2000_sample.txt");

pub fn sample() -> Corpus {
    parse_conll(SAMPLE, ColumnSpec::last_label(0)).unwrap()
}

pub fn featurized_sample() -> Corpus {
    featurize(&sample(), &FeaturizerConfig::default()).unwrap()
}

/// The sample with chunk tags collapsed to Base NP `B`/`I`/`O`.
pub fn base_np(corpus: &Corpus) -> Corpus {
    let labels = LabelSet::new(vec!["B".into(), "I".into(), "O".into()]).unwrap();
    let sequences = corpus
        .sequences
        .iter()
        .map(|s| {
            let gold = s
                .gold
                .as_ref()
                .unwrap()
                .iter()
                .map(|&y| match corpus.label_set.name(y) {
                    "B-NP" => 0,
                    "I-NP" => 1,
                    _ => 2,
                })
                .collect();
            let surfaces = s.tokens.iter().map(|t| t.surface.clone()).collect();
            PartialSequence::exact(surfaces, gold)
        })
        .collect();
    Corpus::new(sequences, labels).unwrap()
}

/// Six sequences over labels `A`/`B` whose tokens sit in two tight,
/// far-apart feature clusters, one per label; half the sequences keep
/// exact labels and the rest offer both labels everywhere.
pub fn separable_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = LabelSet::new(vec!["A".into(), "B".into()]).unwrap();
    let dim = 8;
    let mut sequences = Vec::new();
    for s in 0..6 {
        let len = rng.gen_range(4..=6);
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let mut seq = PartialSequence::exact(
            (0..len).map(|i| format!("t{s}_{i}")).collect(),
            gold.clone(),
        );
        for (tok, &y) in seq.tokens.iter_mut().zip(&gold) {
            let mut f = vec![0.0; dim];
            f[y * 4] = 1.0;
            for v in f.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
            tok.features = f;
        }
        if s % 2 == 1 {
            seq.candidates = vec![vec![0, 1]; len];
        }
        sequences.push(seq);
    }
    let mut c = Corpus::new(sequences, labels).unwrap();
    c.feature_dim = dim;
    c
}

/// A random small problem: corpus with features, its factor set, a prior,
/// a random variational state and random confidences.
pub struct Instance {
    pub corpus: Corpus,
    pub fs: FactorSet,
    pub d2: SqDistances,
    pub hyper: KernelHyper,
    pub prior: PriorCov,
    pub state: VariationalState,
    pub conf: ConfidenceTable,
}

pub fn random_lower(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i > j {
            rng.gen_range(-0.3..0.3)
        } else if i == j {
            rng.gen_range(0.4..1.2)
        } else {
            0.0
        }
    })
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_labels = rng.gen_range(2..=4);
    let dim = rng.gen_range(2..=16);
    let labels = LabelSet::new((0..n_labels).map(|y| format!("L{y}")).collect()).unwrap();
    let n_seq = rng.gen_range(1..=5);
    let mut sequences = Vec::new();
    for s in 0..n_seq {
        let m = rng.gen_range(1..=4);
        let gold: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n_labels)).collect();
        let mut seq =
            PartialSequence::exact((0..m).map(|i| format!("w{s}{i}")).collect(), gold.clone());
        seq.candidates = gold
            .iter()
            .map(|&g| {
                let extra = rng.gen_range(0..n_labels);
                let mut c: Vec<usize> = index::sample(&mut rng, n_labels, extra)
                    .into_iter()
                    .collect();
                c.push(g);
                c.sort_unstable();
                c.dedup();
                c
            })
            .collect();
        for t in seq.tokens.iter_mut() {
            *t = Token {
                surface: t.surface.clone(),
                features: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
        }
        sequences.push(seq);
    }
    let mut corpus = Corpus::new(sequences, labels).unwrap();
    corpus.feature_dim = dim;
    let fs = sgppsl::piecewise::decompose(&corpus).unwrap();
    let d2 = SqDistances::new(&corpus.features()).unwrap();
    let hyper = KernelHyper::new(
        (0..n_labels).map(|_| rng.gen_range(0.2..2.0)).collect(),
        1e-6,
    )
    .unwrap();
    let prior = build_prior_from(&d2, &hyper).unwrap();
    let state = VariationalState {
        mu: prior
            .blocks
            .iter()
            .map(|b| DVector::from_fn(b.dim(), |_, _| rng.gen_range(-1.0..1.0)))
            .collect(),
        chol: prior
            .blocks
            .iter()
            .map(|b| random_lower(&mut rng, b.dim()))
            .collect(),
    };
    let mut conf = ConfidenceTable::uniform(&fs);
    for row in conf.unary.iter_mut().chain(conf.transition.iter_mut()) {
        let w: Vec<f64> = row.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        *row = w.iter().map(|v| v / total).collect();
    }
    Instance {
        corpus,
        fs,
        d2,
        hyper,
        prior,
        state,
        conf,
    }
}

/// `|a − b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Exhaustive max over all label paths, accumulating scores in the same
/// order as the decoders.
pub fn brute_force(
    m: usize,
    n: usize,
    start: impl Fn(usize) -> f64,
    step: impl Fn(usize, usize, usize) -> f64,
) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for code in 0..n.pow(m as u32) {
        let path: Vec<usize> = (0..m)
            .map(|t| code / n.pow((m - 1 - t) as u32) % n)
            .collect();
        let mut score = start(path[0]);
        for t in 1..m {
            score += step(t, path[t - 1], path[t]);
        }
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, path));
        }
    }
    best.unwrap().1
}
