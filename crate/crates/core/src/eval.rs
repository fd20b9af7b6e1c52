//! Cross-validated experiments: recovery accuracy, token accuracy, chunk F1.

use std::fmt::{self, Write as _};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{synthesize_partial_cl, synthesize_partial_flip, Corpus, LabelId};
use crate::error::{Error, Result};
use crate::inference::{recover_ground_truth, train, TrainConfig};
use crate::piecewise::decompose;
use crate::predict::{Decoder, Predictor, DEFAULT_KNN};
use crate::rng::{stream, Stream};

/// Sequence-level assignment of a corpus to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Seeded shuffle, then round-robin: fold sizes differ by at most one.
    pub fn new(n_sequences: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > n_sequences {
            return Err(Error::Config(format!(
                "need 2 ≤ folds ≤ {n_sequences} sequences, got {k}"
            )));
        }
        let mut order: Vec<usize> = (0..n_sequences).collect();
        order.shuffle(&mut stream(seed, Stream::Folds));
        let mut assignments = vec![0; n_sequences];
        for (rank, &i) in order.iter().enumerate() {
            assignments[i] = rank % k;
        }
        Ok(FoldPlan {
            k,
            assignments,
            seed,
        })
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// A labeled span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

fn split_tag(label: &str) -> (&str, &str) {
    match label.split_once('-') {
        Some((tag, kind)) => (tag, kind),
        None if matches!(label, "B" | "I" | "O") => (label, ""),
        None => ("I", label),
    }
}

/// CoNLL-style chunks: a chunk opens at `B-X`, or at `I-X` when the previous
/// token is outside or of another type, and closes before `O` or the next
/// opening. Bare `B`/`I` tags form chunks of an empty type.
pub fn chunks(labels: &[&str]) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, label) in labels.iter().enumerate() {
        let (tag, kind) = split_tag(label);
        let starts = match (tag, open) {
            ("O", _) => false,
            ("B", _) => true,
            (_, Some((_, k))) => k != kind,
            (_, None) => true,
        };
        if tag == "O" || starts {
            if let Some((s, k)) = open.take() {
                out.push(Chunk {
                    start: s,
                    end: i,
                    kind: k.to_string(),
                });
            }
        }
        if starts {
            open = Some((i, kind));
        }
    }
    if let Some((s, k)) = open {
        out.push(Chunk {
            start: s,
            end: labels.len(),
            kind: k.to_string(),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl ChunkCounts {
    pub fn add(&mut self, other: ChunkCounts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    /// `(precision, recall, f1)`; each is 0 when its denominator is 0.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.correct, self.predicted);
        let r = ratio(self.correct, self.gold);
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f)
    }
}

pub fn chunk_counts(gold: &[&str], pred: &[&str]) -> Result<ChunkCounts> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "gold has {} labels, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let g = chunks(gold);
    let p = chunks(pred);
    Ok(ChunkCounts {
        correct: p.iter().filter(|c| g.contains(c)).count(),
        predicted: p.len(),
        gold: g.len(),
    })
}

pub fn chunk_f1(gold: &[&str], pred: &[&str]) -> Result<(f64, f64, f64)> {
    Ok(chunk_counts(gold, pred)?.scores())
}

/// How partial annotations are synthesized for one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    Cl { cl: usize, p: f64 },
    Flip { r: f64, p: f64 },
}

impl Setting {
    pub fn p(&self) -> f64 {
        match *self {
            Setting::Cl { p, .. } | Setting::Flip { p, .. } => p,
        }
    }

    pub fn synthesize(&self, corpus: &Corpus, seed: u64) -> Result<Corpus> {
        match *self {
            Setting::Cl { cl, p } => synthesize_partial_cl(corpus, cl, p, seed),
            Setting::Flip { r, p } => synthesize_partial_flip(corpus, r, p, seed),
        }
    }
}

impl fmt::Display for Setting {
    /// The `cl_or_r` column: `cl=2` or `r=0.3`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Cl { cl, .. } => write!(f, "cl={cl}"),
            Setting::Flip { r, .. } => write!(f, "r={r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: String,
    pub settings: Vec<Setting>,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub train: TrainConfig,
    pub knn: usize,
    /// Also train on a uniformly random disambiguation of each fold.
    pub reference: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: "task".into(),
            settings: vec![Setting::Cl { cl: 2, p: 0.1 }],
            seeds: vec![0],
            folds: 5,
            train: TrainConfig::default(),
            knn: DEFAULT_KNN,
            reference: false,
            threads: None,
        }
    }
}

/// Decoder rows emitted for each fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Viterbi,
    Weighted,
    /// Standard decoding of a model trained on a random disambiguation.
    Reference,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Viterbi => "viterbi",
            Variant::Weighted => "weighted",
            Variant::Reference => "random_reference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub task: String,
    pub setting: Setting,
    pub seed: u64,
    /// `None` for the mean over folds.
    pub fold: Option<usize>,
    pub variant: Variant,
    /// Over ambiguous training positions.
    pub recovery_acc: f64,
    /// Over all training positions.
    pub recovery_overall: f64,
    pub token_acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Picks one candidate uniformly at random per position and makes it the
/// only candidate.
pub fn random_disambiguation(corpus: &Corpus, seed: u64) -> Corpus {
    let mut rng = stream(seed, Stream::Reference);
    let mut out = corpus.clone();
    for seq in &mut out.sequences {
        for cands in &mut seq.candidates {
            let pick = cands[rng.gen_range(0..cands.len())];
            *cands = vec![pick];
        }
    }
    out
}

struct Decoded {
    token_acc: f64,
    counts: ChunkCounts,
}

fn decode_fold(
    predictor: &Predictor,
    test: &Corpus,
    decoder: Decoder,
    knn: usize,
) -> Result<Decoded> {
    let names = test.label_set.names();
    let mut counts = ChunkCounts::default();
    let (mut right, mut total) = (0usize, 0usize);
    for seq in &test.sequences {
        let feats: Vec<Vec<f64>> = seq.tokens.iter().map(|t| t.features.clone()).collect();
        let pred = predictor.decode(&feats, decoder, knn)?;
        let gold = seq.gold.as_ref().expect("checked by run_experiment");
        right += pred.iter().zip(gold).filter(|(a, b)| a == b).count();
        total += gold.len();
        let g: Vec<&str> = gold.iter().map(|&y| names[y].as_str()).collect();
        let p: Vec<&str> = pred.iter().map(|&y| names[y].as_str()).collect();
        counts.add(chunk_counts(&g, &p)?);
    }
    Ok(Decoded {
        token_acc: if total == 0 {
            1.0
        } else {
            right as f64 / total as f64
        },
        counts,
    })
}

fn gold_of(corpus: &Corpus) -> Vec<Vec<LabelId>> {
    corpus
        .sequences
        .iter()
        .map(|s| s.gold.clone().expect("checked by run_experiment"))
        .collect()
}

fn run_fold(
    corpus: &Corpus,
    setting: Setting,
    seed: u64,
    fold: usize,
    config: &ExperimentConfig,
) -> Result<Vec<ExperimentResult>> {
    let partial = setting.synthesize(corpus, seed)?;
    let plan = FoldPlan::new(corpus.sequences.len(), config.folds, seed)?;
    let train_set = partial.subset(&plan.train_indices(fold));
    let test_set = partial.subset(&plan.test_indices(fold));
    let fs = decompose(&train_set)?;
    let model = train(&train_set, &fs, &config.train)?;
    let recovery = recover_ground_truth(&model, &gold_of(&train_set))?;
    let predictor = Predictor::new(&model)?;

    let row = |variant: Variant, recovery_acc: f64, recovery_overall: f64, d: Decoded| {
        let (precision, recall, f1) = d.counts.scores();
        ExperimentResult {
            task: config.task.clone(),
            setting,
            seed,
            fold: Some(fold),
            variant,
            recovery_acc,
            recovery_overall,
            token_acc: d.token_acc,
            precision,
            recall,
            f1,
        }
    };
    let mut rows = Vec::new();
    for (variant, decoder) in [
        (Variant::Viterbi, Decoder::Viterbi),
        (Variant::Weighted, Decoder::Weighted),
    ] {
        let d = decode_fold(&predictor, &test_set, decoder, config.knn)?;
        rows.push(row(
            variant,
            recovery.accuracy(),
            recovery.overall_accuracy(),
            d,
        ));
    }

    if config.reference {
        let picked = random_disambiguation(&train_set, seed ^ fold as u64);
        let gold = gold_of(&train_set);
        let (mut amb, mut amb_ok, mut all_ok, mut all) = (0usize, 0usize, 0usize, 0usize);
        for ((orig, pick), g) in train_set.sequences.iter().zip(&picked.sequences).zip(&gold) {
            for ((cands, p), y) in orig.candidates.iter().zip(&pick.candidates).zip(g) {
                let ok = p[0] == *y;
                all += 1;
                all_ok += ok as usize;
                if cands.len() > 1 {
                    amb += 1;
                    amb_ok += ok as usize;
                }
            }
        }
        let ref_model = train(&picked, &decompose(&picked)?, &config.train)?;
        let d = decode_fold(
            &Predictor::new(&ref_model)?,
            &test_set,
            Decoder::Viterbi,
            config.knn,
        )?;
        let acc = if amb == 0 {
            1.0
        } else {
            amb_ok as f64 / amb as f64
        };
        rows.push(row(
            Variant::Reference,
            acc,
            all_ok as f64 / all.max(1) as f64,
            d,
        ));
    }
    info!(
        "{} {setting} p={} seed {seed} fold {fold} done",
        config.task,
        setting.p()
    );
    Ok(rows)
}

fn mean_row(rows: &[&ExperimentResult]) -> ExperimentResult {
    let n = rows.len() as f64;
    let avg = |f: fn(&ExperimentResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    ExperimentResult {
        fold: None,
        recovery_acc: avg(|r| r.recovery_acc),
        recovery_overall: avg(|r| r.recovery_overall),
        token_acc: avg(|r| r.token_acc),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f1: avg(|r| r.f1),
        ..rows[0].clone()
    }
}

/// Runs every (setting, seed, fold) job and returns per-fold rows followed
/// by the fold means, grouped by setting then seed. Output order and values
/// do not depend on the number of threads.
pub fn run_experiment(corpus: &Corpus, config: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    if !corpus.has_gold() {
        return Err(Error::Data(
            "experiments need gold labels on every sequence".into(),
        ));
    }
    if !corpus.is_featurized() {
        return Err(Error::Data("corpus is not featurized".into()));
    }
    config.train.validate()?;
    FoldPlan::new(corpus.sequences.len(), config.folds, 0)?;
    let settings: Vec<Setting> = config
        .settings
        .iter()
        .copied()
        .filter(|s| match *s {
            Setting::Cl { cl, .. } if cl == 0 || cl >= corpus.n_labels() => {
                warn!("skipping {s}: cl must be < |Y| ({})", corpus.n_labels());
                false
            }
            _ => true,
        })
        .collect();
    let jobs: Vec<(usize, u64, usize)> = (0..settings.len())
        .flat_map(|s| {
            config
                .seeds
                .iter()
                .flat_map(move |&seed| (0..config.folds).map(move |f| (s, seed, f)))
        })
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(s, seed, f)| run_fold(corpus, settings[s], seed, f, config))
            .collect::<Result<Vec<_>>>()
    };
    let per_job = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let mut out = Vec::new();
    for group in per_job.chunks(config.folds) {
        let fold_rows: Vec<&ExperimentResult> = group.iter().flatten().collect();
        out.extend(fold_rows.iter().map(|r| (*r).clone()));
        let mut variants: Vec<Variant> = fold_rows.iter().map(|r| r.variant).collect();
        variants.sort();
        variants.dedup();
        for v in variants {
            let rows: Vec<&ExperimentResult> = fold_rows
                .iter()
                .copied()
                .filter(|r| r.variant == v)
                .collect();
            out.push(mean_row(&rows));
        }
    }
    Ok(out)
}

pub const CSV_HEADER: &str =
    "task,cl_or_r,p,fold,decoder,recovery_acc,token_acc,precision,recall,f1,seed";

pub fn to_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let fold = r.fold.map_or_else(|| "mean".to_string(), |f| f.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.task,
            r.setting,
            r.setting.p(),
            fold,
            r.variant.name(),
            r.recovery_acc,
            r.token_acc,
            r.precision,
            r.recall,
            r.f1,
            r.seed
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Means over seeds of the per-seed fold means, one line per setting and
/// decoder.
pub fn summary_table(results: &[ExperimentResult]) -> String {
    let means: Vec<&ExperimentResult> = results.iter().filter(|r| r.fold.is_none()).collect();
    let mut keys: Vec<(String, String, Variant)> = Vec::new();
    for r in &means {
        let key = (r.setting.to_string(), r.setting.p().to_string(), r.variant);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = format!(
        "{:<10} {:>5} {:<17} {:>8} {:>8} {:>8} {:>6}\n",
        "setting", "p", "decoder", "recovery", "token", "f1", "seeds"
    );
    for (setting, p, variant) in keys {
        let rows: Vec<&&ExperimentResult> = means
            .iter()
            .filter(|r| {
                r.setting.to_string() == setting
                    && r.setting.p().to_string() == p
                    && r.variant == variant
            })
            .collect();
        let n = rows.len() as f64;
        let avg = |f: fn(&ExperimentResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        writeln!(
            out,
            "{:<10} {:>5} {:<17} {:>8.4} {:>8.4} {:>8.4} {:>6}",
            setting,
            p,
            variant.name(),
            avg(|r| r.recovery_acc),
            avg(|r| r.token_acc),
            avg(|r| r.f1),
            rows.len()
        )
        .expect("writing to a String cannot fail");
    }
    out
}
