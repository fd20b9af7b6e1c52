//! Predictive posterior, decode scores and the two Viterbi decoders.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::corpus::LabelId;
use crate::error::{Error, Result};
use crate::inference::TrainedModel;
use crate::kernel::PriorCov;
use crate::piecewise::FactorSet;

/// Nearest neighbours used for confidence factors unless overridden.
pub const DEFAULT_KNN: usize = 5;

/// Per-token, per-label marginals of the unary latent variables of a test
/// sequence, plus the trained transition marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictivePosterior {
    /// `m × |Y|`.
    pub mu_u: DMatrix<f64>,
    /// `m × |Y|`, clipped at zero.
    pub var_u: DMatrix<f64>,
    pub mu_t: DVector<f64>,
    pub var_t: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeScores {
    /// `m × |Y|`, rows sum to one.
    pub emission: DMatrix<f64>,
    /// `|Y| × |Y|` indexed `(previous, next)`, rows sum to one.
    pub transition: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceFactors {
    pub tau_emit: DMatrix<f64>,
    pub tau_trans: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Decoder {
    Viterbi,
    Weighted,
}

impl Decoder {
    pub fn name(self) -> &'static str {
        match self {
            Decoder::Viterbi => "viterbi",
            Decoder::Weighted => "weighted",
        }
    }
}

/// Read-only view of a trained model with the per-label solves that every
/// prediction needs done once.
pub struct Predictor<'a> {
    model: &'a TrainedModel,
    prior: PriorCov,
    factor_set: FactorSet,
    /// `K_y⁻¹ μ_y`.
    alpha: Vec<DVector<f64>>,
    /// Unary piece index of every training row.
    row_piece: Vec<usize>,
    transition: DMatrix<f64>,
    tau_trans: DMatrix<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a TrainedModel) -> Result<Self> {
        let prior = model.prior()?;
        model.state.check_shape(&prior)?;
        let factor_set = model.factor_set()?;
        if !model.confidences.matches(&factor_set) {
            return Err(Error::Shape(
                "confidence table does not match the training candidates".into(),
            ));
        }
        let n_labels = model.label_set.len();
        let alpha = (0..n_labels)
            .map(|y| prior.unary(y).chol.solve(&model.state.mu[y]))
            .collect();
        let mut row_piece = vec![0; factor_set.n_tokens()];
        for (i, p) in factor_set.unary.iter().enumerate() {
            row_piece[p.row] = i;
        }
        let transition = transition_scores(model);
        let tau_trans = transition_tau(model, &factor_set);
        Ok(Predictor {
            model,
            prior,
            factor_set,
            alpha,
            row_piece,
            transition,
            tau_trans,
        })
    }

    pub fn model(&self) -> &TrainedModel {
        self.model
    }

    fn check_features(&self, features: &[Vec<f64>]) -> Result<()> {
        let dim = self.model.train_features.first().map_or(0, Vec::len);
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::Shape(format!(
                "test features have dimension {}, model expects {dim}",
                f.len()
            )));
        }
        Ok(())
    }

    pub fn posterior(&self, features: &[Vec<f64>]) -> Result<PredictivePosterior> {
        self.check_features(features)?;
        let n_labels = self.model.label_set.len();
        let m = features.len();
        let n = self.model.train_features.len();
        let d2 = DMatrix::from_fn(m, n, |i, j| {
            features[i]
                .iter()
                .zip(&self.model.train_features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        });
        let mut mu_u = DMatrix::zeros(m, n_labels);
        let mut var_u = DMatrix::zeros(m, n_labels);
        for y in 0..n_labels {
            let theta = self.model.hyper.theta[y];
            let k_star = d2.map(|d| (-theta * d).exp());
            let mean = &k_star * &self.alpha[y];
            // columns of A are K⁻¹ k_* for each test token
            let a = self.prior.unary(y).chol.solve(&k_star.transpose());
            let la = self.model.state.chol[y].transpose() * &a;
            for i in 0..m {
                let var =
                    1.0 - k_star.row(i).transpose().dot(&a.column(i)) + la.column(i).norm_squared();
                if var < -1e-9 {
                    warn!("negative predictive variance {var:e} clipped at 0");
                }
                mu_u[(i, y)] = mean[i];
                var_u[(i, y)] = var.max(0.0);
            }
        }
        Ok(PredictivePosterior {
            mu_u,
            var_u,
            mu_t: self.model.state.mu[n_labels].clone(),
            var_t: self.model.state.v_diag(n_labels),
        })
    }

    pub fn scores(&self, features: &[Vec<f64>]) -> Result<DecodeScores> {
        Ok(DecodeScores {
            emission: emission_scores(&self.posterior(features)?),
            transition: self.transition.clone(),
        })
    }

    pub fn confidence_factors(
        &self,
        features: &[Vec<f64>],
        knn: usize,
    ) -> Result<ConfidenceFactors> {
        self.check_features(features)?;
        if knn == 0 {
            return Err(Error::Config("K_nn must be at least 1".into()));
        }
        let n = self.model.train_features.len();
        let k = if knn > n {
            warn!("K_nn = {knn} exceeds the {n} training tokens; using {n}");
            n
        } else {
            knn
        };
        let n_labels = self.model.label_set.len();
        let mut tau_emit = DMatrix::zeros(features.len(), n_labels);
        for (i, x) in features.iter().enumerate() {
            let neighbors: Vec<(&[LabelId], &[f64])> = nearest(&self.model.train_features, x, k)
                .into_iter()
                .map(|row| {
                    let p = self.row_piece[row];
                    (
                        self.factor_set.unary[p].candidates.as_slice(),
                        self.model.confidences.unary[p].as_slice(),
                    )
                })
                .collect();
            tau_emit.set_row(i, &knn_tau(&neighbors, n_labels).transpose());
        }
        Ok(ConfidenceFactors {
            tau_emit,
            tau_trans: self.tau_trans.clone(),
        })
    }

    pub fn decode(
        &self,
        features: &[Vec<f64>],
        decoder: Decoder,
        knn: usize,
    ) -> Result<Vec<LabelId>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let scores = self.scores(features)?;
        Ok(match decoder {
            Decoder::Viterbi => viterbi(&scores),
            Decoder::Weighted => {
                weighted_viterbi(&scores, &self.confidence_factors(features, knn)?)
            }
        })
    }
}

pub fn predictive_posterior(
    model: &TrainedModel,
    features: &[Vec<f64>],
) -> Result<PredictivePosterior> {
    Predictor::new(model)?.posterior(features)
}

pub fn confidence_factors(
    model: &TrainedModel,
    features: &[Vec<f64>],
    knn: usize,
) -> Result<ConfidenceFactors> {
    Predictor::new(model)?.confidence_factors(features, knn)
}

fn softmax_rows(logits: DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits;
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Softmax over labels of `μ_* + ½ v_*`.
pub fn emission_scores(post: &PredictivePosterior) -> DMatrix<f64> {
    softmax_rows(&post.mu_u + &post.var_u * 0.5)
}

/// Per previous label, softmax over next labels of `μ_T + ½ diag V_T`.
pub fn transition_scores(model: &TrainedModel) -> DMatrix<f64> {
    let n = model.label_set.len();
    let mu = &model.state.mu[n];
    let var = model.state.v_diag(n);
    softmax_rows(DMatrix::from_fn(n, n, |a, b| {
        mu[a * n + b] + 0.5 * var[a * n + b]
    }))
}

/// The `k` training rows closest to `x`; ties go to the lower row.
fn nearest(train: &[Vec<f64>], x: &[f64], k: usize) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(j, t)| {
            (
                t.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                j,
            )
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.into_iter().take(k).map(|(_, j)| j).collect()
}

/// `τ(y)` from neighbour candidate sets and confidences. Labels outside the
/// union of candidate sets get the neighbours' mean total confidence divided
/// by `|Y|`.
fn knn_tau(neighbors: &[(&[LabelId], &[f64])], n_labels: usize) -> DVector<f64> {
    let k = neighbors.len() as f64;
    let mut tau = DVector::zeros(n_labels);
    let mut in_union = vec![false; n_labels];
    let mut total = 0.0;
    for (cands, conf) in neighbors {
        for (&y, &c) in cands.iter().zip(conf.iter()) {
            tau[y] += c;
            in_union[y] = true;
            total += c;
        }
    }
    let fallback = total / k / n_labels as f64;
    for y in 0..n_labels {
        tau[y] = if in_union[y] { tau[y] / k } else { fallback };
    }
    tau
}

/// Mean pair confidence over the training transition pieces offering each
/// pair; zero for pairs never offered.
fn transition_tau(model: &TrainedModel, factor_set: &FactorSet) -> DMatrix<f64> {
    let n = model.label_set.len();
    let mut sum = DMatrix::<f64>::zeros(n, n);
    let mut count = DMatrix::<f64>::zeros(n, n);
    for (p, conf) in factor_set
        .transition
        .iter()
        .zip(&model.confidences.transition)
    {
        for (&(a, b), &c) in p.candidate_pairs.iter().zip(conf) {
            sum[(a, b)] += c;
            count[(a, b)] += 1.0;
        }
    }
    sum.zip_map(&count, |s, c| if c > 0.0 { s / c } else { 0.0 })
}

/// Max-sum recursion `δ_t(s) = max_{s'} δ_{t−1}(s') + g_t(s', s)` with ties
/// resolved toward the lower label id.
fn max_sum(
    m: usize,
    n: usize,
    start: impl Fn(usize) -> f64,
    step: impl Fn(usize, usize, usize) -> f64,
) -> Vec<LabelId> {
    if m == 0 {
        return Vec::new();
    }
    let mut delta: Vec<f64> = (0..n).map(start).collect();
    let mut back = vec![vec![0usize; n]; m];
    for (t, back_t) in back.iter_mut().enumerate().skip(1) {
        let mut next = vec![f64::NEG_INFINITY; n];
        for s in 0..n {
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (prev, d) in delta.iter().enumerate() {
                let v = d + step(t, prev, s);
                if v > best_val {
                    best_val = v;
                    best = prev;
                }
            }
            next[s] = best_val;
            back_t[s] = best;
        }
        delta = next;
    }
    let mut last = 0;
    for s in 1..n {
        if delta[s] > delta[last] {
            last = s;
        }
    }
    let mut path = vec![last; m];
    for t in (1..m).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Standard decoder: `g_t(s', s) = S(s, x_t) + S(s', s)`, `δ_1(s) = S(s, x_1)`.
pub fn viterbi(scores: &DecodeScores) -> Vec<LabelId> {
    let (e, tr) = (&scores.emission, &scores.transition);
    max_sum(
        e.nrows(),
        e.ncols(),
        |s| e[(0, s)],
        |t, p, s| e[(t, s)] + tr[(p, s)],
    )
}

/// Confidence-weighted decoder:
/// `g_t(s', s) = τ_t(s) S(s, x_t) + τ(s', s) S(s', s)`, `δ_1(s) = τ_1(s) S(s, x_1)`.
pub fn weighted_viterbi(scores: &DecodeScores, factors: &ConfidenceFactors) -> Vec<LabelId> {
    let (e, tr) = (&scores.emission, &scores.transition);
    let (te, tt) = (&factors.tau_emit, &factors.tau_trans);
    max_sum(
        e.nrows(),
        e.ncols(),
        |s| te[(0, s)] * e[(0, s)],
        |t, p, s| te[(t, s)] * e[(t, s)] + tt[(p, s)] * tr[(p, s)],
    )
}

/// `surface<TAB>label[<TAB>score]` lines with a blank line after the sequence.
pub fn format_sequence(surfaces: &[String], labels: &[&str], confidence: Option<&[f64]>) -> String {
    let mut out = String::new();
    for (i, (s, l)) in surfaces.iter().zip(labels).enumerate() {
        match confidence {
            Some(c) => writeln!(out, "{s}\t{l}\t{:.6}", c[i]),
            None => writeln!(out, "{s}\t{l}"),
        }
        .expect("writing to a String cannot fail");
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(
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

    fn random_scores(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DecodeScores {
        DecodeScores {
            emission: softmax_rows(DMatrix::from_fn(m, n, |_, _| rng.gen_range(-2.0..2.0))),
            transition: softmax_rows(DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0))),
        }
    }

    #[test]
    fn hand_softmax() {
        let post = PredictivePosterior {
            mu_u: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 3.0]),
            var_u: DMatrix::zeros(2, 2),
            mu_t: DVector::zeros(4),
            var_t: DVector::zeros(4),
        };
        let e = emission_scores(&post);
        assert!((e[(0, 0)] - 0.7311).abs() < 1e-4 && (e[(0, 1)] - 0.2689).abs() < 1e-4);
        assert_eq!(e.row(1), DMatrix::from_row_slice(1, 2, &[0.5, 0.5]).row(0));
        let shifted = PredictivePosterior {
            mu_u: post.mu_u.add_scalar(5.0),
            ..post.clone()
        };
        assert!((emission_scores(&shifted) - e).amax() < 1e-15);
    }

    #[test]
    fn knn_tau_hand_average() {
        let a: (&[LabelId], &[f64]) = (&[0, 1], &[0.8, 0.2]);
        let b: (&[LabelId], &[f64]) = (&[0, 2], &[0.6, 0.4]);
        let tau = knn_tau(&[a, b], 4);
        assert!((tau[0] - 0.7).abs() < 1e-12);
        assert!((tau[1] - 0.1).abs() < 1e-12);
        assert!((tau[2] - 0.2).abs() < 1e-12);
        assert!((tau[3] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn singleton_neighbors_put_outside_labels_below() {
        let a: (&[LabelId], &[f64]) = (&[1], &[1.0]);
        let tau = knn_tau(&[a, a, a], 3);
        assert_eq!(tau[1], 1.0);
        assert!(tau[0] < tau[1] && tau[2] < tau[1]);
    }

    #[test]
    fn nearest_prefers_lower_index_on_ties() {
        let train = vec![vec![1.0], vec![-1.0], vec![0.5], vec![1.0]];
        assert_eq!(nearest(&train, &[0.0], 3), vec![2, 0, 1]);
    }

    #[test]
    fn single_position_is_emission_argmax() {
        let scores = DecodeScores {
            emission: DMatrix::from_row_slice(1, 3, &[0.2, 0.5, 0.3]),
            transition: DMatrix::from_element(3, 3, 1.0 / 3.0),
        };
        assert_eq!(viterbi(&scores), vec![1]);
    }

    #[test]
    fn uniform_scores_decode_to_lowest_label() {
        let scores = DecodeScores {
            emission: DMatrix::from_element(4, 3, 1.0 / 3.0),
            transition: DMatrix::from_element(3, 3, 1.0 / 3.0),
        };
        assert_eq!(viterbi(&scores), vec![0; 4]);
    }

    #[test]
    fn decoders_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let m = rng.gen_range(1..=6);
            let n = rng.gen_range(2..=4);
            let scores = random_scores(&mut rng, m, n);
            let factors = ConfidenceFactors {
                tau_emit: DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0)),
                tau_trans: DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0)),
            };
            let (e, tr) = (&scores.emission, &scores.transition);
            let plain = brute_force(m, n, |s| e[(0, s)], |t, p, s| e[(t, s)] + tr[(p, s)]);
            assert_eq!(viterbi(&scores), plain);
            let (te, tt) = (&factors.tau_emit, &factors.tau_trans);
            let weighted = brute_force(
                m,
                n,
                |s| te[(0, s)] * e[(0, s)],
                |t, p, s| te[(t, s)] * e[(t, s)] + tt[(p, s)] * tr[(p, s)],
            );
            assert_eq!(weighted_viterbi(&scores, &factors), weighted);
        }
    }

    #[test]
    fn zero_transition_factor_blocks_the_pair() {
        // label 1 after label 0 scores highest unless its factor is zero
        let scores = DecodeScores {
            emission: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.45, 0.55]),
            transition: DMatrix::from_row_slice(2, 2, &[0.4, 0.6, 0.5, 0.5]),
        };
        let ones = ConfidenceFactors {
            tau_emit: DMatrix::from_element(2, 2, 1.0),
            tau_trans: DMatrix::from_element(2, 2, 1.0),
        };
        assert_eq!(weighted_viterbi(&scores, &ones), vec![0, 1]);
        let mut blocked = ones.clone();
        blocked.tau_trans[(0, 1)] = 0.0;
        assert_eq!(weighted_viterbi(&scores, &blocked), vec![0, 0]);
    }

    #[test]
    fn conll_lines() {
        let out = format_sequence(&["a".into(), "b".into()], &["X", "Y"], None);
        assert_eq!(out, "a\tX\nb\tY\n\n");
        let out = format_sequence(&["a".into()], &["X"], Some(&[0.5]));
        assert_eq!(out, "a\tX\t0.500000\n\n");
    }
}
