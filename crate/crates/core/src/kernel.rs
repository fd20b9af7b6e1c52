//! Block-diagonal GP prior.
//!
//! Each label owns one RBF block over all training token occurrences,
//! `K_u(y)[i, j] = exp(-θ_y ‖x_i − x_j‖²)` plus diagonal jitter. The
//! transition block over label pairs is the identity. Blocks are never
//! inverted; every solve goes through the cached Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabelId};
use crate::error::{Error, Result};
use crate::piecewise::FactorSet;

pub const DEFAULT_JITTER: f64 = 1e-6;
const JITTER_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub theta: Vec<f64>,
    pub jitter: f64,
}

impl KernelHyper {
    pub fn new(theta: Vec<f64>, jitter: f64) -> Result<Self> {
        let hyper = KernelHyper { theta, jitter };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.theta.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Config(format!(
                "kernel scale must be positive and finite, got {t}"
            )));
        }
        if self.jitter.is_nan() || self.jitter <= 0.0 {
            return Err(Error::Config(format!(
                "jitter must be positive, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rbf(x_i: &[f64], x_j: &[f64], theta: f64) -> Result<f64> {
    if x_i.len() != x_j.len() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            x_i.len(),
            x_j.len()
        )));
    }
    Ok((-theta * sq_dist(x_i, x_j)).exp())
}

/// Identity covariance between label pairs.
pub fn transition_cov(pair_i: (LabelId, LabelId), pair_j: (LabelId, LabelId)) -> f64 {
    if pair_i == pair_j {
        1.0
    } else {
        0.0
    }
}

/// Pairwise squared distances between training tokens, shared by every
/// unary block and reused across hyperparameter updates.
#[derive(Debug, Clone)]
pub struct SqDistances(DMatrix<f64>);

impl SqDistances {
    pub fn new(features: &[&[f64]]) -> Result<Self> {
        let n = features.len();
        if let Some(dim) = features.first().map(|f| f.len()) {
            if features.iter().any(|f| f.len() != dim) {
                return Err(Error::Shape("feature vectors of unequal dimension".into()));
            }
            if features.iter().any(|f| f.iter().any(|x| !x.is_finite())) {
                return Err(Error::Numerical("non-finite feature value".into()));
            }
        }
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let v = sq_dist(features[i], features[j]);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        Ok(SqDistances(d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    /// Median squared distance over distinct pairs; `None` when every pair
    /// coincides or there is only one token.
    pub fn median_nonzero(&self) -> Option<f64> {
        let n = self.len();
        let mut vals: Vec<f64> = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| self.0[(i, j)])
            .filter(|&v| v > 0.0)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let mid = vals.len() / 2;
        let (_, m, _) = vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        Some(*m)
    }

    /// RBF Gram matrix without jitter.
    pub fn rbf(&self, theta: f64) -> DMatrix<f64> {
        self.0.map(|d| (-theta * d).exp())
    }
}

/// One prior block and its Cholesky factor.
#[derive(Debug, Clone)]
pub struct PriorBlock {
    pub k: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// Jitter that was actually added (after any escalation).
    pub jitter: f64,
}

impl PriorBlock {
    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.dim() {
            return Err(Error::Shape(format!(
                "right-hand side has {} rows, block has {}",
                rhs.nrows(),
                self.dim()
            )));
        }
        Ok(self.chol.solve(rhs))
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.dim() {
            return Err(Error::Shape(format!(
                "right-hand side has length {}, block has {}",
                rhs.len(),
                self.dim()
            )));
        }
        Ok(self.chol.solve(rhs))
    }

    fn identity(n: usize) -> Self {
        let k = DMatrix::identity(n, n);
        let chol = Cholesky::new(k.clone()).expect("identity is positive definite");
        PriorBlock {
            k,
            chol,
            jitter: 0.0,
        }
    }

    fn rbf_block(d2: &SqDistances, theta: f64, jitter: f64, label: LabelId) -> Result<Self> {
        let base = d2.rbf(theta);
        let mut jitter = jitter;
        for _ in 0..=JITTER_ESCALATIONS {
            let mut k = base.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(k.clone()) {
                return Ok(PriorBlock { k, chol, jitter });
            }
            jitter *= 10.0;
        }
        Err(Error::Numerical(format!(
            "Cholesky of unary prior block for label {label} failed even with jitter {:e}",
            jitter / 10.0
        )))
    }
}

/// Which prior/variational block an operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Unary(LabelId),
    Transition,
}

impl Block {
    /// Position among the `|Y| + 1` blocks: unary blocks first, transition last.
    pub fn index(self, n_labels: usize) -> usize {
        match self {
            Block::Unary(y) => y,
            Block::Transition => n_labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PriorCov {
    /// `|Y|` unary blocks followed by the transition block.
    pub blocks: Vec<PriorBlock>,
}

impl PriorCov {
    pub fn n_labels(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn block(&self, block: Block) -> &PriorBlock {
        &self.blocks[block.index(self.n_labels())]
    }

    pub fn unary(&self, y: LabelId) -> &PriorBlock {
        &self.blocks[y]
    }

    pub fn transition(&self) -> &PriorBlock {
        &self.blocks[self.n_labels()]
    }
}

pub fn build_prior_from(d2: &SqDistances, hyper: &KernelHyper) -> Result<PriorCov> {
    hyper.validate()?;
    let n_labels = hyper.theta.len();
    let mut blocks = hyper
        .theta
        .iter()
        .enumerate()
        .map(|(y, &theta)| PriorBlock::rbf_block(d2, theta, hyper.jitter, y))
        .collect::<Result<Vec<_>>>()?;
    blocks.push(PriorBlock::identity(n_labels * n_labels));
    Ok(PriorCov { blocks })
}

pub fn build_prior(
    factor_set: &FactorSet,
    corpus: &Corpus,
    hyper: &KernelHyper,
) -> Result<PriorCov> {
    if hyper.theta.len() != factor_set.n_labels() {
        return Err(Error::Shape(format!(
            "{} kernel scales for {} labels",
            hyper.theta.len(),
            factor_set.n_labels()
        )));
    }
    if corpus.n_tokens() != factor_set.n_tokens() {
        return Err(Error::Shape("factor set does not match corpus".into()));
    }
    if !corpus.is_featurized() {
        return Err(Error::Data("corpus is not featurized".into()));
    }
    let d2 = SqDistances::new(&corpus.features())?;
    build_prior_from(&d2, hyper)
}

pub fn solve_prior(prior: &PriorCov, block: Block, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    prior.block(block).solve(rhs)
}

/// `∂K_u(y)/∂θ_y = −‖x_i − x_j‖² · exp(−θ_y ‖x_i − x_j‖²)`.
pub fn dk_dtheta(d2: &SqDistances, theta: f64) -> DMatrix<f64> {
    d2.matrix().map(|d| -d * (-theta * d).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_values() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        assert_eq!(rbf(&a, &a, 3.0).unwrap(), 1.0);
        assert!((rbf(&a, &b, 0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((rbf(&a, &b, 0.5).unwrap() - 0.367879).abs() < 1e-6);
        assert_eq!(rbf(&a, &b, 0.7).unwrap(), rbf(&b, &a, 0.7).unwrap());
        let mut last = 1.0;
        for theta in [0.1, 1.0, 10.0, 100.0, 1000.0] {
            let v = rbf(&a, &b, theta).unwrap();
            assert!(v < last && v > 0.0 || v == 0.0);
            last = v;
        }
        assert!(last < 1e-300);
        assert!(rbf(&a, &[1.0], 1.0).is_err());
    }

    #[test]
    fn transition_gram_is_identity() {
        assert_eq!(transition_cov((0, 1), (0, 1)), 1.0);
        assert_eq!(transition_cov((0, 1), (0, 2)), 0.0);
        let pairs: Vec<(usize, usize)> = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).collect();
        let g = DMatrix::from_fn(9, 9, |i, j| transition_cov(pairs[i], pairs[j]));
        assert_eq!(g, DMatrix::identity(9, 9));
    }

    #[test]
    fn single_token_block() {
        let x = vec![1.0, 0.0];
        let d2 = SqDistances::new(&[&x]).unwrap();
        let prior =
            build_prior_from(&d2, &KernelHyper::new(vec![1.0, 2.0], 1e-6).unwrap()).unwrap();
        for y in 0..2 {
            assert_eq!(prior.unary(y).k, DMatrix::from_element(1, 1, 1.0 + 1e-6));
        }
        assert_eq!(prior.transition().k, DMatrix::identity(4, 4));
    }

    #[test]
    fn duplicate_rows_escalate_jitter() {
        let x = vec![1.0, 0.0];
        let feats: Vec<&[f64]> = vec![&x; 50];
        let d2 = SqDistances::new(&feats).unwrap();
        let prior =
            build_prior_from(&d2, &KernelHyper::new(vec![1.0, 1.0], 1e-12).unwrap()).unwrap();
        assert!(prior.unary(0).jitter >= 1e-12);
        assert!(prior.unary(0).k == prior.unary(0).k.transpose());
    }

    #[test]
    fn solve_shape_mismatch() {
        let x = vec![1.0, 0.0];
        let d2 = SqDistances::new(&[&x, &x]).unwrap();
        let prior =
            build_prior_from(&d2, &KernelHyper::new(vec![1.0, 1.0], 1e-3).unwrap()).unwrap();
        assert!(solve_prior(&prior, Block::Unary(0), &DMatrix::zeros(3, 1)).is_err());
        let rhs = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(solve_prior(&prior, Block::Transition, &rhs).unwrap(), rhs);
        assert_eq!(
            solve_prior(&prior, Block::Unary(1), &DMatrix::zeros(2, 1)).unwrap(),
            DMatrix::zeros(2, 1)
        );
    }

    #[test]
    fn invalid_hyper() {
        assert!(KernelHyper::new(vec![0.0, 1.0], 1e-6).is_err());
        assert!(KernelHyper::new(vec![1.0, 1.0], 0.0).is_err());
    }
}
