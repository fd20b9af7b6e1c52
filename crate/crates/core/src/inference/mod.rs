//! Variational Gaussian inference over the piecewise likelihood.
//!
//! The posterior over latent variables is approximated by a block Gaussian
//! `q(f) = N(μ, V)` mirroring the prior: one block per label for unary
//! variables and one `|Y|²` block for transitions. Training maximizes the
//! Jensen-bounded objective `L_l` by alternating confidence updates with
//! nested `(μ, V)` / `θ` ascent.

mod bound;
mod site;
mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::PriorCov;
use crate::piecewise::{FactorSet, PieceRef};

pub use bound::{
    elbo_lower_bound, grad_chol, grad_mu, grad_theta, grad_v, kl_block, kl_term, likelihood_bound,
    likelihood_grads, log_confidence_sum, piece_bound_term, update_confidences, LikelihoodGrads,
};
pub use train::{
    recover_ground_truth, train, Recovery, TraceRecord, TrainConfig, TrainReport, TrainedModel,
};

/// Default confidence floor applied before renormalizing.
pub const CONFIDENCE_FLOOR: f64 = 1e-4;

/// Block mean vectors and lower-triangular covariance factors
/// `V_b = L_b L_bᵀ`, laid out like [`PriorCov`]: unary blocks, then transition.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub mu: Vec<DVector<f64>>,
    pub chol: Vec<DMatrix<f64>>,
}

impl VariationalState {
    /// `μ = 0, V = K`: the point where `q` equals the prior.
    pub fn from_prior(prior: &PriorCov) -> Self {
        VariationalState {
            mu: prior
                .blocks
                .iter()
                .map(|b| DVector::zeros(b.dim()))
                .collect(),
            chol: prior.blocks.iter().map(|b| b.l()).collect(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.mu.len()
    }

    pub fn n_labels(&self) -> usize {
        self.mu.len() - 1
    }

    pub fn covariance(&self, b: usize) -> DMatrix<f64> {
        &self.chol[b] * self.chol[b].transpose()
    }

    /// Diagonal of `V_b`.
    pub fn v_diag(&self, b: usize) -> DVector<f64> {
        let l = &self.chol[b];
        DVector::from_fn(l.nrows(), |i, _| l.row(i).norm_squared())
    }

    pub fn v_diags(&self) -> Vec<DVector<f64>> {
        (0..self.n_blocks()).map(|b| self.v_diag(b)).collect()
    }

    pub fn check_shape(&self, prior: &PriorCov) -> Result<()> {
        if self.n_blocks() != prior.blocks.len() {
            return Err(Error::Shape(format!(
                "state has {} blocks, prior has {}",
                self.n_blocks(),
                prior.blocks.len()
            )));
        }
        for (b, pb) in prior.blocks.iter().enumerate() {
            let n = pb.dim();
            if self.mu[b].len() != n || self.chol[b].shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "block {b} does not match prior dimension {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-piece candidate confidences, aligned with the candidate lists of
/// [`FactorSet::unary`] and [`FactorSet::transition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTable {
    pub unary: Vec<Vec<f64>>,
    pub transition: Vec<Vec<f64>>,
}

impl ConfidenceTable {
    pub fn uniform(factor_set: &FactorSet) -> Self {
        let row = |n: usize| vec![1.0 / n as f64; n];
        ConfidenceTable {
            unary: factor_set
                .unary
                .iter()
                .map(|p| row(p.candidates.len()))
                .collect(),
            transition: factor_set
                .transition
                .iter()
                .map(|p| row(p.candidate_pairs.len()))
                .collect(),
        }
    }

    pub fn get(&self, piece: PieceRef) -> &[f64] {
        match piece {
            PieceRef::Unary(i) => &self.unary[i],
            PieceRef::Transition(i) => &self.transition[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.unary.iter().chain(&self.transition)
    }

    pub fn matches(&self, factor_set: &FactorSet) -> bool {
        self.unary.len() == factor_set.unary.len()
            && self.transition.len() == factor_set.transition.len()
            && self
                .unary
                .iter()
                .zip(&factor_set.unary)
                .all(|(c, p)| c.len() == p.candidates.len())
            && self
                .transition
                .iter()
                .zip(&factor_set.transition)
                .all(|(c, p)| c.len() == p.candidate_pairs.len())
    }
}
