//! Site-parameterized Gaussian blocks used by the optimizer.
//!
//! `P` depends on `V` only through its diagonal, so every stationary `V`
//! has the form `(K⁻¹ + diag λ)⁻¹` with `λ ≥ 0`. The optimizer keeps each
//! block as `(λ, μ)` and evaluates it through `B = I + S K S`, `S = diag √λ`,
//! which stays well conditioned however small the prior jitter is:
//!
//! * `V = K − WᵀW` with `W = L_B⁻¹ S K`
//! * `log|V⁻¹K| = log|B|`, `tr(K⁻¹V) = tr(B⁻¹) = n − Σ λ_i V_ii`
//!
//! Steps are natural-gradient (conjugate-computation) updates of the
//! natural parameters with a backtracked step size `ρ`.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::bound::likelihood_grads;
use super::{likelihood_bound, VariationalState};
use crate::error::{Error, Result};
use crate::kernel::{dk_dtheta, PriorBlock, PriorCov, SqDistances};
use crate::piecewise::FactorSet;

const MIN_RHO: f64 = 1.0 / 1024.0;

/// One evaluated block.
#[derive(Debug, Clone)]
pub(super) struct SiteBlock {
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub vdiag: DVector<f64>,
    pub kl: f64,
    w: DMatrix<f64>,
    /// `L_B⁻¹`.
    l_b_inv: DMatrix<f64>,
}

impl SiteBlock {
    /// Block with precision `K⁻¹ + diag λ` and natural mean `η = V⁻¹μ`.
    fn from_natural(prior: &PriorBlock, lambda: DVector<f64>, eta: &DVector<f64>) -> Result<Self> {
        let n = prior.dim();
        let s = lambda.map(|l| l.max(0.0).sqrt());
        let mut sk = prior.k.clone();
        for i in 0..n {
            sk.row_mut(i).scale_mut(s[i]);
        }
        let mut b = sk.clone();
        for j in 0..n {
            b.column_mut(j).scale_mut(s[j]);
            b[(j, j)] += 1.0;
        }
        let chol_b = Cholesky::new(b).ok_or_else(|| {
            Error::Numerical("site matrix I + SKS is not positive definite".into())
        })?;
        let l_b = chol_b.l();
        let log_det_b = 2.0 * l_b.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let l_b_inv = lower_inverse(&l_b);
        let w = &l_b_inv * &sk;
        let vdiag = DVector::from_fn(n, |i, _| prior.k[(i, i)] - w.column(i).norm_squared());
        let mu = &prior.k * eta - w.transpose() * (&w * eta);
        let quad = mu.dot(&prior.chol.solve(&mu));
        // B⁻¹ = I − S V S
        let tr_b_inv = n as f64 - lambda.dot(&vdiag);
        let kl = 0.5 * (log_det_b + tr_b_inv - n as f64 + quad);
        Ok(SiteBlock {
            lambda,
            mu,
            vdiag,
            kl,
            w,
            l_b_inv,
        })
    }

    fn natural_mean(prior: &PriorBlock, lambda: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        prior.chol.solve(mu) + lambda.component_mul(mu)
    }

    /// Same sites and mean under a (possibly different) prior block.
    fn from_mean(prior: &PriorBlock, lambda: DVector<f64>, mu: &DVector<f64>) -> Result<Self> {
        let eta = Self::natural_mean(prior, &lambda, mu);
        Self::from_natural(prior, lambda, &eta)
    }

    fn prior_matched(prior: &PriorBlock) -> Self {
        let n = prior.dim();
        SiteBlock {
            lambda: DVector::zeros(n),
            mu: DVector::zeros(n),
            vdiag: prior.k.diagonal(),
            kl: 0.0,
            w: DMatrix::zeros(n, n),
            l_b_inv: DMatrix::identity(n, n),
        }
    }

    fn chol_v(&self, prior: &PriorBlock) -> Result<DMatrix<f64>> {
        let mut v = &prior.k - self.w.transpose() * &self.w;
        v = (&v + v.transpose()) * 0.5;
        Cholesky::new(v).map(|c| c.unpack()).ok_or_else(|| {
            Error::Numerical("posterior covariance lost positive definiteness".into())
        })
    }
}

/// Outcome of one accepted block step.
#[derive(Debug, Clone, Copy)]
pub(super) struct Step {
    pub delta: f64,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub(super) struct SiteState {
    mu: Vec<DVector<f64>>,
    vdiag: Vec<DVector<f64>>,
    blocks: Vec<SiteBlock>,
}

impl SiteState {
    pub fn from_prior(prior: &PriorCov) -> Self {
        let blocks: Vec<SiteBlock> = prior.blocks.iter().map(SiteBlock::prior_matched).collect();
        SiteState {
            mu: blocks.iter().map(|b| b.mu.clone()).collect(),
            vdiag: blocks.iter().map(|b| b.vdiag.clone()).collect(),
            blocks,
        }
    }

    pub fn mu(&self) -> &[DVector<f64>] {
        &self.mu
    }

    pub fn vdiag(&self) -> &[DVector<f64>] {
        &self.vdiag
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn kl(&self) -> f64 {
        self.blocks.iter().map(|b| b.kl).sum()
    }

    /// `−KL + P`; the confidence term is added by the caller.
    pub fn objective(&self, factor_set: &FactorSet) -> f64 {
        -self.kl() + likelihood_bound(&self.mu, &self.vdiag, factor_set)
    }

    fn install(&mut self, b: usize, block: SiteBlock) -> SiteBlock {
        self.mu[b].copy_from(&block.mu);
        self.vdiag[b].copy_from(&block.vdiag);
        std::mem::replace(&mut self.blocks[b], block)
    }

    /// One backtracked natural-gradient step on block `b`, starting from
    /// step size `rho`. Returns `None` when no step size down to the floor
    /// improves the objective; the state is then unchanged.
    pub fn block_step(
        &mut self,
        b: usize,
        prior: &PriorCov,
        factor_set: &FactorSet,
        rho: f64,
    ) -> Result<Option<Step>> {
        let pb = &prior.blocks[b];
        let base = self.objective(factor_set);
        let grads = likelihood_grads(&self.mu, &self.vdiag, factor_set);
        let lambda_current = self.blocks[b].lambda.clone();
        let lambda_target = grads.vdiag[b].map(|g| (-2.0 * g).max(0.0));
        let eta_current = SiteBlock::natural_mean(pb, &lambda_current, &self.mu[b]);
        let eta_target = &grads.mu[b] + lambda_target.component_mul(&self.mu[b]);

        let mut rho = rho.min(1.0);
        while rho >= MIN_RHO {
            let lambda = &lambda_current * (1.0 - rho) + &lambda_target * rho;
            let eta = &eta_current * (1.0 - rho) + &eta_target * rho;
            let candidate = SiteBlock::from_natural(pb, lambda, &eta)?;
            let previous = self.install(b, candidate);
            let value = self.objective(factor_set);
            if value.is_finite() && value >= base {
                return Ok(Some(Step {
                    delta: value - base,
                    rho,
                }));
            }
            self.install(b, previous);
            rho *= 0.5;
        }
        Ok(None)
    }

    /// Keeps sites and means, moving every block onto `prior`.
    pub fn reanchor(&self, prior: &PriorCov) -> Result<SiteState> {
        let blocks = self
            .blocks
            .iter()
            .zip(&prior.blocks)
            .map(|(blk, pb)| SiteBlock::from_mean(pb, blk.lambda.clone(), &blk.mu))
            .collect::<Result<Vec<_>>>()?;
        Ok(SiteState {
            mu: blocks.iter().map(|b| b.mu.clone()).collect(),
            vdiag: blocks.iter().map(|b| b.vdiag.clone()).collect(),
            blocks,
        })
    }

    /// `‖∇_μ L_l‖∞` over all blocks.
    pub fn grad_mu_inf(&self, prior: &PriorCov, factor_set: &FactorSet) -> f64 {
        let grads = likelihood_grads(&self.mu, &self.vdiag, factor_set);
        grads
            .mu
            .iter()
            .zip(&self.mu)
            .zip(&prior.blocks)
            .map(|((g, mu), pb)| (g - pb.chol.solve(mu)).amax())
            .fold(0.0, f64::max)
    }

    /// Same quantity as [`super::grad_theta`], using
    /// `K⁻¹VK⁻¹ − K⁻¹ = −(L_B⁻¹S)ᵀ(L_B⁻¹S)`.
    pub fn grad_theta(&self, prior: &PriorCov, d2: &SqDistances, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(y, &t)| {
                let blk = &self.blocks[y];
                let dk = dk_dtheta(d2, t);
                let alpha = prior.blocks[y].chol.solve(&blk.mu);
                let quad = alpha.dot(&(&dk * &alpha));
                let mut z = blk.l_b_inv.clone();
                for (j, l) in blk.lambda.iter().enumerate() {
                    z.column_mut(j).scale_mut(l.max(0.0).sqrt());
                }
                let trace = (&z * &dk).component_mul(&z).sum();
                0.5 * quad - 0.5 * trace
            })
            .collect()
    }

    pub fn materialize(&self, prior: &PriorCov) -> Result<VariationalState> {
        let chol = self
            .blocks
            .iter()
            .zip(&prior.blocks)
            .enumerate()
            .map(|(b, (blk, pb))| {
                blk.chol_v(pb)
                    .map_err(|e| Error::Numerical(format!("block {b}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VariationalState {
            mu: self.mu.clone(),
            chol,
        })
    }
}

/// Inverse of a lower-triangular matrix, touching only the lower triangle.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut x = inv.column_mut(j);
        x[j] = 1.0;
        for k in j..n {
            let xk = x[k] / l[(k, k)];
            x[k] = xk;
            if xk != 0.0 {
                for (xi, li) in x.as_mut_slice()[k + 1..]
                    .iter_mut()
                    .zip(&l.column(k).as_slice()[k + 1..])
                {
                    *xi -= li * xk;
                }
            }
        }
    }
    inv
}
