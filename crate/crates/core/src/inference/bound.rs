//! The objective `L_l` and its exact gradients.
//!
//! `L_l = −KL(q‖p) + P + Σ log C`, where `P` sums, over every piece and
//! candidate, the Jensen bound
//! `μ(x, y_j) − log Σ_{y'} exp(μ(x, y') + ½ V((x, y'), (x, y')))`.
//! For transition pieces the inner sum runs over the next label with the
//! previous label fixed. `P` only touches `μ` and `diag(V)`, which is all the
//! gradient code exploits.

use nalgebra::{DMatrix, DVector};

use super::{ConfidenceTable, VariationalState, CONFIDENCE_FLOOR};
use crate::error::{Error, Result};
use crate::kernel::{dk_dtheta, KernelHyper, PriorBlock, PriorCov, SqDistances};
use crate::piecewise::{FactorSet, PieceRef};

pub(crate) fn logsumexp(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax in place; returns the log-normalizer.
pub(crate) fn softmax_in_place(vals: &mut [f64]) -> f64 {
    let lse = logsumexp(vals);
    vals.iter_mut().for_each(|v| *v = (*v - lse).exp());
    lse
}

fn unary_logits(
    mu: &[DVector<f64>],
    vdiag: &[DVector<f64>],
    n_labels: usize,
    row: usize,
) -> Vec<f64> {
    (0..n_labels)
        .map(|y| mu[y][row] + 0.5 * vdiag[y][row])
        .collect()
}

fn transition_logits(
    mu_t: &DVector<f64>,
    v_t: &DVector<f64>,
    n_labels: usize,
    prev: usize,
) -> Vec<f64> {
    (0..n_labels)
        .map(|b| {
            let r = prev * n_labels + b;
            mu_t[r] + 0.5 * v_t[r]
        })
        .collect()
}

/// Jensen bound of one candidate of one piece.
pub fn piece_bound_term(
    state: &VariationalState,
    factor_set: &FactorSet,
    piece: PieceRef,
    candidate: usize,
) -> f64 {
    let n = factor_set.n_labels();
    match piece {
        PieceRef::Unary(u) => {
            let p = &factor_set.unary[u];
            let logits: Vec<f64> = (0..n)
                .map(|y| state.mu[y][p.row] + 0.5 * state.chol[y].row(p.row).norm_squared())
                .collect();
            state.mu[p.candidates[candidate]][p.row] - logsumexp(&logits)
        }
        PieceRef::Transition(t) => {
            let (a, b) = factor_set.transition[t].candidate_pairs[candidate];
            let logits: Vec<f64> = (0..n)
                .map(|c| {
                    let r = a * n + c;
                    state.mu[n][r] + 0.5 * state.chol[n].row(r).norm_squared()
                })
                .collect();
            state.mu[n][a * n + b] - logsumexp(&logits)
        }
    }
}

/// `P`: sum of piece bounds over every candidate, given block means and
/// covariance diagonals.
pub fn likelihood_bound(
    mu: &[DVector<f64>],
    vdiag: &[DVector<f64>],
    factor_set: &FactorSet,
) -> f64 {
    let n = factor_set.n_labels();
    let mut total = 0.0;
    for p in &factor_set.unary {
        let lse = logsumexp(&unary_logits(mu, vdiag, n, p.row));
        total += p.candidates.iter().map(|&y| mu[y][p.row]).sum::<f64>()
            - p.candidates.len() as f64 * lse;
    }
    let (mu_t, v_t) = (&mu[n], &vdiag[n]);
    for a in 0..n {
        let mult = factor_set.row_multiplicity[a];
        if mult == 0.0 {
            continue;
        }
        let lse = logsumexp(&transition_logits(mu_t, v_t, n, a));
        let linear: f64 = (0..n)
            .map(|b| factor_set.pair_counts[a * n + b] * mu_t[a * n + b])
            .sum();
        total += linear - mult * lse;
    }
    total
}

/// Partial derivatives of `P` with respect to each block mean and each
/// block covariance diagonal (off-diagonal derivatives are zero).
#[derive(Debug, Clone)]
pub struct LikelihoodGrads {
    pub mu: Vec<DVector<f64>>,
    pub vdiag: Vec<DVector<f64>>,
}

pub fn likelihood_grads(
    mu: &[DVector<f64>],
    vdiag: &[DVector<f64>],
    factor_set: &FactorSet,
) -> LikelihoodGrads {
    let n = factor_set.n_labels();
    let mut g_mu: Vec<DVector<f64>> = mu.iter().map(|m| DVector::zeros(m.len())).collect();
    let mut g_v = g_mu.clone();
    for p in &factor_set.unary {
        let mut w = unary_logits(mu, vdiag, n, p.row);
        softmax_in_place(&mut w);
        let mult = p.candidates.len() as f64;
        for (y, s) in w.iter().enumerate() {
            g_mu[y][p.row] -= mult * s;
            g_v[y][p.row] -= 0.5 * mult * s;
        }
        for &y in &p.candidates {
            g_mu[y][p.row] += 1.0;
        }
    }
    for a in 0..n {
        let mult = factor_set.row_multiplicity[a];
        if mult == 0.0 {
            continue;
        }
        let mut w = transition_logits(&mu[n], &vdiag[n], n, a);
        softmax_in_place(&mut w);
        for (b, s) in w.iter().enumerate() {
            let r = a * n + b;
            g_mu[n][r] += factor_set.pair_counts[r] - mult * s;
            g_v[n][r] -= 0.5 * mult * s;
        }
    }
    LikelihoodGrads {
        mu: g_mu,
        vdiag: g_v,
    }
}

/// `Σ log C` over every candidate; zero entries are read at the floor.
pub fn log_confidence_sum(conf: &ConfidenceTable) -> f64 {
    conf.rows()
        .flat_map(|row| row.iter())
        .map(|&c| c.max(CONFIDENCE_FLOOR).ln())
        .sum()
}

/// `KL(N(μ, LLᵀ) ‖ N(0, K))` for one block.
pub fn kl_block(mu: &DVector<f64>, chol_v: &DMatrix<f64>, prior: &PriorBlock) -> f64 {
    let n = prior.dim();
    let l_k = prior.chol.l_dirty();
    let log_det_v = 2.0 * chol_v.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
    // tr(K⁻¹V) = ‖L_K⁻¹ L_V‖², μᵀK⁻¹μ = ‖L_K⁻¹ μ‖²
    let a = l_k
        .solve_lower_triangular(chol_v)
        .expect("prior Cholesky factor has a positive diagonal");
    let b = l_k
        .solve_lower_triangular(mu)
        .expect("prior Cholesky factor has a positive diagonal");
    0.5 * (prior.log_det() - log_det_v + a.norm_squared() - n as f64 + b.norm_squared())
}

pub fn kl_term(state: &VariationalState, prior: &PriorCov) -> f64 {
    prior
        .blocks
        .iter()
        .enumerate()
        .map(|(b, pb)| kl_block(&state.mu[b], &state.chol[b], pb))
        .sum()
}

pub fn elbo_lower_bound(
    state: &VariationalState,
    conf: &ConfidenceTable,
    factor_set: &FactorSet,
    prior: &PriorCov,
) -> Result<f64> {
    state.check_shape(prior)?;
    if !conf.matches(factor_set) {
        return Err(Error::Shape(
            "confidence table does not match the factor set".into(),
        ));
    }
    let vdiag = state.v_diags();
    Ok(-kl_term(state, prior)
        + likelihood_bound(&state.mu, &vdiag, factor_set)
        + log_confidence_sum(conf))
}

/// `∇_μ L_l = −K⁻¹μ + ∂P/∂μ`, blockwise.
pub fn grad_mu(
    state: &VariationalState,
    factor_set: &FactorSet,
    prior: &PriorCov,
) -> Vec<DVector<f64>> {
    let g = likelihood_grads(&state.mu, &state.v_diags(), factor_set);
    g.mu.into_iter()
        .zip(&prior.blocks)
        .zip(&state.mu)
        .map(|((g, pb), mu)| g - pb.chol.solve(mu))
        .collect()
}

/// `∇_V L_l = ½(V⁻¹ − K⁻¹) + diag(∂P/∂diag V)` as symmetric matrices.
pub fn grad_v(
    state: &VariationalState,
    factor_set: &FactorSet,
    prior: &PriorCov,
) -> Vec<DMatrix<f64>> {
    let g = likelihood_grads(&state.mu, &state.v_diags(), factor_set);
    prior
        .blocks
        .iter()
        .enumerate()
        .map(|(b, pb)| {
            let n = pb.dim();
            let l = &state.chol[b];
            let l_inv = l
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .expect("covariance factor has a non-zero diagonal");
            let v_inv = l_inv.transpose() * &l_inv;
            let k_inv = pb.chol.inverse();
            let mut out = (v_inv - k_inv) * 0.5;
            for i in 0..n {
                out[(i, i)] += g.vdiag[b][i];
            }
            out
        })
        .collect()
}

/// Gradient with respect to the lower-triangular factors `L_b` of
/// `V_b = L_b L_bᵀ`: `tril(2 ∇_V L_b)`, expanded without forming `V⁻¹`.
pub fn grad_chol(
    state: &VariationalState,
    factor_set: &FactorSet,
    prior: &PriorCov,
) -> Vec<DMatrix<f64>> {
    let g = likelihood_grads(&state.mu, &state.v_diags(), factor_set);
    prior
        .blocks
        .iter()
        .enumerate()
        .map(|(b, pb)| {
            let l = &state.chol[b];
            let n = l.nrows();
            let mut out = -pb.chol.solve(l);
            for i in 0..n {
                let scale = 2.0 * g.vdiag[b][i];
                for j in 0..=i {
                    out[(i, j)] += scale * l[(i, j)];
                }
                for j in i + 1..n {
                    out[(i, j)] = 0.0;
                }
                // lower part of L⁻ᵀ is its diagonal
                out[(i, i)] += 1.0 / l[(i, i)];
            }
            out
        })
        .collect()
}

/// Partial derivative of `L_l` with respect to each `θ_y`, holding `μ` and `V`
/// fixed: `½ αᵀ ∂K α + ½ tr[(K⁻¹VK⁻¹ − K⁻¹) ∂K]` with `α = K⁻¹μ`.
pub fn grad_theta(
    state: &VariationalState,
    prior: &PriorCov,
    d2: &SqDistances,
    hyper: &KernelHyper,
) -> Vec<f64> {
    hyper
        .theta
        .iter()
        .enumerate()
        .map(|(y, &theta)| {
            let pb = prior.unary(y);
            let dk = dk_dtheta(d2, theta);
            let alpha = pb.chol.solve(&state.mu[y]);
            let quad = alpha.dot(&(&dk * &alpha));
            // K⁻¹ (V − K) K⁻¹
            let x = pb.chol.solve(&(state.covariance(y) - &pb.k));
            let m = pb.chol.solve(&x.transpose());
            0.5 * quad + 0.5 * m.component_mul(&dk).sum()
        })
        .collect()
}

/// Confidence of each candidate: softmax of `μ + ½ diag V` over the piece's
/// own candidates, floored at `floor` and renormalized.
pub fn update_confidences(
    state: &VariationalState,
    factor_set: &FactorSet,
    floor: f64,
) -> ConfidenceTable {
    confidences_from(&state.mu, &state.v_diags(), factor_set, floor)
}

pub(crate) fn confidences_from(
    mu: &[DVector<f64>],
    vdiag: &[DVector<f64>],
    factor_set: &FactorSet,
    floor: f64,
) -> ConfidenceTable {
    let n = factor_set.n_labels();
    let normalize = |mut logits: Vec<f64>| {
        if logits.len() == 1 {
            return vec![1.0];
        }
        softmax_in_place(&mut logits);
        logits.iter_mut().for_each(|c| *c = c.max(floor));
        let total: f64 = logits.iter().sum();
        logits.iter_mut().for_each(|c| *c /= total);
        logits
    };
    let unary = factor_set
        .unary
        .iter()
        .map(|p| {
            normalize(
                p.candidates
                    .iter()
                    .map(|&y| mu[y][p.row] + 0.5 * vdiag[y][p.row])
                    .collect(),
            )
        })
        .collect();
    let transition = factor_set
        .transition
        .iter()
        .map(|p| {
            normalize(
                p.candidate_pairs
                    .iter()
                    .map(|&(a, b)| {
                        let r = a * n + b;
                        mu[n][r] + 0.5 * vdiag[n][r]
                    })
                    .collect(),
            )
        })
        .collect();
    ConfidenceTable { unary, transition }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_prior_from;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_prior(
        rng: &mut ChaCha8Rng,
        n_tokens: usize,
        n_labels: usize,
    ) -> (SqDistances, PriorCov) {
        let feats: Vec<Vec<f64>> = (0..n_tokens)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let d2 = SqDistances::new(&refs).unwrap();
        let theta = (0..n_labels).map(|_| rng.gen_range(0.3..2.0)).collect();
        let prior = build_prior_from(&d2, &KernelHyper::new(theta, 1e-6).unwrap()).unwrap();
        (d2, prior)
    }

    fn random_chol(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.gen_range(-0.3..0.3),
            std::cmp::Ordering::Equal => rng.gen_range(0.4..1.2),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    fn dense_kl(mu: &DVector<f64>, v: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
        let k_inv = k.clone().try_inverse().unwrap();
        let n = k.nrows() as f64;
        0.5 * (k.determinant().ln() - v.determinant().ln() + (&k_inv * v).trace() - n
            + (mu.transpose() * &k_inv * mu)[(0, 0)])
    }

    fn toy_factor_set() -> FactorSet {
        FactorSet::from_candidates(&[vec![vec![0, 1], vec![1]]], 2).unwrap()
    }

    #[test]
    fn uniform_piece_is_minus_log_labels() {
        let fs = FactorSet::from_candidates(&[vec![vec![0, 2]]], 3).unwrap();
        let state = VariationalState {
            mu: vec![
                DVector::zeros(1),
                DVector::zeros(1),
                DVector::zeros(1),
                DVector::zeros(9),
            ],
            chol: vec![
                DMatrix::zeros(1, 1),
                DMatrix::zeros(1, 1),
                DMatrix::zeros(1, 1),
                DMatrix::zeros(9, 9),
            ],
        };
        for j in 0..2 {
            let v = piece_bound_term(&state, &fs, PieceRef::Unary(0), j);
            assert!((v + 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn competitor_variance_lowers_the_bound() {
        let fs = FactorSet::from_candidates(&[vec![vec![0]]], 2).unwrap();
        let mut state = VariationalState {
            mu: vec![DVector::zeros(1), DVector::zeros(1), DVector::zeros(4)],
            chol: vec![
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1),
                DMatrix::identity(4, 4),
            ],
        };
        let mut last = piece_bound_term(&state, &fs, PieceRef::Unary(0), 0);
        for s in [1.5, 2.0, 3.0] {
            state.chol[1][(0, 0)] = s;
            let v = piece_bound_term(&state, &fs, PieceRef::Unary(0), 0);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn bound_lies_below_monte_carlo_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fs = FactorSet::from_candidates(&[vec![vec![0, 1]]], 2).unwrap();
        for _ in 0..3 {
            let mu: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let sd: Vec<f64> = (0..2).map(|_| rng.gen_range(0.2..0.8)).collect();
            let state = VariationalState {
                mu: vec![
                    DVector::from_element(1, mu[0]),
                    DVector::from_element(1, mu[1]),
                    DVector::zeros(4),
                ],
                chol: vec![
                    DMatrix::from_element(1, 1, sd[0]),
                    DMatrix::from_element(1, 1, sd[1]),
                    DMatrix::identity(4, 4),
                ],
            };
            let bound = piece_bound_term(&state, &fs, PieceRef::Unary(0), 0);
            let draws = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..draws {
                let f0 = mu[0] + sd[0] * rng.sample::<f64, _>(StandardNormal);
                let f1 = mu[1] + sd[1] * rng.sample::<f64, _>(StandardNormal);
                acc += f0 - logsumexp(&[f0, f1]);
            }
            let mc = acc / draws as f64;
            assert!(mc >= bound, "mc {mc} < bound {bound}");
            assert!(mc - bound < 0.5, "gap {}", mc - bound);
        }
    }

    #[test]
    fn kl_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=8 {
            let (_, prior) = random_prior(&mut rng, n, 1);
            let pb = &prior.blocks[0];
            let mu = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let l = random_chol(&mut rng, n);
            let v = &l * l.transpose();
            let want = dense_kl(&mu, &v, &pb.k);
            let got = kl_block(&mu, &l, pb);
            assert!(
                (got - want).abs() < 1e-9 * want.abs().max(1.0),
                "n={n}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn kl_vanishes_at_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, prior) = random_prior(&mut rng, 6, 3);
        let state = VariationalState::from_prior(&prior);
        assert!(kl_term(&state, &prior).abs() < 1e-10);
    }

    #[test]
    fn elbo_matches_term_by_term_evaluation() {
        let fs = toy_factor_set();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, prior) = random_prior(&mut rng, 2, 2);
        let state = VariationalState {
            mu: prior
                .blocks
                .iter()
                .map(|b| DVector::from_fn(b.dim(), |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
            chol: prior
                .blocks
                .iter()
                .map(|b| random_chol(&mut rng, b.dim()))
                .collect(),
        };
        let conf = ConfidenceTable {
            unary: vec![vec![0.3, 0.7], vec![1.0]],
            transition: vec![vec![0.4, 0.6]],
        };
        let v = |b: usize, i: usize| state.covariance(b)[(i, i)];
        let m = |b: usize, i: usize| state.mu[b][i];
        let u = |row: usize, y: usize| {
            m(y, row)
                - ((m(0, row) + 0.5 * v(0, row)).exp() + (m(1, row) + 0.5 * v(1, row)).exp()).ln()
        };
        // transition rows: (0,1) -> 1, (1,1) -> 3
        let t = |a: usize, b: usize| {
            m(2, 2 * a + b)
                - ((m(2, 2 * a) + 0.5 * v(2, 2 * a)).exp()
                    + (m(2, 2 * a + 1) + 0.5 * v(2, 2 * a + 1)).exp())
                .ln()
        };
        let p = u(0, 0) + u(0, 1) + u(1, 1) + t(0, 1) + t(1, 1);
        let logc = 0.3f64.ln() + 0.7f64.ln() + 0.4f64.ln() + 0.6f64.ln();
        let kl: f64 = (0..3)
            .map(|b| dense_kl(&state.mu[b], &state.covariance(b), &prior.blocks[b].k))
            .sum();
        let want = -kl + p + logc;
        let got = elbo_lower_bound(&state, &conf, &fs, &prior).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn grad_v_at_prior_is_likelihood_part() {
        let fs = toy_factor_set();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, prior) = random_prior(&mut rng, 2, 2);
        let state = VariationalState::from_prior(&prior);
        let g = likelihood_grads(&state.mu, &state.v_diags(), &fs);
        for (b, gv) in grad_v(&state, &fs, &prior).iter().enumerate() {
            for i in 0..gv.nrows() {
                for j in 0..gv.ncols() {
                    let want = if i == j { g.vdiag[b][i] } else { 0.0 };
                    assert!((gv[(i, j)] - want).abs() < 1e-6, "block {b} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn identical_tokens_give_zero_theta_gradient() {
        let feats = vec![vec![0.5, 0.5]; 3];
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let d2 = SqDistances::new(&refs).unwrap();
        let hyper = KernelHyper::new(vec![1.0, 2.0], 1e-3).unwrap();
        let prior = build_prior_from(&d2, &hyper).unwrap();
        let mut state = VariationalState::from_prior(&prior);
        state.mu[0][1] = 0.4;
        assert!(grad_theta(&state, &prior, &d2, &hyper)
            .iter()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn confidence_is_softmax_of_expectation() {
        let fs = FactorSet::from_candidates(&[vec![vec![0, 1], vec![1]]], 2).unwrap();
        let mu = vec![
            DVector::from_vec(vec![0.5, 0.0]),
            DVector::from_vec(vec![-0.5, 0.0]),
            DVector::zeros(4),
        ];
        let vdiag = vec![
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::zeros(4),
        ];
        let conf = confidences_from(&mu, &vdiag, &fs, CONFIDENCE_FLOOR);
        assert!((conf.unary[0][0] - 0.7311).abs() < 1e-4);
        assert_eq!(conf.unary[1], vec![1.0]);
        assert_eq!(conf.transition[0], vec![0.5, 0.5]);
    }
}
