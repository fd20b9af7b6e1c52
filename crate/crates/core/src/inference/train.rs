//! Alternating optimization: confidences, then `(μ, V)` / `θ` ascent.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::bound::confidences_from;
use super::site::SiteState;
use super::{
    elbo_lower_bound, log_confidence_sum, ConfidenceTable, VariationalState, CONFIDENCE_FLOOR,
};
use crate::corpus::{Corpus, FeaturizerConfig, LabelId, LabelSet};
use crate::error::{Error, Result};
use crate::kernel::{build_prior_from, KernelHyper, PriorCov, SqDistances, DEFAULT_JITTER};
use crate::piecewise::FactorSet;

const THETA_HALVINGS: usize = 12;
const MAX_LOG_THETA_STEP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Alternation rounds (confidence update + ascent).
    pub max_alt: usize,
    /// `θ` steps per round.
    pub max_outer: usize,
    /// `(μ, V)` sweeps per `θ` step.
    pub max_inner: usize,
    /// Relative `L_l` change that ends a round or the alternation.
    pub tol_elbo: f64,
    /// Relative change per sweep that ends the inner loop.
    pub tol_inner: f64,
    /// Initial log-space step for `θ`.
    pub theta_step: f64,
    pub c_min: f64,
    pub jitter: f64,
    pub rng_seed: u64,
    /// Re-evaluate the full objective from the materialized state after
    /// every accepted inner step. Slow; meant for tests.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_alt: 10,
            max_outer: 10,
            max_inner: 200,
            tol_elbo: 1e-6,
            tol_inner: 1e-7,
            theta_step: 1.0,
            c_min: CONFIDENCE_FLOOR,
            jitter: DEFAULT_JITTER,
            rng_seed: 0,
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_alt == 0 || self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("iteration caps must be at least 1".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.tol_elbo) || !positive(self.tol_inner) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !positive(self.theta_step) || !positive(self.jitter) {
            return Err(Error::Config(
                "theta_step and jitter must be positive".into(),
            ));
        }
        if !(self.c_min > 0.0 && self.c_min < 1.0) {
            return Err(Error::Config(format!(
                "c_min must lie in (0, 1), got {}",
                self.c_min
            )));
        }
        Ok(())
    }
}

/// One line of the optimization trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub alternation: usize,
    pub outer: usize,
    /// `"confidence"`, `"inner"` or `"theta"`.
    pub phase: String,
    pub iteration: usize,
    pub elbo: f64,
    pub grad_inf: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<TraceRecord>,
    pub alternations: usize,
    /// `Σ log C` in force during each alternation.
    pub log_confidence: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub theta_steps: usize,
    pub theta_trials: usize,
    /// Smallest `ΔL_l` over accepted inner steps.
    pub min_inner_delta: Option<f64>,
    /// Smallest `ΔL_l` over accepted inner steps as measured by the general
    /// bound on the materialized state (audit mode only).
    pub audit_min_delta: Option<f64>,
    /// Largest disagreement between the optimizer's objective and the
    /// general bound (audit mode only).
    pub audit_max_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub label_set: LabelSet,
    /// Set by callers that featurized the corpus from surface forms.
    pub featurizer: Option<FeaturizerConfig>,
    pub hyper: KernelHyper,
    pub state: VariationalState,
    pub confidences: ConfidenceTable,
    pub train_features: Vec<Vec<f64>>,
    pub train_candidates: Vec<Vec<Vec<LabelId>>>,
    pub elbo: f64,
    pub report: TrainReport,
}

impl TrainedModel {
    pub fn factor_set(&self) -> Result<FactorSet> {
        FactorSet::from_candidates(&self.train_candidates, self.label_set.len())
    }

    pub fn prior(&self) -> Result<PriorCov> {
        let feats: Vec<&[f64]> = self.train_features.iter().map(Vec::as_slice).collect();
        build_prior_from(&SqDistances::new(&feats)?, &self.hyper)
    }
}

/// Argmax-confidence disambiguation of the training positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub labels: Vec<Vec<LabelId>>,
    pub ambiguous: usize,
    pub ambiguous_correct: usize,
    pub total: usize,
    pub total_correct: usize,
}

impl Recovery {
    /// Accuracy over ambiguous positions; 1 when there are none.
    pub fn accuracy(&self) -> f64 {
        if self.ambiguous == 0 {
            1.0
        } else {
            self.ambiguous_correct as f64 / self.ambiguous as f64
        }
    }

    pub fn overall_accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.total_correct as f64 / self.total as f64
        }
    }
}

pub fn recover_ground_truth(model: &TrainedModel, gold: &[Vec<LabelId>]) -> Result<Recovery> {
    let fs = model.factor_set()?;
    if gold.len() != model.train_candidates.len()
        || gold
            .iter()
            .zip(&model.train_candidates)
            .any(|(g, c)| g.len() != c.len())
    {
        return Err(Error::Shape(
            "gold labels do not match the training sequences".into(),
        ));
    }
    let mut labels: Vec<Vec<LabelId>> = model
        .train_candidates
        .iter()
        .map(|s| vec![0; s.len()])
        .collect();
    let mut rec = Recovery {
        labels: Vec::new(),
        ambiguous: 0,
        ambiguous_correct: 0,
        total: 0,
        total_correct: 0,
    };
    for (piece, conf) in fs.unary.iter().zip(&model.confidences.unary) {
        let mut best = 0;
        for (j, &c) in conf.iter().enumerate() {
            if c > conf[best] {
                best = j;
            }
        }
        let label = piece.candidates[best];
        labels[piece.seq_id][piece.pos] = label;
        let correct = label == gold[piece.seq_id][piece.pos];
        rec.total += 1;
        rec.total_correct += correct as usize;
        if piece.candidates.len() > 1 {
            rec.ambiguous += 1;
            rec.ambiguous_correct += correct as usize;
        }
    }
    rec.labels = labels;
    Ok(rec)
}

/// Shared starting scale `1 / (2 · median nonzero squared distance)`.
pub(crate) fn initial_theta(d2: &SqDistances) -> f64 {
    match d2.median_nonzero() {
        Some(m) if m > 0.0 => 1.0 / (2.0 * m),
        _ => 1.0,
    }
}

fn rel_change(before: f64, after: f64) -> f64 {
    (after - before).abs() / before.abs().max(1.0)
}

struct Trainer<'a> {
    fs: &'a FactorSet,
    d2: SqDistances,
    config: &'a TrainConfig,
    hyper: KernelHyper,
    prior: PriorCov,
    site: SiteState,
    theta_step: f64,
    report: TrainReport,
}

impl Trainer<'_> {
    fn record(
        &mut self,
        alternation: usize,
        outer: usize,
        phase: &str,
        iteration: usize,
        elbo: f64,
    ) {
        let grad_inf = self.site.grad_mu_inf(&self.prior, self.fs);
        debug!("alt {alternation} outer {outer} {phase} {iteration}: L_l = {elbo:.10e}, |grad_mu| = {grad_inf:.3e}");
        self.report.trace.push(TraceRecord {
            alternation,
            outer,
            phase: phase.to_string(),
            iteration,
            elbo,
            grad_inf,
            theta: self.hyper.theta.clone(),
        });
    }

    fn audit(
        &mut self,
        conf: &ConfidenceTable,
        logc: f64,
        previous: &mut Option<f64>,
    ) -> Result<()> {
        let state = self.site.materialize(&self.prior)?;
        let general = elbo_lower_bound(&state, conf, self.fs, &self.prior)?;
        let gap = (general - (self.site.objective(self.fs) + logc)).abs();
        let r = &mut self.report;
        r.audit_max_gap = Some(r.audit_max_gap.map_or(gap, |g| g.max(gap)));
        if let Some(prev) = *previous {
            let delta = general - prev;
            r.audit_min_delta = Some(r.audit_min_delta.map_or(delta, |d| d.min(delta)));
        }
        *previous = Some(general);
        Ok(())
    }

    fn inner(&mut self, alt: usize, outer: usize, conf: &ConfidenceTable, logc: f64) -> Result<()> {
        let mut rho = vec![1.0; self.site.n_blocks()];
        let mut audited = None;
        if self.config.audit {
            self.audit(conf, logc, &mut audited)?;
        }
        for sweep in 0..self.config.max_inner {
            let before = self.site.objective(self.fs);
            for (b, rho_b) in rho.iter_mut().enumerate() {
                match self.site.block_step(b, &self.prior, self.fs, *rho_b)? {
                    Some(step) => {
                        self.report.accepted_steps += 1;
                        let d = &mut self.report.min_inner_delta;
                        *d = Some(d.map_or(step.delta, |m| m.min(step.delta)));
                        *rho_b = (2.0 * step.rho).min(1.0);
                        if self.config.audit {
                            self.audit(conf, logc, &mut audited)?;
                        }
                    }
                    None => self.report.rejected_steps += 1,
                }
            }
            let after = self.site.objective(self.fs);
            if !after.is_finite() {
                return Err(Error::Numerical(format!(
                    "L_l became non-finite in sweep {sweep}"
                )));
            }
            self.record(alt, outer, "inner", sweep, after + logc);
            if rel_change(before, after) < self.config.tol_inner {
                break;
            }
        }
        Ok(())
    }

    /// One backtracked log-space step on `θ`, re-anchoring `q` on the new
    /// prior with the same sites and means. Returns whether it was taken.
    fn theta(&mut self) -> Result<bool> {
        let grad = self
            .site
            .grad_theta(&self.prior, &self.d2, &self.hyper.theta);
        let dir: Vec<f64> = grad
            .iter()
            .zip(&self.hyper.theta)
            .map(|(g, t)| g * t)
            .collect();
        if dir.iter().all(|d| *d == 0.0) {
            return Ok(false);
        }
        let base = self.site.objective(self.fs);
        let mut s = self.theta_step;
        for attempt in 0..THETA_HALVINGS {
            self.report.theta_trials += 1;
            let theta: Vec<f64> = self
                .hyper
                .theta
                .iter()
                .zip(&dir)
                .map(|(t, d)| t * (s * d).clamp(-MAX_LOG_THETA_STEP, MAX_LOG_THETA_STEP).exp())
                .collect();
            let hyper = KernelHyper::new(theta, self.hyper.jitter)?;
            let trial = build_prior_from(&self.d2, &hyper).and_then(|prior| {
                let site = self.site.reanchor(&prior)?;
                Ok((prior, site))
            });
            if let Ok((prior, site)) = trial {
                let value = site.objective(self.fs);
                if value.is_finite() && value >= base {
                    self.hyper = hyper;
                    self.prior = prior;
                    self.site = site;
                    self.theta_step = if attempt == 0 { 2.0 * s } else { s };
                    self.report.theta_steps += 1;
                    return Ok(true);
                }
            }
            s *= 0.5;
        }
        self.theta_step = s;
        Ok(false)
    }
}

/// Fits `q(f)`, `θ` and the confidences on a featurized corpus.
pub fn train(
    corpus: &Corpus,
    factor_set: &FactorSet,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if !corpus.is_featurized() {
        return Err(Error::Data("corpus is not featurized".into()));
    }
    let train_candidates: Vec<Vec<Vec<LabelId>>> = corpus
        .sequences
        .iter()
        .map(|s| s.candidates.clone())
        .collect();
    if factor_set.n_labels() != corpus.n_labels()
        || factor_set.n_tokens() != corpus.n_tokens()
        || *factor_set != FactorSet::from_candidates(&train_candidates, corpus.n_labels())?
    {
        return Err(Error::Shape(
            "factor set was not built from this corpus".into(),
        ));
    }
    let feats = corpus.features();
    if let Some((i, _)) = feats
        .iter()
        .enumerate()
        .find(|(_, f)| f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numerical(format!(
            "feature vector of token {i} is not finite"
        )));
    }
    let d2 = SqDistances::new(&feats)?;
    let hyper = KernelHyper::new(vec![initial_theta(&d2); corpus.n_labels()], config.jitter)?;
    let prior = build_prior_from(&d2, &hyper)?;
    for (y, pb) in prior.blocks.iter().enumerate().take(corpus.n_labels()) {
        if pb.jitter > config.jitter {
            warn!("prior block {y} needed jitter {:e}", pb.jitter);
        }
    }
    let site = SiteState::from_prior(&prior);
    let mut t = Trainer {
        fs: factor_set,
        d2,
        config,
        hyper,
        prior,
        site,
        theta_step: config.theta_step,
        report: TrainReport::default(),
    };

    let mut conf = ConfidenceTable::uniform(factor_set);
    let mut previous: Option<f64> = None;
    let mut elbo = f64::NAN;
    for alt in 0..config.max_alt {
        t.report.alternations = alt + 1;
        if alt > 0 {
            conf = confidences_from(t.site.mu(), t.site.vdiag(), factor_set, config.c_min);
        }
        let logc = log_confidence_sum(&conf);
        t.report.log_confidence.push(logc);
        let start = t.site.objective(factor_set) + logc;
        t.record(alt, 0, "confidence", 0, start);

        let mut round_start = t.site.objective(factor_set);
        for outer in 0..config.max_outer {
            t.inner(alt, outer, &conf, logc)?;
            let stepped = t.theta()?;
            let value = t.site.objective(factor_set);
            t.record(alt, outer, "theta", outer, value + logc);
            if !stepped || rel_change(round_start, value) < config.tol_elbo {
                break;
            }
            round_start = value;
        }

        elbo = t.site.objective(factor_set) + logc;
        if !elbo.is_finite() {
            return Err(Error::Numerical(format!(
                "L_l is non-finite after alternation {alt}"
            )));
        }
        if previous.is_some_and(|p| rel_change(p, elbo) < config.tol_elbo) {
            break;
        }
        previous = Some(elbo);
    }
    // Confidences consistent with the final posterior.
    conf = confidences_from(t.site.mu(), t.site.vdiag(), factor_set, config.c_min);
    elbo = if elbo.is_finite() {
        t.site.objective(factor_set) + log_confidence_sum(&conf)
    } else {
        elbo
    };
    let state = t.site.materialize(&t.prior)?;
    Ok(TrainedModel {
        label_set: corpus.label_set.clone(),
        featurizer: None,
        hyper: t.hyper,
        state,
        confidences: conf,
        train_features: feats.iter().map(|f| f.to_vec()).collect(),
        train_candidates,
        elbo,
        report: t.report,
    })
}
